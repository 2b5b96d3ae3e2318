import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from anomagent.metrics import DegenerateRow, NoEligibleCluster, eligible, icl, inception_score


def _normalize(row):
    s = math.fsum(row)
    out = [x / s for x in row]
    out[-1] = 1.0 - math.fsum(out[:-1])
    return out


def _random_matrix(rng, n, k):
    return [_normalize([rng.random() + 1e-3 for _ in range(k)]) for _ in range(n)]


def test_one_hot_four_classes():
    eye = [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)]
    assert inception_score(eye) == 4.0


def test_identical_rows():
    assert inception_score([[0.1, 0.2, 0.7]] * 6) == 1.0


def test_matches_double_loop_oracle():
    rng = random.Random(10)
    for _ in range(50):
        p = _random_matrix(rng, 10, 5)
        assert abs(inception_score(p) - oracles.inception_score(p)) <= 1e-10


def test_zero_entries_contribute_nothing():
    p = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]
    assert inception_score(p) == pytest.approx(oracles.inception_score(p), abs=1e-12)


@given(st.integers(0, 2**32), st.integers(1, 8), st.integers(1, 6))
def test_range_and_row_permutation(seed, n, k):
    rng = random.Random(seed)
    p = _random_matrix(rng, n, k)
    score = inception_score(p)
    assert 1.0 <= score <= k
    shuffled = p[:]
    rng.shuffle(shuffled)
    assert inception_score(shuffled) == pytest.approx(score, rel=1e-12)


@pytest.mark.parametrize(
    "p",
    [
        [[0.5, 0.6]],
        [[1.2, -0.2]],
        [[math.nan, 1.0]],
        [],
        [[]],
        [0.5, 0.5],
    ],
)
def test_degenerate_rows(p):
    with pytest.raises(DegenerateRow):
        inception_score(p)


def test_row_sum_tolerance():
    inception_score([[0.5, 0.5 + 5e-10]])
    with pytest.raises(DegenerateRow):
        inception_score([[0.5, 0.5 + 5e-9]])


def test_icl_examples():
    assert icl({"a": [0.0, 0.0, 0.0]}) == 0.0
    assert icl({"a": [0.2, 0.4]}) == pytest.approx(0.3, abs=1e-15)
    assert icl([("x", [0.2]), ("y", [0.4, 0.6, 0.8])]) == pytest.approx(0.4, abs=1e-15)


def test_icl_complete_clusters_only():
    d = {"pair": [0.5], "short": [0.1, 0.2], "triple": [0.1, 0.2, 0.3], "empty": []}
    assert icl(d, require_complete=True) == pytest.approx((0.5 + 0.2) / 2)
    assert icl(d) == pytest.approx((0.5 + 0.15 + 0.2) / 3)
    with pytest.raises(NoEligibleCluster):
        icl({"short": [0.1, 0.2]}, require_complete=True)
    with pytest.raises(NoEligibleCluster):
        icl({})
    with pytest.raises(NoEligibleCluster):
        icl({"empty": []})


def test_icl_rejects_bad_distances():
    with pytest.raises(ValueError):
        icl({"a": [-0.1]})
    with pytest.raises(ValueError):
        icl({"a": [math.inf]})


def test_eligible_counts():
    assert [c for c in range(12) if eligible([0.0] * c)] == [1, 3, 6, 10]


_cluster = st.sampled_from([1, 3, 6, 10]).flatmap(lambda c: st.lists(st.floats(0, 2), min_size=c, max_size=c))


@given(st.lists(_cluster, min_size=1, max_size=6), st.floats(0, 10), st.randoms())
def test_icl_properties(clusters, c, rnd):
    d = {f"c{i}": xs for i, xs in enumerate(clusters)}
    value = icl(d)
    assert value == pytest.approx(oracles.icl(d), abs=1e-12)
    assert icl(d, require_complete=True) == value
    items = list(d.items())
    rnd.shuffle(items)
    reordered = [(k, rnd.sample(v, len(v))) for k, v in items]
    assert icl(reordered) == pytest.approx(value, abs=1e-12)
    assert icl({k: [c * x for x in v] for k, v in d.items()}) == pytest.approx(c * value, rel=1e-9, abs=1e-12)
