import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomagent.agent_loop import LoopConfig, replay_episode, run_episode, scripted_policy
from anomagent.protocol import Answer, Thinking, ToolCall, ToolName, ToolReturn, check_format, loads_trajectory
from anomagent.tools import BackendConfig, BackendUnavailable, SimScript, SimulatedBackend
from anomagent.trajectory_builder import (
    RANDOM,
    BuildSpec,
    TaxonomyClass,
    build_dataset,
    build_trajectory,
    classify,
    expand_mask,
    load_specs,
    need_kr,
    sft_target_mask,
    taxonomy_counts,
)

PG, IG, QE, KR, MG = ToolName.PG, ToolName.IG, ToolName.QE, ToolName.KR, ToolName.MG
SIM = BackendConfig.simulated(0)
CLASS_BY_N = {1: TaxonomyClass.SINGLE, 2: TaxonomyClass.DUAL, 3: TaxonomyClass.TRIPLE}


def build(n, kr_ratio=0.5, seed=0, image="ano_001.png"):
    return build_trajectory(BuildSpec(image, "bottle", "crack", n=n, kr_ratio=kr_ratio, seed=seed), SIM)


def test_single_generation_order():
    t = build(1)
    assert t.action_sequence() == [PG, IG, QE, MG]
    assert isinstance(t.segments[-1], Answer)
    assert classify(t.action_sequence()) is TaxonomyClass.SINGLE


def test_triple_generation_order():
    assert build(3).action_sequence() == [PG, IG, QE, KR, IG, QE, IG, QE, MG]


def test_dual_generation_kr_optional():
    assert build(2, kr_ratio=0.0).action_sequence() == [PG, IG, QE, IG, QE, MG]
    assert build(2, kr_ratio=1.0).action_sequence() == [PG, IG, QE, KR, IG, QE, MG]


@pytest.mark.parametrize(
    "args, expected",
    [
        ((1, 1, 0.0, 1.0), False),
        ((3, 1, 0.99, 0.0), True),
        ((3, 2, 0.0, 1.0), False),
        ((3, 3, 0.0, 1.0), False),
        ((2, 1, 0.9, 0.5), False),
        ((2, 1, 0.4, 0.5), True),
        ((2, 2, 0.0, 1.0), False),
    ],
)
def test_need_kr(args, expected):
    assert need_kr(*args) is expected


def test_need_kr_step_range():
    with pytest.raises(ValueError):
        need_kr(2, 3, 0.1, 0.5)
    with pytest.raises(ValueError):
        need_kr(2, 0, 0.1, 0.5)


def test_classify():
    assert classify([PG, IG, QE, KR, IG, QE, MG]) is TaxonomyClass.DUAL
    assert classify([PG, IG, QE]) is None
    assert classify([PG, IG, QE, KR, IG, QE, KR, IG, QE, MG]) is None


@pytest.mark.parametrize("kwargs", [{"n": 4}, {"n": "many"}, {"kr_ratio": 1.5}, {"n_weights": (0, 0, 0)}])
def test_build_spec_rejects(kwargs):
    with pytest.raises(ValueError):
        BuildSpec("a", "b", "c", **kwargs)


def test_build_spec_round_trip():
    spec = BuildSpec("a.png", "pcb", "bent", n=RANDOM, kr_ratio=0.25, seed=9, n_weights=(1.0, 2.0, 3.0))
    assert BuildSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    assert BuildSpec.from_dict({"anomaly_image": "a", "item_name": "b", "anomaly_type": "c"}, 5).seed == 5


_spec = st.builds(
    BuildSpec,
    anomaly_image=st.text(min_size=1, max_size=12),
    item_name=st.text(max_size=12),
    anomaly_type=st.text(max_size=12),
    n=st.sampled_from([1, 2, 3, RANDOM]),
    kr_ratio=st.floats(0, 1),
    seed=st.integers(0, 2**64 - 1),
)


@settings(max_examples=150)
@given(_spec)
def test_built_trajectory_invariants(spec):
    t = build_trajectory(spec, SIM)
    n, _ = spec.draws()
    actions = t.action_sequence()
    assert check_format(t)
    assert classify(actions) is CLASS_BY_N[n]
    assert actions.count(IG) == n and actions.count(QE) == n
    assert actions.count(PG) == 1 and actions.count(MG) == 1
    assert sum(isinstance(s, Answer) for s in t.segments) == 1
    scores = t.qe_scores()
    assert scores == sorted(scores) and len(set(scores)) == len(scores)
    assert scores[-1] >= 0.8
    assert t.images[1] == f"normal_of_{spec.anomaly_image}"
    assert t.images[len(t.images)] == spec.anomaly_image
    replayed = replay_episode(t)
    assert replayed.trajectory == t


@settings(max_examples=60)
@given(_spec)
def test_scripted_policy_reproduces_built_actions(spec):
    # Feeding the builder's QE scores to the reference policy walks the same path.
    t = build_trajectory(spec, SIM)
    script = SimScript.from_dict({"qe_score_sequence": t.qe_scores()})
    e = run_episode(t.task, scripted_policy, BackendConfig.simulated(0, script), LoopConfig())
    assert e.action_sequence == t.action_sequence()


def test_build_is_deterministic():
    spec = BuildSpec("x.png", "cable", "cut", n=RANDOM, seed=77)
    assert build_trajectory(spec, SIM) == build_trajectory(spec, BackendConfig.simulated(5))


def test_sft_target_mask():
    t = build(1)
    mask = sft_target_mask(t)
    assert all(not flag for flag, s in zip(mask, t.segments) if isinstance(s, ToolReturn))
    assert mask[-1] is True
    for n in (1, 2, 3):
        t = build(n, kr_ratio=1.0)
        census = sum(isinstance(s, (Thinking, ToolCall, Answer)) for s in t.segments)
        assert sum(sft_target_mask(t)) == census


def test_expand_mask():
    assert expand_mask([True, False, True], [2, 1, 0]) == [True, True, False]
    with pytest.raises(ValueError):
        expand_mask([True], [1, 2])


def _specs(k, n=RANDOM, kr_ratio=0.5):
    return [BuildSpec(f"img_{i}.png", "bottle", "crack", n=n, kr_ratio=kr_ratio, seed=1000 + i) for i in range(k)]


def test_dataset_conservation(tmp_path):
    out = tmp_path / "d.jsonl"
    stats = build_dataset(_specs(10), SIM, out)
    rows = out.read_text().splitlines()
    assert stats.total == len(rows) <= 10
    assert sum(stats.per_class.values()) == stats.total
    assert taxonomy_counts(loads_trajectory(r) for r in rows) == {
        TaxonomyClass(k): v for k, v in stats.per_class.items() if v
    }


def test_empty_dataset(tmp_path):
    out = tmp_path / "empty.jsonl"
    stats = build_dataset([], SIM, out)
    assert out.read_text() == ""
    assert stats.total == 0 and stats.kr_rate == 0.0 and stats.failed == 0


def test_dataset_bytes_are_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    build_dataset(_specs(30), SIM, a)
    build_dataset(_specs(30), SIM, b, jobs=4)
    assert a.read_bytes() == b.read_bytes()


def test_dual_kr_rate_matches_configured_ratio(tmp_path):
    ratio = 2400 / 2772
    stats = build_dataset(_specs(1000, n=2, kr_ratio=ratio), SIM, tmp_path / "k.jsonl")
    sigma = math.sqrt(ratio * (1 - ratio) / 1000)
    assert stats.dual_total == 1000
    assert abs(stats.dual_kr_rate - ratio) <= 3 * sigma


class _FailsOn(SimulatedBackend):
    def reverse_normalize(self, anomaly_image, item_name="", anomaly_type=""):
        if anomaly_image == "img_3.png":
            raise BackendUnavailable("editor offline")
        return super().reverse_normalize(anomaly_image, item_name, anomaly_type)


def test_failures_are_recorded_not_fatal(tmp_path):
    stats = build_dataset(_specs(5), _FailsOn(0), tmp_path / "f.jsonl")
    assert stats.total == 4 and stats.failed == 1
    assert stats.failures[0]["index"] == 3 and "editor offline" in stats.failures[0]["error"]
    assert stats.to_dict()["failed"] == 1


def test_load_specs_assigns_seeds(tmp_path):
    path = tmp_path / "specs.jsonl"
    rows = [{"anomaly_image": "a", "item_name": "b", "anomaly_type": "c"},
            {"anomaly_image": "d", "item_name": "e", "anomaly_type": "f", "seed": 3}]
    path.write_text(json.dumps(rows[0]) + "\n" + json.dumps(rows[1]) + "\n\n" + json.dumps(rows[0]) + "\n")
    specs = load_specs(path, base_seed=10)
    assert [s.seed for s in specs] == [10, 3, 10 ^ 2]
    assert [s.seed for s in load_specs(path)] == [0, 3, 0]
