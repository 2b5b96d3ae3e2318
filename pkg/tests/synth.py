"""Random synthetic episodes with known ground truth, for reward tests.

Segments are frozen dataclasses, so a small pool is built once and shared
across episodes; only the composition is random.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache

from anomagent.agent_loop import EpisodeResult, Termination
from anomagent.protocol import Answer, TaskSpec, Thinking, ToolCall, ToolName, ToolReturn, Trajectory
from anomagent.tools import QualityVerdict

TASK = TaskSpec("bottle", "crack", "normal.png")
TOOLS = list(ToolName)
THINK = Thinking("step")

# Legal successors, used to bias random walks toward realistic sequences.
NEXT = {
    None: [ToolName.PG],
    ToolName.PG: [ToolName.IG],
    ToolName.IG: [ToolName.QE],
    ToolName.QE: [ToolName.IG, ToolName.KR, ToolName.MG],
    ToolName.KR: [ToolName.IG],
    ToolName.MG: [],
}


@dataclass
class Truth:
    actions: list[str]
    scores: list[float]
    answered: bool
    format_ok: bool


@lru_cache(maxsize=None)
def _call(tool: ToolName, latest: int) -> ToolCall:
    args = {
        ToolName.PG: {"image": 1, "item_name": "bottle", "anomaly_type": "crack"},
        ToolName.IG: {"prompt": "add a crack", "target_image": 1},
        ToolName.QE: {"anomaly_image": latest, "item_name": "bottle", "anomaly_type": "crack"},
        ToolName.KR: {"item_name": "bottle", "anomaly_type": "crack"},
        ToolName.MG: {"anomaly_image": latest},
    }[tool]
    return ToolCall(tool, args)


@lru_cache(maxsize=None)
def _ig_return(index: int) -> ToolReturn:
    return ToolReturn(ToolName.IG, {"new_image_index": index, "image": f"img-{index}"})


@lru_cache(maxsize=None)
def _qe_return(score: float) -> ToolReturn:
    return ToolReturn(ToolName.QE, QualityVerdict.from_scalar(score, "r").to_content())


_FIXED = {
    ToolName.PG: ToolReturn(ToolName.PG, {"prompt": "add a crack"}),
    ToolName.KR: ToolReturn(ToolName.KR, {"knowledge": "cracks branch"}),
    ToolName.MG: ToolReturn(ToolName.MG, {"mask_reference": "mask"}),
}


@lru_cache(maxsize=None)
def _answer(final: int) -> Answer:
    return Answer("success", final, True, "done")


def random_actions(rng: random.Random, max_len: int = 16, legal_bias: float = 0.8) -> list[ToolName]:
    actions: list[ToolName] = []
    prev = None
    for _ in range(rng.randint(0, max_len)):
        options = NEXT[prev]
        nxt = rng.choice(options) if options and rng.random() < legal_bias else rng.choice(TOOLS)
        actions.append(nxt)
        prev = nxt
    return actions


def random_episode(
    rng: random.Random,
    actions: list[ToolName] | None = None,
    scores: list[float] | None = None,
    answered: bool | None = None,
    corrupt: bool | None = None,
) -> tuple[EpisodeResult, Truth]:
    """Episode for ``actions`` (random when None) plus its ground truth.

    QE scores lie on a 0.01 grid so the shared return pool stays small.
    A corrupted episode loses one thinking segment, which breaks its format.
    """
    if actions is None:
        actions = random_actions(rng)
    n_qe = sum(1 for a in actions if a is ToolName.QE)
    if scores is None:
        scores = [rng.randint(0, 100) / 100 for _ in range(n_qe)]
    if answered is None:
        answered = rng.random() < 0.7
    if corrupt is None:
        corrupt = bool(actions) and rng.random() < 0.2

    t = Trajectory.start(TASK)
    qe = iter(scores)
    for a in actions:
        latest = max(t.images)
        if a is ToolName.IG:
            ret = _ig_return(latest + 1)
            t.images[latest + 1] = f"img-{latest + 1}"
        elif a is ToolName.QE:
            ret = _qe_return(next(qe))
        else:
            ret = _FIXED[a]
        t.segments += [THINK, _call(a, latest), ret]
    if answered:
        t.segments += [THINK, _answer(max(t.images))]
    if corrupt:
        thinking_at = [i for i, s in enumerate(t.segments) if isinstance(s, Thinking)]
        del t.segments[rng.choice(thinking_at)]

    e = EpisodeResult.from_trajectory(t, Termination.ANSWER if answered else Termination.TURN_BUDGET)
    truth = Truth([a.value for a in actions], list(scores), answered, answered and not corrupt)
    return e, truth
