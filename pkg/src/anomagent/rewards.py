"""Verifiable trajectory reward: task + reflection + behavior terms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .agent_loop import EpisodeResult, Termination
from .protocol import ToolName, check_format
from .tools import BackendConfig, ToolBackend, ToolError, invoke

START = "start"
ANSWER = "answer"

Node = str  # a ToolName value, START or ANSWER


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.3
    lambda_kr: float = 0.2
    lambda_t: float = 0.1
    delta: float = 0.5
    t_max: int = 12

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "lambda_kr", "lambda_t"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")


DEFAULT_EDGES: frozenset[tuple[Node, Node]] = frozenset(
    {
        (START, ToolName.PG.value),
        (ToolName.PG.value, ToolName.IG.value),
        (ToolName.IG.value, ToolName.QE.value),
        (ToolName.QE.value, ToolName.IG.value),
        (ToolName.QE.value, ToolName.KR.value),
        (ToolName.QE.value, ToolName.MG.value),
        (ToolName.KR.value, ToolName.IG.value),
        (ToolName.MG.value, ANSWER),
    }
)


@dataclass(frozen=True)
class TransitionTable:
    """Closed set of legal (previous, next) action pairs; anything else costs ``penalty``."""

    allowed: frozenset[tuple[Node, Node]] = DEFAULT_EDGES
    penalty: float = -1.0

    def __post_init__(self) -> None:
        if self.penalty > 0:
            raise ValueError("penalty must be <= 0")

    def phi(self, prev: Node, nxt: Node) -> float:
        return 0.0 if (prev, nxt) in self.allowed else self.penalty


def action_nodes(e: EpisodeResult) -> list[Node]:
    """START, the tool actions, then ANSWER if the episode answered."""
    nodes = [START] + [a.value for a in e.action_sequence]
    if e.terminated_by is Termination.ANSWER:
        nodes.append(ANSWER)
    return nodes


@dataclass
class RewardBreakdown:
    task: float
    reflection: float
    behavior: float
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    no_generation: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "reflection": self.reflection,
            "behavior": self.behavior,
            "total": self.total,
            "terms": dict(self.terms),
            "no_generation": self.no_generation,
        }


def _task(e: EpisodeResult, judge: BackendConfig | ToolBackend | None) -> tuple[float, bool]:
    if judge is None:
        if not e.qe_scores:
            return 0.0, True
        return float(e.qe_scores[-1]), False
    t = e.trajectory
    answer = t.answer
    final = answer.final_image_index if answer is not None else max(t.images)
    if final == 1 or final not in t.images:
        return 0.0, True
    args = {"anomaly_image": final, "item_name": t.task.item_name, "anomaly_type": t.task.anomaly_type}
    try:
        obs = invoke(ToolName.QE, args, t, judge)
    except ToolError:
        return 0.0, True
    return float(obs.content["score"]), False


def task_reward(e: EpisodeResult, judge: BackendConfig | ToolBackend | None = None) -> float:
    """Final quality score.

    With ``judge=None`` the episode's own last QE score is reused; otherwise
    the judge backend re-scores the final image. Episodes with nothing to
    score get 0.
    """
    return _task(e, judge)[0]


def reflection_reward(qe_scores: Sequence[float]) -> float:
    """Sum of positive score gains over consecutive generations."""
    return math.fsum(max(0.0, b - a) for a, b in zip(qe_scores, qe_scores[1:]))


def behavior_terms(e: EpisodeResult, w: RewardWeights, table: TransitionTable) -> dict[str, float]:
    nodes = action_nodes(e)
    transition = sum(table.phi(a, b) for a, b in zip(nodes, nodes[1:]))

    kr_hits = 0
    latest: float | None = None
    qe_seen = 0
    for action in e.action_sequence:
        if action is ToolName.QE:
            if qe_seen < len(e.qe_scores):
                latest = e.qe_scores[qe_seen]
            qe_seen += 1
        elif action is ToolName.KR and latest is not None and latest < w.delta:
            kr_hits += 1

    return {
        "transition_penalty": transition,
        "kr_bonus": w.lambda_kr * kr_hits,
        "format_indicator": 1.0 if check_format(e.trajectory) else 0.0,
        "length_penalty": w.lambda_t * max(0, e.turns - w.t_max),
    }


def behavior_reward(
    e: EpisodeResult, w: RewardWeights = RewardWeights(), table: TransitionTable = TransitionTable()
) -> tuple[float, dict[str, float]]:
    """Transition penalties + KR bonus + format indicator - length penalty, with the itemized terms."""
    terms = behavior_terms(e, w, table)
    value = terms["transition_penalty"] + terms["kr_bonus"] + terms["format_indicator"] - terms["length_penalty"]
    return value, terms


def total_reward(
    e: EpisodeResult,
    w: RewardWeights = RewardWeights(),
    table: TransitionTable = TransitionTable(),
    judge: BackendConfig | ToolBackend | None = None,
) -> RewardBreakdown:
    task, no_generation = _task(e, judge)
    reflection = reflection_reward(e.qe_scores)
    behavior, terms = behavior_reward(e, w, table)
    return RewardBreakdown(
        task=task,
        reflection=reflection,
        behavior=behavior,
        total=w.alpha * task + w.beta * reflection + w.gamma * behavior,
        terms=terms,
        no_generation=no_generation,
    )


def score_episodes(
    episodes: Iterable[EpisodeResult],
    w: RewardWeights = RewardWeights(),
    table: TransitionTable = TransitionTable(),
    judge: BackendConfig | ToolBackend | None = None,
) -> list[RewardBreakdown]:
    return [total_reward(e, w, table, judge) for e in episodes]
