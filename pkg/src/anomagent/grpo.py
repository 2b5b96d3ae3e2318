"""Trajectory-level GRPO and SFT loss kernels over per-token log-probabilities.

These compute loss values only; no parameters are updated here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class GroupTooSmall(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    kl_beta: float = 0.04
    filter_zero_advantage: bool = True
    std_floor: float = 1e-8

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.kl_beta < 0 or self.std_floor < 0:
            raise ValueError("kl_beta and std_floor must be >= 0")


def group_advantages(rewards: Sequence[float], cfg: GrpoConfig = GrpoConfig()) -> list[float]:
    """(r - mean) / population std; all zeros when std < ``cfg.std_floor``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    mean = r.mean()
    std = r.std()
    if not std >= cfg.std_floor:
        return [0.0] * r.size
    return ((r - mean) / std).tolist()


def _vector(x: Sequence[float], name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeMismatch(f"{name} must be one-dimensional")
    return a


def importance_ratios(new: Sequence[float], old: Sequence[float]) -> list[float]:
    """Token-wise exp(new - old)."""
    a, b = _vector(new, "new"), _vector(old, "old")
    if a.shape != b.shape:
        raise ShapeMismatch(f"lengths differ: {a.size} vs {b.size}")
    return np.exp(a - b).tolist()


def kl_estimate(new: Sequence[float], ref: Sequence[float]) -> np.ndarray:
    """Non-negative per-token estimator exp(ref - new) - (ref - new) - 1."""
    d = np.asarray(ref, dtype=np.float64) - np.asarray(new, dtype=np.float64)
    return np.expm1(d) - d


def clipped_objective(rho: Sequence[float], advantage: float, epsilon: float) -> np.ndarray:
    """Per-token min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.minimum(rho * advantage, np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * advantage)


@dataclass
class GroupRollout:
    rewards: list[float]
    token_logprobs_new: list[list[float]]
    token_logprobs_old: list[list[float]]
    token_logprobs_ref: list[list[float]]
    supervision_mask: list[list[bool]] | None = None

    def __post_init__(self) -> None:
        g = len(self.rewards)
        if g < 2:
            raise GroupTooSmall(f"need at least 2 trajectories, got {g}")
        seqs = (self.token_logprobs_new, self.token_logprobs_old, self.token_logprobs_ref)
        if any(len(s) != g for s in seqs):
            raise ShapeMismatch("one log-prob sequence per trajectory is required")
        if self.supervision_mask is None:
            self.supervision_mask = [[True] * len(s) for s in self.token_logprobs_new]
        if len(self.supervision_mask) != g:
            raise ShapeMismatch("one mask per trajectory is required")
        for i in range(g):
            n = len(self.token_logprobs_new[i])
            if len(self.token_logprobs_old[i]) != n or len(self.token_logprobs_ref[i]) != n:
                raise ShapeMismatch(f"trajectory {i}: policy sequences differ in length")
            if len(self.supervision_mask[i]) != n:
                raise ShapeMismatch(f"trajectory {i}: mask length differs")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GroupRollout":
        lp = d.get("logprobs", d)
        return cls(
            rewards=list(d["rewards"]),
            token_logprobs_new=lp["new"],
            token_logprobs_old=lp["old"],
            token_logprobs_ref=lp["ref"],
            supervision_mask=lp.get("mask"),
        )


@dataclass
class GrpoResult:
    loss: float
    advantages: list[float]
    kept: list[bool]
    n_tokens: int
    clip_fraction: float
    mean_kl: float
    empty_after_filter: bool = False
    per_trajectory: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "loss": self.loss,
            "advantages": self.advantages,
            "kept": self.kept,
            "n_tokens": self.n_tokens,
            "clip_fraction": self.clip_fraction,
            "mean_kl": self.mean_kl,
            "empty_after_filter": self.empty_after_filter,
            "per_trajectory": self.per_trajectory,
        }


def grpo_loss(group: GroupRollout, cfg: GrpoConfig = GrpoConfig()) -> GrpoResult:
    """Negated mean over surviving supervised tokens of
    ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) - kl_beta * KL``.

    The trajectory advantage is broadcast to each of its tokens and tokens
    from all kept trajectories are pooled. ``clip_fraction`` counts tokens
    where the clipped branch is strictly smaller than the unclipped one.
    """
    adv = group_advantages(group.rewards, cfg)
    kept = [not (cfg.filter_zero_advantage and a == 0.0) for a in adv]

    terms: list[np.ndarray] = []
    kls: list[np.ndarray] = []
    clipped = 0
    per: list[dict[str, float]] = []
    for i, a in enumerate(adv):
        new = np.asarray(group.token_logprobs_new[i], dtype=np.float64)
        old = np.asarray(group.token_logprobs_old[i], dtype=np.float64)
        ref = np.asarray(group.token_logprobs_ref[i], dtype=np.float64)
        mask = np.asarray(group.supervision_mask[i], dtype=bool)
        rho = np.exp(new - old)[mask]
        objective = clipped_objective(rho, a, cfg.epsilon)
        kl = kl_estimate(new, ref)[mask]
        term = objective - cfg.kl_beta * kl
        per.append(
            {
                "advantage": a,
                "kept": float(kept[i]),
                "n_tokens": int(mask.sum()),
                "mean_ratio": float(rho.mean()) if rho.size else 0.0,
                "mean_kl": float(kl.mean()) if kl.size else 0.0,
                "mean_term": float(term.mean()) if term.size else 0.0,
            }
        )
        if kept[i]:
            terms.append(term)
            kls.append(kl)
            clipped += int(np.count_nonzero(objective < rho * a))

    pooled = np.concatenate(terms) if terms else np.empty(0)
    if pooled.size == 0:
        return GrpoResult(0.0, adv, kept, 0, 0.0, 0.0, empty_after_filter=True, per_trajectory=per)
    pooled_kl = np.concatenate(kls)
    return GrpoResult(
        loss=float(-pooled.mean()),
        advantages=adv,
        kept=kept,
        n_tokens=int(pooled.size),
        clip_fraction=clipped / pooled.size,
        mean_kl=float(pooled_kl.mean()),
        per_trajectory=per,
    )


def sft_loss(token_logprobs: Sequence[float], supervision_mask: Sequence[bool]) -> tuple[float, int]:
    """Negative sum of supervised-token log-probabilities and the supervised token count."""
    lp = _vector(token_logprobs, "token_logprobs")
    mask = np.asarray(supervision_mask, dtype=bool)
    if mask.shape != lp.shape:
        raise ShapeMismatch(f"lengths differ: {lp.size} vs {mask.size}")
    selected = lp[mask]
    total = math.fsum(selected.tolist())
    return 0.0 - total, int(selected.size)
