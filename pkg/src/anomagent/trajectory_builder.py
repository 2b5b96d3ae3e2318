"""SFT trajectory construction from real anomaly images.

Each build reconstructs a normal image, prepares N generation targets (the
last one is the real anomaly image) and writes a forward trajectory
PG, (IG, QE, [KR]) x N, MG, answer.
"""
from __future__ import annotations

import enum
import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .agent_loop import refine_prompt
from .protocol import (
    Answer,
    TaskSpec,
    Thinking,
    ToolCall,
    ToolName,
    ToolReturn,
    Trajectory,
    dumps_trajectory,
)
from .tools import (
    BackendConfig,
    QualityVerdict,
    ToolBackend,
    ToolError,
    invoke,
    make_backend,
    reverse_normalize,
)

log = logging.getLogger(__name__)

RANDOM = "random"


class TaxonomyClass(str, enum.Enum):
    SINGLE = "single_generation"
    DUAL = "dual_generation"
    TRIPLE = "triple_generation"


PG, IG, QE, KR, MG = ToolName.PG, ToolName.IG, ToolName.QE, ToolName.KR, ToolName.MG

TAXONOMY_PATTERNS: dict[TaxonomyClass, tuple[tuple[ToolName, ...], ...]] = {
    TaxonomyClass.SINGLE: ((PG, IG, QE, MG),),
    TaxonomyClass.DUAL: ((PG, IG, QE, IG, QE, MG), (PG, IG, QE, KR, IG, QE, MG)),
    TaxonomyClass.TRIPLE: ((PG, IG, QE, KR, IG, QE, IG, QE, MG),),
}

def classify(actions: Sequence[ToolName]) -> TaxonomyClass | None:
    """Taxonomy class whose pattern equals ``actions`` exactly, else None."""
    actions = tuple(actions)
    for cls, patterns in TAXONOMY_PATTERNS.items():
        if actions in patterns:
            return cls
    return None


# QE scores (as 0-5 component pairs) synthesized for built trajectories, by N and
# KR use. They rise to an accepted final score, and intermediate scores sit on
# the side of the KR trigger that matches the KR decision.
_VERDICTS: dict[tuple[int, bool], list[tuple[int, int]]] = {
    (1, False): [(4, 5)],
    (2, False): [(3, 3), (4, 5)],
    (2, True): [(2, 2), (4, 5)],
    (3, True): [(2, 2), (3, 3), (4, 5)],
}

_REVIEWS = {
    0: "The {a} is barely visible and sits on an implausible part of the {i}; strengthen its shape and place it where it would occur in production.",
    1: "The {a} location on the {i} is plausible but its texture looks overlaid; match the material and tone down the contrast.",
    2: "The {a} is realistic, well localized on the {i} and blends with the surrounding material.",
}

SIMPLE_PROMPT = (
    "Using the provided image, change only a small area of the {item_name} to add a {anomaly_type}. "
    "Keep the rest of the image unchanged."
)
COMPLEX_PROMPT = (
    "Using the provided image, change only the most plausible local region of the {item_name} to "
    "introduce a subtle {anomaly_type} that follows the material texture, with a limited spatial "
    "extent and natural contrast. Keep the rest of the image, including background, lighting, and "
    "global geometry, completely unchanged."
)


@dataclass(frozen=True)
class BuildSpec:
    anomaly_image: str
    item_name: str
    anomaly_type: str
    n: int | str = RANDOM
    kr_ratio: float = 0.5
    seed: int = 0
    n_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.n != RANDOM and self.n not in (1, 2, 3):
            raise ValueError(f"n must be 1, 2, 3 or {RANDOM!r}, got {self.n!r}")
        if not 0.0 <= self.kr_ratio <= 1.0:
            raise ValueError("kr_ratio must lie in [0, 1]")
        if len(self.n_weights) != 3 or min(self.n_weights) < 0 or sum(self.n_weights) <= 0:
            raise ValueError("n_weights needs three non-negative weights with a positive sum")

    @classmethod
    def from_dict(cls, d: dict[str, Any], default_seed: int | None = None) -> "BuildSpec":
        d = dict(d)
        if "seed" not in d and default_seed is not None:
            d["seed"] = default_seed
        if "n_weights" in d:
            d["n_weights"] = tuple(d["n_weights"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["n_weights"] = list(self.n_weights)
        return d

    def draws(self) -> tuple[int, float]:
        """(N, KR draw) from this spec's seed."""
        rng = random.Random(self.seed)
        n = rng.choices((1, 2, 3), weights=self.n_weights)[0] if self.n == RANDOM else int(self.n)
        return n, rng.random()


def need_kr(n: int, t: int, kr_draw: float, kr_ratio: float) -> bool:
    """Whether step ``t`` of an ``n``-generation trajectory is followed by knowledge retrieval."""
    if not 1 <= t <= n:
        raise ValueError(f"step {t} outside 1..{n}")
    if n == 1 or t == n:
        return False
    if n == 3:
        return t == 1
    return t == 1 and kr_draw < kr_ratio


def _verdict(n: int, uses_kr: bool, t: int, item: str, anomaly: str) -> QualityVerdict:
    loc, qual = _VERDICTS[(n, uses_kr)][t - 1]
    score = loc + qual
    tier = 2 if score >= 8 else 1 if score >= 5 else 0
    return QualityVerdict(loc, qual, _REVIEWS[tier].format(a=anomaly, i=item))


def build_trajectory(spec: BuildSpec, backend: BackendConfig | ToolBackend) -> Trajectory:
    """Construct one SFT trajectory for ``spec``; backend errors propagate."""
    impl = make_backend(backend) if isinstance(backend, BackendConfig) else backend
    item, anomaly = spec.item_name, spec.anomaly_type
    n, kr_draw = spec.draws()
    uses_kr = any(need_kr(n, t, kr_draw, spec.kr_ratio) for t in range(1, n + 1))

    normal = reverse_normalize(spec.anomaly_image, impl, item, anomaly)
    t = Trajectory.start(TaskSpec(item, anomaly, normal))

    # Generation targets: intermediates come from the editor, the last is the real image.
    targets: list[str] = []
    scratch = Trajectory.start(t.task)
    for template in (SIMPLE_PROMPT, COMPLEX_PROMPT)[: n - 1]:
        prompt = template.format(item_name=item, anomaly_type=anomaly)
        obs = invoke(IG, {"prompt": prompt, "target_image": 1}, scratch, impl)
        targets.append(obs.content["image"])
    targets.append(spec.anomaly_image)

    def call(thinking: str, tool: ToolName, args: dict[str, Any], content: dict[str, Any] | None = None) -> dict[str, Any]:
        t.segments += [Thinking(thinking), ToolCall(tool, args)]
        if content is None:
            content = invoke(tool, args, t, impl).content
        t.segments.append(ToolReturn(tool, content))
        return content

    prompt = call(
        f"I will synthesize a {anomaly} on the {item}. First I need a precise local editing prompt, "
        "so I call prompt_gen on the original image.",
        PG, {"image": 1, "item_name": item, "anomaly_type": anomaly},
    )["prompt"]

    review = knowledge = ""
    for step in range(1, n + 1):
        if step == 1:
            why = "The prompt is ready; edit the original image with it."
        elif knowledge:
            why = f"Attempt {step - 1} fell short. I refine the prompt with the review and the retrieved knowledge and edit again."
        else:
            why = f"Attempt {step - 1} fell short. I refine the prompt with the review and edit again."
        if step > 1:
            prompt = refine_prompt(prompt, review, knowledge or None)
        index = len(t.images) + 1
        call(why, IG, {"prompt": prompt, "target_image": 1},
             {"new_image_index": index, "image": targets[step - 1]})
        t.images[index] = targets[step - 1]

        verdict = _verdict(n, uses_kr, step, item, anomaly)
        call(
            f"Image {index} is generated; I evaluate its location and realism.",
            QE, {"anomaly_image": index, "item_name": item, "anomaly_type": anomaly},
            verdict.to_content(),
        )
        review, knowledge = verdict.review, ""

        if need_kr(n, step, kr_draw, spec.kr_ratio):
            knowledge = call(
                f"The score {verdict.score:.2f} is low, so I retrieve expert knowledge about a {anomaly} on a {item}.",
                KR, {"item_name": item, "anomaly_type": anomaly},
            )["knowledge"]

    final = len(t.images)
    scores = ", ".join(f"{r.content['score']:.2f}" for r in t.tool_returns if r.tool is QE)
    call(
        f"The score {verdict.score:.2f} is acceptable; I generate the mask for image {final}.",
        MG, {"anomaly_image": final},
    )
    t.segments += [
        Thinking(
            f"After {n} generation(s) the {anomaly} on the {item} passed quality evaluation "
            f"and its mask is ready."
        ),
        Answer(
            status="success",
            final_image_index=final,
            mask_generated=True,
            synthesis_logic=(
                f"Generated a {anomaly} on the {item} in {n} image generation(s)"
                + (" with knowledge retrieval" if uses_kr else "")
                + f"; quality scores {scores}."
            ),
        ),
    ]
    return t


def sft_target_mask(t: Trajectory) -> list[bool]:
    """Per-segment supervision flags: assistant segments True, tool returns False."""
    return [not isinstance(s, ToolReturn) for s in t.segments]


def expand_mask(segment_flags: Sequence[bool], token_counts: Sequence[int]) -> list[bool]:
    """Broadcast per-segment flags to per-token flags given each segment's token count."""
    if len(segment_flags) != len(token_counts):
        raise ValueError("one token count per segment is required")
    return [flag for flag, k in zip(segment_flags, token_counts) for _ in range(k)]


@dataclass
class DatasetStats:
    total: int = 0
    failed: int = 0
    per_class: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in TaxonomyClass})
    with_kr: int = 0
    dual_total: int = 0
    dual_with_kr: int = 0
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def kr_rate(self) -> float:
        return self.with_kr / self.total if self.total else 0.0

    @property
    def dual_kr_rate(self) -> float:
        return self.dual_with_kr / self.dual_total if self.dual_total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "failed": self.failed,
            "per_class": dict(self.per_class),
            "with_kr": self.with_kr,
            "kr_rate": self.kr_rate,
            "dual_total": self.dual_total,
            "dual_with_kr": self.dual_with_kr,
            "dual_kr_rate": self.dual_kr_rate,
            "failures": list(self.failures),
        }


def build_dataset(
    specs: Iterable[BuildSpec],
    backend: BackendConfig | ToolBackend,
    out: str | Path,
    jobs: int = 1,
) -> DatasetStats:
    """Build every spec and write the trajectories as JSONL in spec order."""
    specs = list(specs)

    def one(spec: BuildSpec) -> Trajectory | Exception:
        try:
            return build_trajectory(spec, backend)
        except ToolError as exc:
            return exc

    if jobs <= 1:
        results = [one(s) for s in specs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, specs))

    stats = DatasetStats()
    with open(out, "w", encoding="utf-8") as fh:
        for i, (spec, res) in enumerate(zip(specs, results)):
            if isinstance(res, Exception):
                stats.failed += 1
                stats.failures.append({"index": i, "anomaly_image": spec.anomaly_image,
                                       "error": f"{type(res).__name__}: {res}"})
                log.warning("spec %d failed: %s", i, res)
                continue
            fh.write(dumps_trajectory(res) + "\n")
            actions = res.action_sequence()
            cls = classify(actions)
            stats.total += 1
            stats.per_class[cls.value] += 1
            has_kr = KR in actions
            stats.with_kr += has_kr
            if cls is TaxonomyClass.DUAL:
                stats.dual_total += 1
                stats.dual_with_kr += has_kr
    return stats


def load_specs(path: str | Path, base_seed: int | None = None) -> list[BuildSpec]:
    """Read BuildSpec JSONL; rows without a seed get ``base_seed ^ row_index``."""
    specs = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(l for l in fh if l.strip()):
            seed = None if base_seed is None else base_seed ^ i
            specs.append(BuildSpec.from_dict(json.loads(line), default_seed=seed))
    return specs


def taxonomy_counts(trajectories: Iterable[Trajectory]) -> Counter:
    return Counter(classify(t.action_sequence()) for t in trajectories)
