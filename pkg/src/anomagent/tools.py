"""Tool invocation with interchangeable simulated and remote HTTP backends."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol

import requests

from . import prompts
from .protocol import (
    IMAGE_ARGUMENTS,
    SchemaViolation,
    ToolName,
    ToolReturn,
    Trajectory,
    validate_arguments,
    validate_observation,
)

log = logging.getLogger(__name__)


class ToolError(RuntimeError):
    pass


class BackendUnavailable(ToolError):
    pass


class BadResponse(ToolError):
    pass


class DanglingImage(ToolError):
    pass


def merge_scores(location_score: int, quality_score: int) -> float:
    """Two 0-5 judge scores merged to one scalar in [0, 1]."""
    return (location_score + quality_score) / 10


@dataclass(frozen=True)
class QualityVerdict:
    location_score: int
    quality_score: int
    review: str = ""
    score: float | None = None

    def __post_init__(self) -> None:
        for name in ("location_score", "quality_score"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 0..5, got {v!r}")
        if self.score is None:
            object.__setattr__(self, "score", merge_scores(self.location_score, self.quality_score))
        elif not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")

    @classmethod
    def from_scalar(cls, score: float, review: str = "") -> "QualityVerdict":
        """Verdict whose merged score is exactly ``score``; components are the nearest split."""
        total = round(float(score) * 10)
        loc = total // 2
        return cls(loc, total - loc, review, float(score))

    @classmethod
    def from_content(cls, content: dict[str, Any]) -> "QualityVerdict":
        return cls(
            content["location_score"],
            content["quality_score"],
            content.get("review", ""),
            content.get("score"),
        )

    def to_content(self) -> dict[str, Any]:
        return {
            "location_score": self.location_score,
            "quality_score": self.quality_score,
            "review": self.review,
            "score": self.score,
        }


DEFAULT_PG_TEMPLATE = (
    "Using the provided image, change only the most plausible local region of the "
    "{item_name} to introduce a small, realistic {anomaly_type}. Keep the rest of the "
    "image, including background, lighting, and global geometry, completely unchanged."
)

DEFAULT_KR_TEMPLATE = (
    "A {anomaly_type} on a {item_name} is a small, localized defect that follows the "
    "material structure; it shows a sharp boundary, matching surface texture and "
    "moderate contrast against the surrounding area."
)


@dataclass
class SimScript:
    """Scripted responses for the simulated backend.

    QE verdicts are consumed in call order; once exhausted the last one
    repeats. ``qe_jitter`` > 0 perturbs each verdict's two component scores
    by a seeded integer offset in ``[-qe_jitter, qe_jitter]``.
    """

    qe_score_sequence: list[QualityVerdict] = field(
        default_factory=lambda: [QualityVerdict(4, 5, "Plausible location and texture.")]
    )
    pg_prompt_template: str = DEFAULT_PG_TEMPLATE
    kr_knowledge_table: dict[tuple[str, str], str] = field(default_factory=dict)
    qe_jitter: int = 0

    def __post_init__(self) -> None:
        if not self.qe_score_sequence:
            raise ValueError("qe_score_sequence must not be empty")
        if self.qe_jitter < 0:
            raise ValueError("qe_jitter must be >= 0")

    def verdict(self, ordinal: int) -> QualityVerdict:
        return self.qe_score_sequence[min(ordinal, len(self.qe_score_sequence) - 1)]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimScript":
        verdicts = []
        for v in d.get("qe_score_sequence", [0.9]):
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                verdicts.append(QualityVerdict.from_scalar(v, _default_review(v)))
            else:
                verdicts.append(QualityVerdict.from_content(v))
        table = {}
        for row in d.get("kr_knowledge_table", []):
            table[(row["item_name"], row["anomaly_type"])] = row["knowledge"]
        return cls(
            qe_score_sequence=verdicts,
            pg_prompt_template=d.get("pg_prompt_template", DEFAULT_PG_TEMPLATE),
            kr_knowledge_table=table,
            qe_jitter=int(d.get("qe_jitter", 0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "qe_score_sequence": [v.to_content() for v in self.qe_score_sequence],
            "pg_prompt_template": self.pg_prompt_template,
            "kr_knowledge_table": [
                {"item_name": i, "anomaly_type": a, "knowledge": k}
                for (i, a), k in sorted(self.kr_knowledge_table.items())
            ],
            "qe_jitter": self.qe_jitter,
        }


def _default_review(score: float) -> str:
    if score >= 0.8:
        return "The defect sits on a plausible part of the object and blends with the material."
    if score >= 0.5:
        return "Location is plausible but the defect texture looks slightly artificial; refine scale and contrast."
    return "The defect looks pasted on and its location is implausible; describe the material interaction more precisely."


class BackendKind(str, enum.Enum):
    REMOTE = "remote"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    endpoint: str | None = None
    api_key: str | None = None
    seed: int | None = None
    script: SimScript | None = None
    chat_model: str = "gemini-3.1-pro"
    image_model: str = "gemini-3.1-flash-image-preview"
    mask_model: str = "metauas"
    timeout: float = 120.0
    attempts: int = 3
    backoff: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.kind is BackendKind.REMOTE and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.kind is BackendKind.SIMULATED:
            if self.seed is None:
                raise ValueError("simulated backend requires a seed")
            if not -(2**63) <= self.seed < 2**64:
                raise ValueError("seed must fit in 64 bits")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")

    @classmethod
    def simulated(cls, seed: int = 0, script: SimScript | None = None) -> "BackendConfig":
        return cls(BackendKind.SIMULATED, seed=seed, script=script or SimScript())

    @classmethod
    def remote(cls, endpoint: str, api_key: str | None = None, **kwargs: Any) -> "BackendConfig":
        return cls(BackendKind.REMOTE, endpoint=endpoint, api_key=api_key, **kwargs)

    def with_seed(self, seed: int) -> "BackendConfig":
        return replace(self, seed=seed)

    def with_script(self, script: SimScript) -> "BackendConfig":
        return replace(self, script=script)


@dataclass(frozen=True)
class ToolObservation:
    tool: ToolName
    content: dict[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", ToolName.parse(self.tool))
        try:
            validate_observation(self.tool, self.content)
        except SchemaViolation as exc:
            raise BadResponse(str(exc)) from None

    def to_segment(self) -> ToolReturn:
        return ToolReturn(self.tool, self.content)

    @property
    def verdict(self) -> QualityVerdict:
        return QualityVerdict.from_content(self.content)


class ToolBackend(Protocol):
    def invoke(self, tool: ToolName, args: dict[str, Any], ctx: Trajectory) -> ToolObservation: ...

    def reverse_normalize(self, anomaly_image: str, item_name: str, anomaly_type: str) -> str: ...


def _digest(*parts: Any) -> str:
    h = hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode())
    return h.hexdigest()[:10]


def _count_returns(ctx: Trajectory, tool: ToolName) -> int:
    return sum(1 for r in ctx.tool_returns if r.tool is tool)


class SimulatedBackend:
    """Deterministic backend: each observation depends only on the seed, the
    script, the per-trajectory call ordinal (read from ``ctx``) and the args.
    """

    def __init__(self, seed: int, script: SimScript | None = None):
        self.seed = seed
        self.script = script or SimScript()

    def invoke(self, tool: ToolName, args: dict[str, Any], ctx: Trajectory) -> ToolObservation:
        handler = {
            ToolName.PG: self._prompt_gen,
            ToolName.IG: self._image_gen,
            ToolName.QE: self._quality_eval,
            ToolName.KR: self._knowledge,
            ToolName.MG: self._mask_gen,
        }[tool]
        return ToolObservation(tool, handler(args, ctx))

    def _prompt_gen(self, args: dict[str, Any], ctx: Trajectory) -> dict[str, Any]:
        text = self.script.pg_prompt_template.format(
            item_name=args["item_name"], anomaly_type=args["anomaly_type"]
        )
        return {"prompt": text}

    def _image_gen(self, args: dict[str, Any], ctx: Trajectory) -> dict[str, Any]:
        new_index = len(ctx.images) + 1
        ref = f"sim-ig-{new_index}-{_digest(ctx.images[args['target_image']], args['prompt'])}"
        return {"new_image_index": new_index, "image": ref}

    def _quality_eval(self, args: dict[str, Any], ctx: Trajectory) -> dict[str, Any]:
        ordinal = _count_returns(ctx, ToolName.QE)
        verdict = self.script.verdict(ordinal)
        j = self.script.qe_jitter
        if j:
            rng = random.Random(f"qe:{self.seed}:{ordinal}")
            loc = min(5, max(0, verdict.location_score + rng.randint(-j, j)))
            qual = min(5, max(0, verdict.quality_score + rng.randint(-j, j)))
            verdict = QualityVerdict(loc, qual, verdict.review)
        return verdict.to_content()

    def _knowledge(self, args: dict[str, Any], ctx: Trajectory) -> dict[str, Any]:
        key = (args["item_name"], args["anomaly_type"])
        text = self.script.kr_knowledge_table.get(key)
        if text is None:
            text = DEFAULT_KR_TEMPLATE.format(item_name=key[0], anomaly_type=key[1])
        return {"knowledge": text}

    def _mask_gen(self, args: dict[str, Any], ctx: Trajectory) -> dict[str, Any]:
        return {"mask_reference": f"mask_of_{ctx.images[args['anomaly_image']]}"}

    def reverse_normalize(self, anomaly_image: str, item_name: str = "", anomaly_type: str = "") -> str:
        return f"normal_of_{anomaly_image}"


def _extract_json_object(text: str) -> dict[str, Any]:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise BadResponse(f"no JSON object in model output: {text[:80]!r}")
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise BadResponse(f"model output is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise BadResponse("model output is not a JSON object")
    return obj


def _image_part(ref: str) -> dict[str, Any]:
    return {"type": "image_url", "image_url": {"url": ref}}


class HttpClient:
    """JSON-over-HTTP POST with bounded retry and exponential backoff."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        attempts: int = 3,
        backoff: float = 1.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.session = session or requests.Session()
        self.sleep = sleep

    def post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/{path.lstrip('/')}"
        last: str = ""
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("POST %s failed (attempt %d/%d): %s", url, attempt + 1, self.attempts, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("POST %s returned %s (attempt %d/%d)", url, resp.status_code, attempt + 1, self.attempts)
                continue
            if resp.status_code >= 400:
                raise BadResponse(f"POST {url} returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError:
                raise BadResponse(f"POST {url} returned a non-JSON body") from None
            if not isinstance(body, dict):
                raise BadResponse(f"POST {url} returned a non-object body")
            return body
        raise BackendUnavailable(f"POST {url} failed after {self.attempts} attempts ({last})")

    def chat(self, model: str, system: str, user: list[dict[str, Any]]) -> str:
        body = self.post(
            "chat/completions",
            {
                "model": model,
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ],
                "temperature": 0.0,
            },
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BadResponse("chat response lacks choices[0].message.content") from None
        if not isinstance(content, str) or not content.strip():
            raise BadResponse("chat response content is empty")
        return content

    def edit_image(self, model: str, images: list[str], prompt: str) -> str:
        body = self.post(
            "images/edits",
            {"model": model, "image": images, "prompt": prompt, "response_format": "url"},
        )
        try:
            item = body["data"][0]
        except (KeyError, IndexError, TypeError):
            raise BadResponse("image response lacks data[0]") from None
        ref = item.get("url") if isinstance(item, dict) else None
        if not isinstance(ref, str) or not ref:
            raise BadResponse("image response carries no image url")
        return ref


class RemoteBackend:
    """Maps tools onto chat-completions (PG, QE, KR) and image-edit (IG, MG) requests."""

    def __init__(self, cfg: BackendConfig, session: requests.Session | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.http = HttpClient(
            cfg.endpoint or "",
            cfg.api_key,
            timeout=cfg.timeout,
            attempts=cfg.attempts,
            backoff=cfg.backoff,
            session=session,
            sleep=sleep,
        )

    def invoke(self, tool: ToolName, args: dict[str, Any], ctx: Trajectory) -> ToolObservation:
        task = ctx.task
        if tool is ToolName.PG:
            system = prompts.PROMPT_GEN_PROMPT.format(
                item_name=args["item_name"], anomaly_type=args["anomaly_type"]
            )
            text = self.http.chat(
                self.cfg.chat_model, system,
                [_image_part(ctx.images[args["image"]]),
                 {"type": "text", "text": "Generate the image editing prompt."}],
            )
            return ToolObservation(tool, {"prompt": text.strip()})
        if tool is ToolName.IG:
            ref = self.http.edit_image(
                self.cfg.image_model, [ctx.images[args["target_image"]]], args["prompt"]
            )
            return ToolObservation(tool, {"new_image_index": len(ctx.images) + 1, "image": ref})
        if tool is ToolName.QE:
            system = prompts.QUALITY_EVAL_PROMPT.format(
                item_name=args["item_name"], anomaly_type=args["anomaly_type"]
            )
            text = self.http.chat(
                self.cfg.chat_model, system,
                [_image_part(ctx.images[1]), _image_part(ctx.images[args["anomaly_image"]]),
                 {"type": "text", "text": "Evaluate the anomaly image."}],
            )
            obj = _extract_json_object(text)
            try:
                verdict = QualityVerdict(
                    obj["location_score"], obj["quality_score"], str(obj.get("review", ""))
                )
            except (KeyError, ValueError) as exc:
                raise BadResponse(f"bad quality verdict: {exc}") from None
            return ToolObservation(tool, verdict.to_content())
        if tool is ToolName.KR:
            system = prompts.KNOWLEDGE_PROMPT.format(
                item_name=args["item_name"], anomaly_type=args["anomaly_type"]
            )
            text = self.http.chat(self.cfg.chat_model, system, [{"type": "text", "text": system}])
            return ToolObservation(tool, {"knowledge": text.strip()})
        prompt = prompts.MASK_PROMPT.format(item_name=task.item_name, anomaly_type=task.anomaly_type)
        ref = self.http.edit_image(
            self.cfg.mask_model, [ctx.images[1], ctx.images[args["anomaly_image"]]], prompt
        )
        return ToolObservation(tool, {"mask_reference": ref})

    def reverse_normalize(self, anomaly_image: str, item_name: str = "", anomaly_type: str = "") -> str:
        prompt = prompts.REVERSE_PROMPT.format(
            item_name=item_name or "object", anomaly_type=anomaly_type or "anomaly"
        )
        return self.http.edit_image(self.cfg.image_model, [anomaly_image], prompt)


def make_backend(cfg: BackendConfig) -> ToolBackend:
    if cfg.kind is BackendKind.SIMULATED:
        return SimulatedBackend(cfg.seed, cfg.script)
    return RemoteBackend(cfg)


def _resolve(backend: BackendConfig | ToolBackend) -> ToolBackend:
    return make_backend(backend) if isinstance(backend, BackendConfig) else backend


def invoke(
    tool: ToolName | str,
    args: dict[str, Any],
    ctx: Trajectory,
    backend: BackendConfig | ToolBackend,
) -> ToolObservation:
    """Run one tool call against ``backend`` in the context of ``ctx``.

    Raises SchemaViolation for bad arguments, DanglingImage when an index
    argument names an unregistered image, and BackendUnavailable/BadResponse
    from the backend.
    """
    tool = ToolName.parse(tool)
    validate_arguments(tool, args)
    for arg in IMAGE_ARGUMENTS[tool]:
        if args[arg] not in ctx.images:
            raise DanglingImage(f"{tool.value}.{arg}={args[arg]} is not a registered image")
    obs = _resolve(backend).invoke(tool, args, ctx)
    if obs.tool is not tool:
        raise BadResponse(f"backend answered {obs.tool.value} for a {tool.value} call")
    checked = ToolObservation(obs.tool, obs.content)  # revalidate whatever the backend built
    if tool is ToolName.IG and checked.content["new_image_index"] != len(ctx.images) + 1:
        raise BadResponse(
            f"image_gen registered index {checked.content['new_image_index']}, "
            f"expected {len(ctx.images) + 1}"
        )
    return checked


def reverse_normalize(
    anomaly_image: str,
    backend: BackendConfig | ToolBackend,
    item_name: str = "",
    anomaly_type: str = "",
) -> str:
    """Reference to a defect-free reconstruction of ``anomaly_image``."""
    ref = _resolve(backend).reverse_normalize(anomaly_image, item_name, anomaly_type)
    if not isinstance(ref, str) or not ref:
        raise BadResponse("reverse normalization returned no image")
    return ref
