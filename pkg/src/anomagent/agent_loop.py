"""Thought-action-observation environment for the synthesis agent."""
from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Union

import requests

from . import prompts
from .protocol import (
    Answer,
    ProtocolError,
    Segment,
    TaskSpec,
    Thinking,
    ToolCall,
    ToolName,
    ToolReturn,
    Trajectory,
    dump_json,
    parse_transcript,
    serialize_segments,
    trajectory_from_dict,
    trajectory_to_dict,
)
from .tools import (
    BackendConfig,
    BackendKind,
    BadResponse,
    HttpClient,
    ToolBackend,
    ToolError,
    ToolObservation,
    invoke,
    make_backend,
)

log = logging.getLogger(__name__)


class PolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    theta: float = 0.8
    max_generations: int = 3
    t_max: int = 12
    kr_trigger: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.kr_trigger <= self.theta <= 1.0:
            raise ValueError("need 0 <= kr_trigger <= theta <= 1")
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass(frozen=True)
class PolicyTurn:
    thinking: str
    action: Union[ToolCall, Answer]

    def __post_init__(self) -> None:
        if not isinstance(self.action, (ToolCall, Answer)):
            raise TypeError("action must be a ToolCall or an Answer")

    def segments(self) -> list[Segment]:
        return [Thinking(self.thinking), self.action]


Policy = Callable[[Trajectory, LoopConfig], Union[PolicyTurn, str]]


class Termination(str, enum.Enum):
    ANSWER = "answer"
    TURN_BUDGET = "turn_budget"
    ERROR = "error"


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    final_score: float
    qe_scores: list[float]
    action_sequence: list[ToolName]
    terminated_by: Termination
    error: str | None = None

    @property
    def turns(self) -> int:
        """Policy turns taken: one per action plus the answering turn."""
        return len(self.action_sequence) + (self.terminated_by is Termination.ANSWER)

    @classmethod
    def from_trajectory(
        cls, t: Trajectory, terminated_by: Termination | None = None, error: str | None = None
    ) -> "EpisodeResult":
        if terminated_by is None:
            terminated_by = Termination.ANSWER if t.answer is not None else Termination.ERROR
        scores = t.qe_scores()
        return cls(
            trajectory=t,
            final_score=scores[-1] if scores else 0.0,
            qe_scores=scores,
            action_sequence=t.action_sequence(),
            terminated_by=terminated_by,
            error=error,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory": trajectory_to_dict(self.trajectory),
            "final_score": self.final_score,
            "qe_scores": list(self.qe_scores),
            "action_sequence": [a.value for a in self.action_sequence],
            "terminated_by": self.terminated_by.value,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EpisodeResult":
        return cls(
            trajectory=trajectory_from_dict(d["trajectory"]),
            final_score=float(d["final_score"]),
            qe_scores=[float(s) for s in d["qe_scores"]],
            action_sequence=[ToolName.parse(a) for a in d["action_sequence"]],
            terminated_by=Termination(d["terminated_by"]),
            error=d.get("error"),
        )


def parse_policy_output(text: str) -> PolicyTurn:
    """One assistant turn: a thinking block then a tool call or an answer."""
    try:
        segs = parse_transcript(text)
    except ProtocolError as exc:
        raise PolicyError(f"{type(exc).__name__}: {exc}") from None
    if len(segs) != 2 or not isinstance(segs[0], Thinking) or not isinstance(segs[1], (ToolCall, Answer)):
        kinds = [s.kind for s in segs]
        raise PolicyError(f"expected thinking followed by one action, got {kinds}")
    return PolicyTurn(segs[0].text, segs[1])


def run_episode(
    task: TaskSpec,
    policy: Policy,
    backend: BackendConfig | ToolBackend,
    cfg: LoopConfig = LoopConfig(),
) -> EpisodeResult:
    """Alternate policy turns and tool executions until an answer or the turn budget.

    Every valid tool call is executed as issued; a policy or backend failure
    ends the episode with ``Termination.ERROR`` and keeps the partial trajectory.
    """
    impl = make_backend(backend) if isinstance(backend, BackendConfig) else backend
    t = Trajectory.start(task)
    for _ in range(cfg.t_max):
        try:
            out = policy(t.copy(), cfg)
            turn = parse_policy_output(out) if isinstance(out, str) else out
            if not isinstance(turn, PolicyTurn):
                raise PolicyError(f"policy returned {type(turn).__name__}")
            thinking = Thinking(turn.thinking)
        except Exception as exc:  # any policy failure is recorded, not raised
            log.info("policy error: %s", exc)
            return EpisodeResult.from_trajectory(t, Termination.ERROR, f"PolicyError: {exc}")
        t.segments += [thinking, turn.action]
        if isinstance(turn.action, Answer):
            return EpisodeResult.from_trajectory(t, Termination.ANSWER)
        try:
            obs = invoke(turn.action.name, turn.action.arguments, t, impl)
        except (ToolError, ProtocolError) as exc:
            log.info("tool error: %s", exc)
            return EpisodeResult.from_trajectory(t, Termination.ERROR, f"{type(exc).__name__}: {exc}")
        t.segments.append(obs.to_segment())
        if obs.tool is ToolName.IG:
            t.images[obs.content["new_image_index"]] = obs.content["image"]
    return EpisodeResult.from_trajectory(t, Termination.TURN_BUDGET)


# --------------------------------------------------------------------------
# Scripted reference policy


def refine_prompt(prompt: str, review: str, knowledge: str | None = None) -> str:
    """Append judge feedback (and retrieved knowledge, if any) to the prior prompt."""
    refined = f"{prompt} Address this review: {review}".strip()
    if knowledge:
        refined += f" Expert knowledge: {knowledge}"
    return refined


def _last(segments: list[Segment], kind: type, tool: ToolName | None = None) -> Any:
    for seg in reversed(segments):
        if isinstance(seg, kind) and (tool is None or getattr(seg, "name", getattr(seg, "tool", None)) is tool):
            return seg
    return None


def scripted_policy(transcript: Trajectory, cfg: LoopConfig) -> PolicyTurn:
    """Deterministic policy following the PG, IG, QE, (KR), ..., MG, answer loop."""
    task = transcript.task
    segs = transcript.segments
    item, anomaly = task.item_name, task.anomaly_type
    latest = max(transcript.images)

    if not segs:
        return PolicyTurn(
            f"Before editing I need a local editing prompt for a {anomaly} on the {item}, "
            "so I start with prompt_gen on the original image.",
            ToolCall(ToolName.PG, {"image": 1, "item_name": item, "anomaly_type": anomaly}),
        )
    last = segs[-1]
    if not isinstance(last, ToolReturn):
        raise PolicyError(f"transcript ends with {last.kind}, expected a tool return")

    generations = sum(1 for c in transcript.tool_calls if c.name is ToolName.IG)
    if last.tool is ToolName.PG:
        return PolicyTurn(
            "The initial prompt is ready; edit the original image with it.",
            ToolCall(ToolName.IG, {"prompt": last.content["prompt"], "target_image": 1}),
        )
    if last.tool is ToolName.IG:
        idx = last.content["new_image_index"]
        return PolicyTurn(
            f"Image {idx} is generated; check its location and realism.",
            ToolCall(ToolName.QE, {"anomaly_image": idx, "item_name": item, "anomaly_type": anomaly}),
        )
    if last.tool is ToolName.QE:
        score = float(last.content["score"])
        if score >= cfg.theta or generations >= cfg.max_generations:
            why = (
                f"Score {score:.2f} meets the threshold {cfg.theta:.2f}"
                if score >= cfg.theta
                else f"Score {score:.2f} is below {cfg.theta:.2f} but all {cfg.max_generations} generations are spent"
            )
            return PolicyTurn(
                f"{why}; generate the mask for image {latest}.",
                ToolCall(ToolName.MG, {"anomaly_image": latest}),
            )
        last_ig = max(i for i, s in enumerate(segs) if isinstance(s, ToolCall) and s.name is ToolName.IG)
        kr_used = any(isinstance(s, ToolCall) and s.name is ToolName.KR for s in segs[last_ig:])
        if score < cfg.kr_trigger and not kr_used:
            return PolicyTurn(
                f"Score {score:.2f} is below {cfg.kr_trigger:.2f}; retrieve expert knowledge about "
                f"a {anomaly} on a {item} before refining.",
                ToolCall(ToolName.KR, {"item_name": item, "anomaly_type": anomaly}),
            )
        prior = _last(segs, ToolCall, ToolName.IG).arguments["prompt"]
        return PolicyTurn(
            f"Score {score:.2f} is below {cfg.theta:.2f}; refine the prompt with the review and regenerate.",
            ToolCall(ToolName.IG, {"prompt": refine_prompt(prior, last.content["review"]), "target_image": 1}),
        )
    if last.tool is ToolName.KR:
        prior = _last(segs, ToolCall, ToolName.IG).arguments["prompt"]
        review = _last(segs, ToolReturn, ToolName.QE).content["review"]
        return PolicyTurn(
            "Refine the prompt with the review and the retrieved knowledge, then regenerate.",
            ToolCall(
                ToolName.IG,
                {"prompt": refine_prompt(prior, review, last.content["knowledge"]), "target_image": 1},
            ),
        )
    # mask_gen returned: summarize and stop
    qe = _last(segs, ToolReturn, ToolName.QE)
    score = float(qe.content["score"]) if qe else 0.0
    final = _last(segs, ToolCall, ToolName.MG).arguments["anomaly_image"]
    accepted = score >= cfg.theta
    return PolicyTurn(
        f"Image {final} reached score {score:.2f} after {generations} generation(s) and its mask is ready.",
        Answer(
            status="success" if accepted else "budget_exhausted",
            final_image_index=final,
            mask_generated=True,
            synthesis_logic=(
                f"Generated a {anomaly} on the {item} in {generations} image generation(s); "
                f"final quality score {score:.2f} (threshold {cfg.theta:.2f})."
            ),
        ),
    )


# --------------------------------------------------------------------------
# Groups


def group_seeds(base_seed: int, g: int) -> list[int]:
    """Per-episode backend seeds: episode i uses ``base_seed ^ i``."""
    return [base_seed ^ i for i in range(g)]


def run_group(
    task: TaskSpec,
    policy: Policy,
    backend: BackendConfig,
    cfg: LoopConfig,
    g: int,
    *,
    seeds: list[int] | None = None,
    split_seeds: bool = True,
    jobs: int = 1,
) -> list[EpisodeResult]:
    """``g`` independent episodes, returned in episode order."""
    if g < 1:
        raise ValueError("g must be positive")
    if seeds is not None:
        if len(seeds) != g:
            raise ValueError("need one seed per episode")
        backends = [backend.with_seed(s) for s in seeds]
    elif split_seeds and backend.kind is BackendKind.SIMULATED:
        backends = [backend.with_seed(s) for s in group_seeds(backend.seed, g)]
    else:
        backends = [backend] * g

    def one(b: BackendConfig) -> EpisodeResult:
        return run_episode(task, policy, b, cfg)

    if jobs <= 1:
        return [one(b) for b in backends]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, backends))


# --------------------------------------------------------------------------
# Replay


def policy_turns(t: Trajectory) -> list[PolicyTurn]:
    turns = []
    segs = t.segments
    for i, seg in enumerate(segs[:-1]):
        if isinstance(seg, Thinking) and isinstance(segs[i + 1], (ToolCall, Answer)):
            turns.append(PolicyTurn(seg.text, segs[i + 1]))
    return turns


class ReplayPolicy:
    """Re-issues the recorded turns of a trajectory, one per call."""

    def __init__(self, t: Trajectory):
        self.turns = policy_turns(t)

    def __call__(self, transcript: Trajectory, cfg: LoopConfig) -> PolicyTurn:
        k = len(transcript.tool_calls)
        if k >= len(self.turns):
            raise PolicyError("recorded trajectory has no further turns")
        return self.turns[k]


class RecordedBackend:
    """Serves the recorded tool returns of a trajectory in order."""

    def __init__(self, t: Trajectory):
        self.returns = t.tool_returns

    def invoke(self, tool: ToolName, args: dict[str, Any], ctx: Trajectory) -> ToolObservation:
        k = len(ctx.tool_returns)
        if k >= len(self.returns):
            raise BadResponse("no recorded observation left")
        rec = self.returns[k]
        if rec.tool is not tool:
            raise BadResponse(f"recorded observation is from {rec.tool.value}, call is {tool.value}")
        return ToolObservation(rec.tool, rec.content)

    def reverse_normalize(self, anomaly_image: str, item_name: str = "", anomaly_type: str = "") -> str:
        raise BadResponse("recorded backend cannot reverse-normalize")


def replay_episode(
    t: Trajectory,
    backend: BackendConfig | ToolBackend | None = None,
    cfg: LoopConfig | None = None,
) -> EpisodeResult:
    """Re-run the recorded policy turns through the environment.

    With no backend the recorded observations are served back, so a
    consistent trajectory replays to an identical result.
    """
    if cfg is None:
        cfg = LoopConfig(t_max=max(1, len(policy_turns(t))))
    return run_episode(t.task, ReplayPolicy(t), backend or RecordedBackend(t), cfg)


# --------------------------------------------------------------------------
# Chat-endpoint policy


@dataclass
class ChatPolicy:
    """Policy backed by a remote chat-completions endpoint.

    Extra sampling parameters in ``sampling`` are forwarded untouched.
    """

    endpoint: str
    model: str
    api_key: str | None = None
    temperature: float = 1.0
    sampling: dict[str, Any] = field(default_factory=dict)
    timeout: float = 120.0
    session: requests.Session | None = None

    def __post_init__(self) -> None:
        self.http = HttpClient(self.endpoint, self.api_key, timeout=self.timeout, session=self.session)

    def messages(self, transcript: Trajectory) -> list[dict[str, Any]]:
        task = transcript.task
        msgs: list[dict[str, Any]] = [
            {"role": "system", "content": prompts.system_prompt(task.item_name, task.anomaly_type)},
            {
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": task.normal_image}},
                    {"type": "text", "text": prompts.user_prompt(task.item_name, task.anomaly_type)},
                ],
            },
        ]
        pending: list[Segment] = []
        for seg in transcript.segments:
            if isinstance(seg, ToolReturn):
                msgs.append({"role": "assistant", "content": serialize_segments(pending)})
                pending = []
                parts: list[dict[str, Any]] = [
                    {"type": "text", "text": f"[Tool Response from {seg.tool.value}]\n{dump_json(seg.content)}"}
                ]
                if seg.tool is ToolName.IG:
                    parts.append({"type": "image_url", "image_url": {"url": seg.content["image"]}})
                msgs.append({"role": "user", "content": parts})
            else:
                pending.append(seg)
        if pending:
            msgs.append({"role": "assistant", "content": serialize_segments(pending)})
        return msgs

    def __call__(self, transcript: Trajectory, cfg: LoopConfig) -> str:
        payload = {
            "model": self.model,
            "messages": self.messages(transcript),
            "temperature": self.temperature,
            **self.sampling,
        }
        body = self.http.post("chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise PolicyError("chat response lacks choices[0].message.content") from None


def dumps_episode(e: EpisodeResult, **extra: Any) -> str:
    return json.dumps({**extra, **e.to_dict()}, ensure_ascii=False)
