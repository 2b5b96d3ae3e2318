"""Trajectory data model and the tagged transcript wire format.

A transcript is a flat, non-nesting sequence of four tagged blocks::

    <thinking> free text </thinking>
    <tool_call> {"name": "image_gen", "arguments": {...}} </tool_call>
    <tool_return> {"tool": "image_gen", "content": {...}} </tool_return>
    <answer> {"status": "success", "final_image_index": 2, ...} </answer>

Whitespace between blocks is ignored, thinking text is stripped, and JSON
payloads are whitespace-insensitive.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Union

import jsonschema


class ProtocolError(ValueError):
    """Base class for transcript parse and validation failures."""


class UnclosedTag(ProtocolError):
    pass


class MalformedJson(ProtocolError):
    pass


class UnknownTool(ProtocolError):
    pass


class SchemaViolation(ProtocolError):
    pass


class UnexpectedText(ProtocolError):
    """Non-whitespace text outside any block, or a block nested in thinking."""


class ToolName(str, enum.Enum):
    PG = "prompt_gen"
    IG = "image_gen"
    QE = "quality_eval"
    KR = "knowledge_retrieval"
    MG = "mask_gen"

    @classmethod
    def parse(cls, value: Any) -> "ToolName":
        if isinstance(value, ToolName):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownTool(f"unknown tool {value!r}") from None

    @property
    def short(self) -> str:
        return self.name


_INDEX = {"type": "integer", "minimum": 1}
_TEXT = {"type": "string"}


def _object(properties: dict[str, Any]) -> dict[str, Any]:
    return {
        "type": "object",
        "properties": properties,
        "required": list(properties),
        "additionalProperties": False,
    }


TOOL_DESCRIPTIONS: dict[ToolName, str] = {
    ToolName.PG: (
        "Generate the initial local-editing prompt for the image editor from the object "
        "and anomaly type. Call exactly once, before the first image_gen call."
    ),
    ToolName.IG: (
        "Edit the original image with a local editing prompt and register the result as "
        "the next image index."
    ),
    ToolName.QE: (
        "Judge a synthesized image. Returns location_score and quality_score (0-5), a "
        "merged score in [0, 1] and a textual review."
    ),
    ToolName.KR: (
        "Retrieve expert physical descriptions of the defect. Use only after a low "
        "quality_eval score."
    ),
    ToolName.MG: "Generate the segmentation mask for an accepted synthesized image.",
}

TOOL_PARAMETERS: dict[ToolName, dict[str, Any]] = {
    ToolName.PG: _object({"image": _INDEX, "item_name": _TEXT, "anomaly_type": _TEXT}),
    ToolName.IG: _object({"prompt": _TEXT, "target_image": _INDEX}),
    ToolName.QE: _object({"anomaly_image": _INDEX, "item_name": _TEXT, "anomaly_type": _TEXT}),
    ToolName.KR: _object({"item_name": _TEXT, "anomaly_type": _TEXT}),
    ToolName.MG: _object({"anomaly_image": _INDEX}),
}

_SCORE = {"type": "integer", "minimum": 0, "maximum": 5}

OBSERVATION_SCHEMAS: dict[ToolName, dict[str, Any]] = {
    ToolName.PG: _object({"prompt": _TEXT}),
    ToolName.IG: _object({"new_image_index": _INDEX, "image": _TEXT}),
    ToolName.QE: _object(
        {
            "location_score": _SCORE,
            "quality_score": _SCORE,
            "review": _TEXT,
            "score": {"type": "number", "minimum": 0, "maximum": 1},
        }
    ),
    ToolName.KR: _object({"knowledge": _TEXT}),
    ToolName.MG: _object({"mask_reference": _TEXT}),
}

ANSWER_SCHEMA = _object(
    {
        "status": _TEXT,
        "final_image_index": _INDEX,
        "mask_generated": {"type": "boolean"},
        "synthesis_logic": _TEXT,
    }
)

# Image-index arguments per tool; each must name an image already registered.
IMAGE_ARGUMENTS: dict[ToolName, tuple[str, ...]] = {
    ToolName.PG: ("image",),
    ToolName.IG: ("target_image",),
    ToolName.QE: ("anomaly_image",),
    ToolName.KR: (),
    ToolName.MG: ("anomaly_image",),
}

_Validator = jsonschema.Draft202012Validator
_ARG_VALIDATORS = {name: _Validator(schema) for name, schema in TOOL_PARAMETERS.items()}
_OBS_VALIDATORS = {name: _Validator(schema) for name, schema in OBSERVATION_SCHEMAS.items()}
_ANSWER_VALIDATOR = _Validator(ANSWER_SCHEMA)


def _check(validator: jsonschema.protocols.Validator, obj: Any, what: str) -> None:
    error = jsonschema.exceptions.best_match(validator.iter_errors(obj))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise SchemaViolation(f"{what}: {where}: {error.message}")


def validate_arguments(tool: ToolName, arguments: Any) -> None:
    _check(_ARG_VALIDATORS[tool], arguments, f"{tool.value} arguments")


def validate_observation(tool: ToolName, content: Any) -> None:
    _check(_OBS_VALIDATORS[tool], content, f"{tool.value} observation")


def tool_definitions() -> list[dict[str, Any]]:
    """Function-calling definitions for the five tools, in registry order."""
    return [
        {
            "type": "function",
            "function": {
                "name": name.value,
                "description": TOOL_DESCRIPTIONS[name],
                "parameters": TOOL_PARAMETERS[name],
            },
        }
        for name in ToolName
    ]


# --------------------------------------------------------------------------
# Segments

TAGS = ("thinking", "tool_call", "tool_return", "answer")
_OPENERS = tuple(f"<{t}>" for t in TAGS)
_ALL_TAG_STRINGS = _OPENERS + tuple(f"</{t}>" for t in TAGS)


@dataclass(frozen=True)
class Thinking:
    text: str

    kind = "thinking"

    def __post_init__(self) -> None:
        if any(tag in self.text for tag in _ALL_TAG_STRINGS):
            raise UnexpectedText("thinking text contains a segment tag")
        if self.text != self.text.strip():
            object.__setattr__(self, "text", self.text.strip())


@dataclass(frozen=True)
class ToolCall:
    name: ToolName
    arguments: dict[str, Any]

    kind = "tool_call"

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", ToolName.parse(self.name))
        validate_arguments(self.name, self.arguments)


@dataclass(frozen=True)
class ToolReturn:
    tool: ToolName
    content: dict[str, Any]

    kind = "tool_return"

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", ToolName.parse(self.tool))
        validate_observation(self.tool, self.content)


@dataclass(frozen=True)
class Answer:
    status: str
    final_image_index: int
    mask_generated: bool
    synthesis_logic: str

    kind = "answer"

    def __post_init__(self) -> None:
        _check(_ANSWER_VALIDATOR, self.to_dict(), "answer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "final_image_index": self.final_image_index,
            "mask_generated": self.mask_generated,
            "synthesis_logic": self.synthesis_logic,
        }


Segment = Union[Thinking, ToolCall, ToolReturn, Answer]


@dataclass(frozen=True)
class TaskSpec:
    item_name: str
    anomaly_type: str
    normal_image: str


@dataclass
class Trajectory:
    """Transcript segments plus the 1-based image registry (index 1 = normal image)."""

    task: TaskSpec
    segments: list[Segment] = field(default_factory=list)
    images: dict[int, str] = field(default_factory=dict)

    @classmethod
    def start(cls, task: TaskSpec) -> "Trajectory":
        return cls(task=task, segments=[], images={1: task.normal_image})

    def copy(self) -> "Trajectory":
        return Trajectory(self.task, list(self.segments), dict(self.images))

    @property
    def tool_calls(self) -> list[ToolCall]:
        return [s for s in self.segments if isinstance(s, ToolCall)]

    @property
    def tool_returns(self) -> list[ToolReturn]:
        return [s for s in self.segments if isinstance(s, ToolReturn)]

    @property
    def answer(self) -> Answer | None:
        last = self.segments[-1] if self.segments else None
        return last if isinstance(last, Answer) else None

    def action_sequence(self) -> list[ToolName]:
        return [c.name for c in self.tool_calls]

    def qe_scores(self) -> list[float]:
        return [float(r.content["score"]) for r in self.tool_returns if r.tool is ToolName.QE]


# --------------------------------------------------------------------------
# Wire format


def dump_json(obj: Any) -> str:
    # "<" is escaped so payload strings can never be mistaken for tags.
    text = json.dumps(obj, ensure_ascii=False, separators=(",", ":"))
    return text.replace("<", "\\u003c")


def serialize_segment(seg: Segment) -> str:
    if isinstance(seg, Thinking):
        body = seg.text
    elif isinstance(seg, ToolCall):
        body = dump_json({"name": seg.name.value, "arguments": seg.arguments})
    elif isinstance(seg, ToolReturn):
        body = dump_json({"tool": seg.tool.value, "content": seg.content})
    elif isinstance(seg, Answer):
        body = dump_json(seg.to_dict())
    else:
        raise TypeError(f"not a segment: {seg!r}")
    return f"<{seg.kind}>{body}</{seg.kind}>"


def serialize_segments(segments: list[Segment]) -> str:
    return "\n".join(serialize_segment(s) for s in segments)


def serialize_trajectory(t: Trajectory) -> str:
    return serialize_segments(t.segments)


def _load_object(body: str, tag: str) -> dict[str, Any]:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"<{tag}> payload is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedJson(f"<{tag}> payload must be a JSON object")
    return obj


def _exact_keys(obj: dict[str, Any], keys: set[str], tag: str) -> None:
    if set(obj) != keys:
        raise SchemaViolation(f"<{tag}> payload keys {sorted(obj)} != {sorted(keys)}")


def _tool_call_from_json(obj: dict[str, Any]) -> ToolCall:
    if "name" not in obj:
        raise SchemaViolation("<tool_call> payload lacks 'name'")
    name = ToolName.parse(obj["name"])
    _exact_keys(obj, {"name", "arguments"}, "tool_call")
    return ToolCall(name, obj["arguments"])


def _tool_return_from_json(obj: dict[str, Any]) -> ToolReturn:
    if "tool" not in obj:
        raise SchemaViolation("<tool_return> payload lacks 'tool'")
    tool = ToolName.parse(obj["tool"])
    _exact_keys(obj, {"tool", "content"}, "tool_return")
    return ToolReturn(tool, obj["content"])


def _answer_from_json(obj: dict[str, Any]) -> Answer:
    _check(_ANSWER_VALIDATOR, obj, "answer")
    return Answer(**obj)


def parse_transcript(raw: str) -> list[Segment]:
    """Parse a tagged transcript into segments.

    Raises one of UnclosedTag, MalformedJson, UnknownTool, SchemaViolation or
    UnexpectedText (all ProtocolError subclasses).
    """
    segments: list[Segment] = []
    pos, n = 0, len(raw)
    while True:
        while pos < n and raw[pos].isspace():
            pos += 1
        if pos >= n:
            return segments
        tag = next((t for t in TAGS if raw.startswith(f"<{t}>", pos)), None)
        if tag is None:
            snippet = raw[pos : pos + 30]
            raise UnexpectedText(f"expected a segment tag at offset {pos}: {snippet!r}")
        start = pos + len(tag) + 2
        end = raw.find(f"</{tag}>", start)
        body = raw[start:end] if end >= 0 else raw[start:]
        if end < 0 or any(opener in body for opener in _OPENERS):
            raise UnclosedTag(f"<{tag}> opened at offset {pos} is never closed")
        if tag == "thinking":
            if any(s in body for s in _ALL_TAG_STRINGS):
                raise UnexpectedText("thinking text contains a segment tag")
            segments.append(Thinking(body.strip()))
        else:
            obj = _load_object(body, tag)
            if tag == "tool_call":
                segments.append(_tool_call_from_json(obj))
            elif tag == "tool_return":
                segments.append(_tool_return_from_json(obj))
            else:
                segments.append(_answer_from_json(obj))
        pos = end + len(tag) + 3


def trajectory_from_transcript(raw: str, task: TaskSpec) -> Trajectory:
    """Parse ``raw`` and rebuild the image registry from its image_gen returns."""
    t = Trajectory.start(task)
    t.segments = parse_transcript(raw)
    for r in t.tool_returns:
        if r.tool is ToolName.IG:
            t.images[r.content["new_image_index"]] = r.content["image"]
    return t


# --------------------------------------------------------------------------
# Structural validity


def format_violations(t: Trajectory) -> list[str]:
    """Every structural rule the trajectory breaks; empty means format-valid.

    Expected layout: ``(Thinking ToolCall ToolReturn)* Thinking Answer`` where
    each return answers the call before it, image indices are registered
    before use, each image_gen return registers exactly the next index, and
    the answer cites a registered image.
    """
    problems: list[str] = []
    segs = t.segments
    if not segs:
        return ["empty trajectory"]
    if not isinstance(segs[-1], Answer):
        problems.append("trajectory does not end with an answer")
    if 1 not in t.images:
        problems.append("image 1 (normal image) is not registered")

    known = {1}
    i = 0
    while i < len(segs):
        turn = len(problems)
        if not isinstance(segs[i], Thinking):
            problems.append(f"segment {i}: turn must open with thinking, got {segs[i].kind}")
            break
        if i + 1 >= len(segs):
            problems.append(f"segment {i}: thinking without an action")
            break
        action = segs[i + 1]
        if isinstance(action, Answer):
            if i + 2 != len(segs):
                problems.append(f"segment {i + 1}: answer is not the last segment")
            if action.final_image_index not in known or action.final_image_index not in t.images:
                problems.append(
                    f"segment {i + 1}: answer cites unknown image {action.final_image_index}"
                )
            break
        if not isinstance(action, ToolCall):
            problems.append(f"segment {i + 1}: expected tool_call or answer, got {action.kind}")
            break
        for arg in IMAGE_ARGUMENTS[action.name]:
            if action.arguments[arg] not in known:
                problems.append(
                    f"segment {i + 1}: {action.name.value}.{arg}={action.arguments[arg]} "
                    "is not a registered image"
                )
        if i + 2 >= len(segs) or not isinstance(segs[i + 2], ToolReturn):
            problems.append(f"segment {i + 1}: tool_call is not followed by its tool_return")
            break
        ret = segs[i + 2]
        if ret.tool is not action.name:
            problems.append(
                f"segment {i + 2}: return from {ret.tool.value} answers a "
                f"{action.name.value} call"
            )
        if ret.tool is ToolName.IG:
            idx = ret.content["new_image_index"]
            if idx != len(known) + 1:
                problems.append(f"segment {i + 2}: image_gen registered {idx}, expected {len(known) + 1}")
            elif t.images.get(idx) != ret.content["image"]:
                problems.append(f"segment {i + 2}: image {idx} disagrees with the registry")
            known.add(idx)
        if len(problems) > turn:
            break
        i += 3
    return problems


def check_format(t: Trajectory) -> bool:
    return not format_violations(t)


# --------------------------------------------------------------------------
# JSONL persistence


def segment_to_dict(seg: Segment) -> dict[str, Any]:
    if isinstance(seg, Thinking):
        return {"kind": "thinking", "text": seg.text}
    if isinstance(seg, ToolCall):
        return {"kind": "tool_call", "name": seg.name.value, "arguments": seg.arguments}
    if isinstance(seg, ToolReturn):
        return {"kind": "tool_return", "tool": seg.tool.value, "content": seg.content}
    return {"kind": "answer", **seg.to_dict()}


def segment_from_dict(d: dict[str, Any]) -> Segment:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "thinking":
        return Thinking(d["text"])
    if kind == "tool_call":
        return ToolCall(ToolName.parse(d["name"]), d["arguments"])
    if kind == "tool_return":
        return ToolReturn(ToolName.parse(d["tool"]), d["content"])
    if kind == "answer":
        return _answer_from_json(d)
    raise SchemaViolation(f"unknown segment kind {kind!r}")


def trajectory_to_dict(t: Trajectory) -> dict[str, Any]:
    return {
        "task": {
            "item_name": t.task.item_name,
            "anomaly_type": t.task.anomaly_type,
            "normal_image": t.task.normal_image,
        },
        "segments": [segment_to_dict(s) for s in t.segments],
        "images": {str(k): v for k, v in sorted(t.images.items())},
    }


def trajectory_from_dict(d: dict[str, Any]) -> Trajectory:
    try:
        task = TaskSpec(**d["task"])
        images = {int(k): v for k, v in d["images"].items()}
        segments = [segment_from_dict(s) for s in d["segments"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise SchemaViolation(f"bad trajectory record: {exc}") from None
    return Trajectory(task=task, segments=segments, images=images)


def dumps_trajectory(t: Trajectory) -> str:
    """One JSONL line (no trailing newline)."""
    return json.dumps(trajectory_to_dict(t), ensure_ascii=False)


def loads_trajectory(line: str) -> Trajectory:
    return trajectory_from_dict(json.loads(line))
