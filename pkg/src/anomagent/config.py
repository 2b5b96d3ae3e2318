"""Run configuration: one flat key space resolved from flags, environment, file and defaults.

A config file holds ``key = value`` lines (``#`` comments allowed). The
environment variable for ``some_key`` is ``ANOMAGENT_SOME_KEY``.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .agent_loop import LoopConfig
from .grpo import GrpoConfig
from .rewards import RewardWeights, TransitionTable
from .tools import BackendConfig, BackendKind, SimScript

ENV_PREFIX = "ANOMAGENT_"


class UsageError(ValueError):
    """Bad or missing configuration; the CLI maps it to exit code 2."""


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _optional(v: str) -> str | None:
    return None if v is None or str(v) == "" else str(v)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    help: str
    secret: bool = False


KEYS: dict[str, Key] = {
    # backend
    "backend": Key("simulated", str, "tool backend: simulated or remote"),
    "endpoint": Key(None, _optional, "base URL of the OpenAI-compatible service"),
    "api_key": Key(None, _optional, "bearer token for the service", secret=True),
    "chat_model": Key("gemini-3.1-pro", str, "model for prompt_gen, quality_eval and knowledge_retrieval"),
    "image_model": Key("gemini-3.1-flash-image-preview", str, "image editing model"),
    "mask_model": Key("metauas", str, "mask segmentation model"),
    "timeout": Key(120.0, float, "HTTP timeout in seconds"),
    "attempts": Key(3, int, "HTTP attempts per call"),
    "script": Key(None, _optional, "JSON file with the default simulated-backend script"),
    "qe_jitter": Key(0, int, "seeded jitter on simulated quality verdicts (0-5 scale units)"),
    # policy and loop
    "policy": Key("scripted", str, "scripted or chat"),
    "policy_endpoint": Key(None, _optional, "chat endpoint for the policy (defaults to endpoint)"),
    "policy_model": Key("anomagent-policy", str, "model name sent to the policy endpoint"),
    "temperature": Key(1.0, float, "policy sampling temperature"),
    "theta": Key(0.8, float, "quality acceptance threshold"),
    "kr_trigger": Key(0.5, float, "score below which knowledge retrieval is triggered"),
    "max_generations": Key(3, int, "maximum image generations per episode"),
    "t_max": Key(12, int, "turn budget per episode"),
    # seeds and parallelism
    "seed": Key(0, int, "base seed; rows and episodes derive theirs by XOR with their index"),
    "jobs": Key(1, int, "worker threads across independent rows"),
    # reward
    "alpha": Key(1.0, float, "task reward weight"),
    "beta": Key(0.5, float, "reflection reward weight"),
    "gamma": Key(0.3, float, "behavior reward weight"),
    "lambda_kr": Key(0.2, float, "bonus per knowledge retrieval after a low score"),
    "lambda_t": Key(0.1, float, "penalty per turn beyond t_max"),
    "delta": Key(0.5, float, "low-score threshold for the retrieval bonus"),
    "transition_penalty": Key(-1.0, float, "cost of an illegal action transition"),
    # grpo
    "epsilon": Key(0.2, float, "clip width"),
    "kl_beta": Key(0.04, float, "KL coefficient"),
    "filter_zero_advantage": Key(True, _bool, "drop zero-advantage trajectories"),
    "std_floor": Key(1e-8, float, "minimum reward std for a non-degenerate group"),
}


def read_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    try:
        parser.read_string("[anomagent]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    return dict(parser["anomagent"])


def read_env(env: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in KEYS:
                out[key] = value
    return out


@dataclass
class Settings:
    values: dict[str, Any]
    sources: dict[str, str]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def snapshot(self) -> dict[str, Any]:
        """Resolved values with secrets masked."""
        return {k: ("***" if KEYS[k].secret and v else v) for k, v in sorted(self.values.items())}

    def backend_config(self, script: SimScript | None = None, seed: int | None = None) -> BackendConfig:
        kind = self.values["backend"]
        if kind == BackendKind.REMOTE.value:
            return BackendConfig.remote(
                self.values["endpoint"],
                self.values["api_key"],
                chat_model=self.values["chat_model"],
                image_model=self.values["image_model"],
                mask_model=self.values["mask_model"],
                timeout=self.values["timeout"],
                attempts=self.values["attempts"],
            )
        return BackendConfig.simulated(
            seed=self.values["seed"] if seed is None else seed,
            script=script or self.default_script(),
        )

    def default_script(self) -> SimScript:
        path = self.values["script"]
        if path is None:
            return SimScript(qe_jitter=self.values["qe_jitter"])
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load script {path}: {exc}") from None
        d.setdefault("qe_jitter", self.values["qe_jitter"])
        return SimScript.from_dict(d)

    def loop_config(self) -> LoopConfig:
        v = self.values
        return LoopConfig(v["theta"], v["max_generations"], v["t_max"], v["kr_trigger"])

    def reward_weights(self) -> RewardWeights:
        v = self.values
        return RewardWeights(v["alpha"], v["beta"], v["gamma"], v["lambda_kr"], v["lambda_t"], v["delta"], v["t_max"])

    def transition_table(self) -> TransitionTable:
        return TransitionTable(penalty=self.values["transition_penalty"])

    def grpo_config(self) -> GrpoConfig:
        v = self.values
        return GrpoConfig(v["epsilon"], v["kl_beta"], v["filter_zero_advantage"], v["std_floor"])


def resolve(
    cli: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    path: str | Path | None = None,
) -> Settings:
    """Merge layers with precedence cli > env > file > default and type-check every value.

    ``cli`` entries whose value is None are treated as not given.
    """
    env = os.environ if env is None else env
    layers = [
        ("file", read_file(path) if path else {}),
        ("env", read_env(env)),
        ("cli", {k: v for k, v in (cli or {}).items() if v is not None}),
    ]
    values = {k: spec.default for k, spec in KEYS.items()}
    sources = {k: "default" for k in KEYS}
    for source, layer in layers:
        for key, raw in layer.items():
            if key not in KEYS:
                raise UsageError(f"unknown configuration key {key!r} (from {source})")
            try:
                values[key] = KEYS[key].parse(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r} (from {source}): {exc}") from None
            sources[key] = source

    if values["backend"] not in (BackendKind.SIMULATED.value, BackendKind.REMOTE.value):
        raise UsageError(f"backend must be simulated or remote, got {values['backend']!r}")
    if values["backend"] == BackendKind.REMOTE.value and not values["endpoint"]:
        raise UsageError("backend=remote requires the endpoint key (or ANOMAGENT_ENDPOINT)")
    if values["policy"] not in ("scripted", "chat"):
        raise UsageError(f"policy must be scripted or chat, got {values['policy']!r}")
    if values["policy"] == "chat" and not (values["policy_endpoint"] or values["endpoint"]):
        raise UsageError("policy=chat requires policy_endpoint or endpoint")
    if values["jobs"] < 1:
        raise UsageError("jobs must be >= 1")
    settings = Settings(values, sources)
    try:  # surface range errors as usage errors before any work starts
        settings.loop_config()
        settings.reward_weights()
        settings.transition_table()
        settings.grpo_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return settings
