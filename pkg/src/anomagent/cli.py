"""Command-line entry point: synthesize, build, score, advantages, validate, metrics.

Exit codes: 0 success, 1 some rows or tasks failed, 2 usage or configuration error.
Every run writes one manifest JSON next to its output.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Iterator

from . import __version__
from .agent_loop import (
    ChatPolicy,
    EpisodeResult,
    Termination,
    dumps_episode,
    group_seeds,
    run_episode,
    scripted_policy,
)
from .config import KEYS, Settings, UsageError, resolve
from .grpo import GroupRollout, GroupTooSmall, ShapeMismatch, group_advantages, grpo_loss
from .metrics import DegenerateRow, NoEligibleCluster, icl, inception_score
from .protocol import ProtocolError, TaskSpec, format_violations, trajectory_from_dict
from .rewards import action_nodes, total_reward
from .tools import SimScript
from .trajectory_builder import build_dataset, classify, load_specs

log = logging.getLogger("anomagent")

EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2


# --------------------------------------------------------------------------
# helpers


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield (line number, parsed object or the exception) for non-blank lines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except ValueError as exc:
                yield lineno, exc


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _episode_from_row(row: dict[str, Any]) -> EpisodeResult:
    """Accept both episode rows and bare trajectory rows."""
    if "trajectory" in row:
        return EpisodeResult.from_dict(row)
    return EpisodeResult.from_trajectory(trajectory_from_dict(row))


def _manifest_path(args: argparse.Namespace, primary: str) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out:
        return Path(f"{out}.manifest.json")
    return Path(f"{primary}.{args.command}.manifest.json")


class Run:
    """Collects what goes into the manifest."""

    def __init__(self, args: argparse.Namespace, settings: Settings):
        self.args = args
        self.settings = settings
        self.started = time.time()
        self.t0 = time.perf_counter()
        self.seeds: list[int] = []
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.counts: dict[str, int] = {}

    def write(self, exit_code: int, primary: str) -> Path:
        path = _manifest_path(self.args, primary)
        manifest = {
            "command": self.args.command,
            "argv": self.args.argv,
            "version": __version__,
            "config": self.settings.snapshot(),
            "config_sources": dict(sorted(self.settings.sources.items())),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "counts": self.counts,
            "exit_code": exit_code,
            "timing": {"started": self.started, "wall_seconds": time.perf_counter() - self.t0},
        }
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# synthesize


def _policy(settings: Settings):
    if settings["policy"] == "scripted":
        return scripted_policy
    return ChatPolicy(
        endpoint=settings["policy_endpoint"] or settings["endpoint"],
        model=settings["policy_model"],
        api_key=settings["api_key"],
        temperature=settings["temperature"],
        timeout=settings["timeout"],
    )


def cmd_synthesize(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    _require_file(args.tasks, "task file")
    run.inputs["tasks"] = args.tasks
    run.outputs["episodes"] = args.out
    base = settings["seed"]
    policy = _policy(settings)
    loop_cfg = settings.loop_config()
    default_script = settings.default_script()

    # (task_id, episode, seed, task, backend) per unit of work, in output order
    jobs: list[tuple[Any, int, int, TaskSpec, Any]] = []
    bad_rows: list[tuple[Any, str]] = []
    rows = list(_read_jsonl(args.tasks))
    for i, (lineno, row) in enumerate(rows):
        task_id = row.get("task_id", i) if isinstance(row, dict) else i
        try:
            if isinstance(row, Exception):
                raise row
            task = TaskSpec(row["item_name"], row["anomaly_type"], row["normal_image"])
            script = default_script
            if "script" in row:
                d = dict(row["script"])
                d.setdefault("qe_jitter", settings["qe_jitter"])
                script = SimScript.from_dict(d)
            task_seed = int(row.get("seed", base ^ i))
            backend = settings.backend_config(script=script, seed=task_seed)
        except (KeyError, TypeError, ValueError) as exc:
            bad_rows.append((task_id, f"line {lineno}: {type(exc).__name__}: {exc}"))
            continue
        for ep, seed in enumerate(group_seeds(task_seed, args.group)):
            b = backend.with_seed(seed) if backend.seed is not None else backend
            jobs.append((task_id, ep, seed, task, b))
            run.seeds.append(seed)

    def one(job):
        task_id, ep, seed, task, backend = job
        return run_episode(task, policy, backend, loop_cfg)

    n_jobs = settings["jobs"]
    if n_jobs <= 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, jobs))

    errors = list(bad_rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        for (task_id, ep, seed, _, _), res in zip(jobs, results):
            fh.write(dumps_episode(res, task_id=task_id, episode=ep, seed=seed) + "\n")
            if res.terminated_by is Termination.ERROR:
                errors.append((task_id, f"episode {ep} (seed {seed}): {res.error}"))

    by_kind = {t.value: 0 for t in Termination}
    for res in results:
        by_kind[res.terminated_by.value] += 1
    run.counts = {"tasks": len(rows), "episodes": len(results), "bad_task_rows": len(bad_rows), **by_kind}
    if errors:
        print(f"{len(errors)} failure(s):", file=sys.stderr)
        print(f"{'task_id':<16} error", file=sys.stderr)
        for task_id, msg in errors:
            print(f"{str(task_id):<16} {msg}", file=sys.stderr)
        return EXIT_FAILURES
    print(f"wrote {len(results)} episode(s) for {len(rows)} task(s) to {args.out}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# build


def cmd_build(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    _require_file(args.specs, "spec file")
    try:
        specs = load_specs(args.specs, base_seed=settings["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad spec file {args.specs}: {exc}") from None
    run.inputs["specs"] = args.specs
    run.seeds = [s.seed for s in specs]
    stats = build_dataset(specs, settings.backend_config(), args.out, jobs=settings["jobs"])
    stats_path = args.stats or f"{args.out}.stats.json"
    text = json.dumps(stats.to_dict(), indent=2) + "\n"
    Path(stats_path).write_text(text, encoding="utf-8")
    run.outputs = {"dataset": args.out, "stats": stats_path}
    run.counts = {"specs": len(specs), "built": stats.total, "failed": stats.failed, **stats.per_class}
    sys.stdout.write(text)
    return EXIT_FAILURES if stats.failed else EXIT_OK


# --------------------------------------------------------------------------
# score


def cmd_score(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    _require_file(args.episodes, "episode file")
    run.inputs["episodes"] = args.episodes
    run.outputs["rewards"] = args.out
    weights, table = settings.reward_weights(), settings.transition_table()
    judge = settings.backend_config() if args.judge else None
    failures = 0
    scored = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, (lineno, row) in enumerate(_read_jsonl(args.episodes)):
            try:
                if isinstance(row, Exception):
                    raise row
                e = _episode_from_row(row)
            except (KeyError, TypeError, ValueError) as exc:
                failures += 1
                print(f"line {lineno}: {type(exc).__name__}: {exc}", file=sys.stderr)
                continue
            breakdown = total_reward(e, weights, table, judge)
            out = {"task_id": row.get("task_id", i), "episode": row.get("episode", 0), **breakdown.to_dict()}
            fh.write(json.dumps(out) + "\n")
            scored += 1
    run.counts = {"scored": scored, "failed_rows": failures}
    print(f"scored {scored} row(s), {failures} failure(s)", file=sys.stderr)
    return EXIT_FAILURES if failures else EXIT_OK


# --------------------------------------------------------------------------
# advantages


def _load_advantage_input(path: str) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except ValueError:
        pass
    rows = []
    for lineno, row in _read_jsonl(path):
        if isinstance(row, Exception) or not isinstance(row, dict):
            raise UsageError(f"{path} line {lineno}: not a JSON object")
        rows.append(row)
    return rows


def cmd_advantages(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    _require_file(args.input, "input file")
    run.inputs["input"] = args.input
    if args.out:
        run.outputs["advantages"] = args.out
    cfg = settings.grpo_config()
    data = _load_advantage_input(args.input)
    if isinstance(data, dict) and data.get("rewards") is None and "total" in data:
        data = [data]  # a single score row

    if isinstance(data, dict):
        try:
            if "logprobs" in data:
                result: dict[str, Any] = grpo_loss(GroupRollout.from_dict(data), cfg).to_dict()
            else:
                result = {"advantages": group_advantages(data["rewards"], cfg)}
        except (GroupTooSmall, ShapeMismatch, KeyError, TypeError) as exc:
            print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
            run.counts = {"groups": 1, "failed_groups": 1}
            return EXIT_FAILURES
        run.counts = {"groups": 1, "failed_groups": 0}
        _emit(json.dumps(result) + "\n", args.out)
        return EXIT_OK

    groups: OrderedDict[Any, list[dict[str, Any]]] = OrderedDict()
    for row in data:
        key = json.dumps(row.get("task_id"))
        groups.setdefault(key, []).append(row)
    lines, failed = [], 0
    for rows in groups.values():
        try:
            adv = group_advantages([float(r["total"]) for r in rows], cfg)
        except (GroupTooSmall, KeyError, TypeError, ValueError) as exc:
            failed += 1
            print(f"task {rows[0].get('task_id')!r}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        for r, a in zip(rows, adv):
            lines.append(json.dumps({"task_id": r.get("task_id"), "episode": r.get("episode"),
                                     "total": r["total"], "advantage": a}))
    run.counts = {"groups": len(groups), "failed_groups": failed, "rows": len(lines)}
    _emit("".join(l + "\n" for l in lines), args.out)
    return EXIT_FAILURES if failed else EXIT_OK


# --------------------------------------------------------------------------
# validate


def validate_row(row: Any, table) -> dict[str, Any]:
    """check_format reasons, taxonomy class and transition-penalty preview for one row."""
    try:
        if isinstance(row, Exception):
            raise row
        e = _episode_from_row(row)
    except (KeyError, TypeError, ValueError) as exc:
        return {"valid": False, "reasons": [f"unparseable row: {type(exc).__name__}: {exc}"],
                "taxonomy": None, "transition_penalty": None}
    reasons = format_violations(e.trajectory)
    nodes = action_nodes(e)
    cls = classify(e.action_sequence)
    return {
        "valid": not reasons,
        "reasons": reasons,
        "taxonomy": cls.value if cls else None,
        "transition_penalty": sum(table.phi(a, b) for a, b in zip(nodes, nodes[1:])),
    }


def cmd_validate(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    _require_file(args.input, "input file")
    run.inputs["input"] = args.input
    if args.out:
        run.outputs["report"] = args.out
    table = settings.transition_table()
    lines, invalid = [], 0
    for i, (lineno, row) in enumerate(_read_jsonl(args.input)):
        report = {"row": i, "line": lineno}
        if isinstance(row, dict) and "task_id" in row:
            report["task_id"] = row["task_id"]
        report.update(validate_row(row, table))
        invalid += not report["valid"]
        lines.append(json.dumps(report))
    run.counts = {"rows": len(lines), "valid": len(lines) - invalid, "invalid": invalid}
    _emit("".join(l + "\n" for l in lines), args.out)
    print(f"{len(lines)} row(s), {invalid} invalid", file=sys.stderr)
    return EXIT_FAILURES if invalid else EXIT_OK


# --------------------------------------------------------------------------
# metrics


def _load_json(path: str) -> Any:
    _require_file(path, "input file")
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_metrics(args: argparse.Namespace, settings: Settings, run: Run) -> int:
    if not (args.probs or args.distances):
        raise UsageError("metrics needs --probs and/or --distances")
    result: dict[str, Any] = {}
    status = EXIT_OK
    if args.probs:
        run.inputs["probs"] = args.probs
        p = _load_json(args.probs)
        p = p["probs"] if isinstance(p, dict) else p
        try:
            result["inception_score"] = inception_score(p)
        except DegenerateRow as exc:
            print(f"DegenerateRow: {exc}", file=sys.stderr)
            status = EXIT_FAILURES
    if args.distances:
        run.inputs["distances"] = args.distances
        d = _load_json(args.distances)
        if isinstance(d, list):  # [{"cluster": id, "distances": [...]}, ...]
            d = [(c["cluster"], c["distances"]) for c in d]
        try:
            result["icl"] = icl(d, require_complete=args.require_complete)
        except (NoEligibleCluster, ValueError) as exc:
            print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
            status = EXIT_FAILURES
    if args.out:
        run.outputs["metrics"] = args.out
    run.counts = {"metrics": len(result)}
    _emit(json.dumps(result) + "\n", args.out)
    return status


# --------------------------------------------------------------------------
# parser


def _key_value(s: str) -> tuple[str, str]:
    key, sep, value = s.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {s!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override any configuration key (repeatable)")
    g.add_argument("--seed", type=int, help="base seed")
    g.add_argument("--jobs", type=int, help="worker threads")
    g.add_argument("--backend", choices=["simulated", "remote"])
    g.add_argument("--endpoint", help="service base URL")
    g.add_argument("--manifest", help="manifest path (default: next to the output)")
    g.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(
        prog="anomagent",
        description="Agentic industrial anomaly synthesis: episodes, datasets, rewards and metrics.",
        epilog="Configuration keys: " + ", ".join(sorted(KEYS)),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="run agent episodes for a task file")
    p.add_argument("--tasks", required=True, help="JSONL of {item_name, anomaly_type, normal_image, ...}")
    p.add_argument("--out", required=True, help="episode JSONL")
    p.add_argument("--group", type=int, default=1, help="episodes per task")
    p.add_argument("--policy", choices=["scripted", "chat"])
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("build", parents=[common], help="construct an SFT trajectory dataset")
    p.add_argument("--specs", required=True, help="JSONL of build specs")
    p.add_argument("--out", required=True, help="trajectory JSONL")
    p.add_argument("--stats", help="stats JSON (default: OUT.stats.json)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("score", parents=[common], help="compute rewards for episodes or trajectories")
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True, help="reward JSONL")
    p.add_argument("--judge", action="store_true", help="re-score final images with the backend")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("advantages", parents=[common], help="group advantages and GRPO loss diagnostics")
    p.add_argument("--input", required=True, help="JSON {rewards, logprobs?} or score JSONL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_advantages)

    p = sub.add_parser("validate", parents=[common], help="check trajectory format and structure")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="report JSONL (default: stdout)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("metrics", parents=[common], help="Inception Score and IC-L from precomputed numbers")
    p.add_argument("--probs", help="JSON n x k class-probability matrix")
    p.add_argument("--distances", help="JSON {cluster: [pairwise distances]}")
    p.add_argument("--require-complete", action="store_true",
                   help="skip clusters whose distance count is not m(m-1)/2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")

    cli = dict(args.overrides)
    for key in ("seed", "jobs", "backend", "endpoint"):
        if getattr(args, key) is not None:
            cli[key] = getattr(args, key)
    if getattr(args, "policy", None):
        cli["policy"] = args.policy
    try:
        if getattr(args, "group", 1) < 1:
            raise UsageError("--group must be >= 1")
        settings = resolve(cli, path=args.config)
        run = Run(args, settings)
        code = args.func(args, settings, run)
    except UsageError as exc:
        print(f"anomagent {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ProtocolError) as exc:
        print(f"anomagent {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    primary = next(iter(run.inputs.values()), args.command)
    run.write(code, primary)
    return code


if __name__ == "__main__":
    sys.exit(main())
