"""``dualpost`` command line: one binary, subcommands share a YAML config.

Progress goes to stderr; artifacts are written under a run directory named
``<timestamp>-seed<N>`` inside the configured output root. Failures print a
single ``error[<category>]: <message>`` line to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .trajectory import Dataset, SchemaError, dataset_stats, dumps_record, load_dataset, save_dataset

log = logging.getLogger("dualpost")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "judge": 5, "training": 6, "check": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def default_config() -> dict:
    text = resources.files("dualpost").joinpath("configs/default.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as err:
            raise CliError("config", f"cannot read config {path}: {err.strerror}") from None
        except yaml.YAMLError as err:
            raise CliError("config", f"invalid YAML in {path}: {err}") from None
        if not isinstance(user, dict):
            raise CliError("config", f"{path}: top level must be a mapping")
        unknown = set(user) - set(cfg)
        if unknown:
            raise CliError("config", f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    scene = cfg["scene"]
    if int(scene["window"]) < 1 or not 0.0 <= float(scene["threshold"]) <= 1.0:
        raise CliError("config", "scene.window must be >= 1 and scene.threshold within [0, 1]")
    return cfg


def run_dir(args, cfg: dict) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg["output"]["root"]) / f"{stamp}-seed{args.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(path: str) -> Dataset:
    if not Path(path).exists():
        raise CliError("data", f"no such dataset: {path}")
    return load_dataset(path)


def _robot_only(ds: Dataset) -> Dataset:
    """Judging and retrieval apply to robot rollouts; multimodal samples are skipped."""
    kept = tuple(t for t in ds.trajectories if t.is_robot)
    if len(kept) < len(ds.trajectories):
        log.info("skipping %d non-robot samples", len(ds.trajectories) - len(kept))
    return Dataset(kept, ds.schema_version)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(dumps_record(r) + "\n" for r in records), encoding="utf-8")


def _jobs(args) -> int:
    return max(1, args.jobs or os.cpu_count() or 1)


def _scene_source(args, cfg: dict, ds_path: str):
    from .prune import SceneSource

    scene = cfg["scene"]
    source = args.scene or scene["source"]
    base = args.base_dir or scene.get("base_dir") or str(Path(ds_path).parent)
    return SceneSource.parse(source, window=int(args.window or scene["window"]),
                             threshold=float(scene["threshold"] if args.threshold is None else args.threshold),
                             base_dir=base)


# -- subcommands ---------------------------------------------------------------

def cmd_stats(args, cfg) -> int:
    report = dataset_stats(_load(args.dataset)).to_dict()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_label_kinematic(args, cfg) -> int:
    from .kinematic import label_kinematic

    ds = _load(args.dataset)
    robots = [t for t in ds.trajectories if t.is_robot]
    with ThreadPoolExecutor(_jobs(args)) as pool:
        labels = list(pool.map(label_kinematic, robots))
    out = run_dir(args, cfg) / "kinematic_labels.jsonl"
    _write_jsonl(out, [lab.to_record(t.id) for t, lab in zip(robots, labels)])
    print(out)
    return 0


def cmd_label_scene(args, cfg) -> int:
    ds = _load(args.dataset)
    labeler = _scene_source(args, cfg, args.dataset).labeler()
    robots = [t for t in ds.trajectories if t.is_robot]
    with ThreadPoolExecutor(_jobs(args)) as pool:
        labels = list(pool.map(labeler, robots))
    out = run_dir(args, cfg) / "scene_labels.jsonl"
    _write_jsonl(out, [lab.to_record(t.id) for t, lab in zip(robots, labels)])
    print(out)
    return 0


def cmd_prune(args, cfg) -> int:
    from .prune import prune_dataset

    ds = _load(args.dataset)
    out = run_dir(args, cfg)
    pruned, report = prune_dataset(ds, _scene_source(args, cfg, args.dataset), out / "prune_report.json",
                                   strategy=args.strategy, seed=args.seed)
    save_dataset(pruned, out / "pruned.jsonl")
    print(json.dumps(report, sort_keys=True))
    return 0


def _protocol(args, cfg):
    from .distill import ProtocolSpec

    try:
        spec = ProtocolSpec.from_dict(cfg["distill"])
        changes = {"seed": args.seed}
        for name in ("protocol", "epochs", "pruning"):
            value = getattr(args, name, None)
            if value is not None:
                changes[name] = value
        return replace(spec, **changes)
    except (TypeError, ValueError) as err:
        raise CliError("config", f"distill: {err}") from None


def cmd_distill_train(args, cfg) -> int:
    from .distill.train import train, write_trace

    spec = _protocol(args, cfg)
    out = run_dir(args, cfg)
    log.info("training %s (seed %d, %d epochs per stage)", spec.protocol, spec.seed, spec.epochs)
    result = train(spec)
    result.policy.save(out / "policy.npz")
    write_trace(result.trace, out / "trace.jsonl")
    summary = {"spec": spec.to_dict(), "final": result.final.to_dict()}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary["final"], sort_keys=True))
    return 0


def cmd_distill_check_grad(args, cfg) -> int:
    from .distill.gradcheck import check_gradients

    res = check_gradients(seed=args.seed, instances=args.instances)
    print(f"max_relative_error={res.max_error:.3e} instances={args.instances} tolerance={args.tolerance:.0e}")
    if not res.passed(args.tolerance):
        raise CliError("check", f"gradient check failed: {res.max_error:.3e} > {args.tolerance:.0e}")
    return 0


def cmd_distill_make_task(args, cfg) -> int:
    from .distill.task import make_synthetic_task
    from .render import render_dataset

    grid = args.grid or cfg["distill"].get("grid", 5)
    ds = make_synthetic_task(args.seed, args.n, args.n_multimodal, grid=grid,
                             scene_noise=float(cfg["distill"].get("scene_noise", 0.2)))
    out = run_dir(args, cfg)
    save_dataset(ds, out / "task.jsonl")
    if args.render:
        n = render_dataset(ds, out, grid)
        log.info("rendered %d frames", n)
    print(out / "task.jsonl")
    return 0


def _gateway(args, cfg):
    from .judge import JudgeGateway, make_backend

    settings = dict(cfg["judge"])
    max_in_flight = int(settings.pop("max_in_flight", 4))
    if args.jobs:
        max_in_flight = args.jobs
    return JudgeGateway(make_backend(settings), max_in_flight=max_in_flight)


def _encoder(cfg, base_dir):
    from .kb import make_encoder

    return make_encoder(cfg["kb"].get("encoder"), base_dir)


def cmd_kb_build(args, cfg) -> int:
    from .kb import kb_build
    from .scorer import judge_dataset, verdict_record

    ds = _robot_only(_load(args.dataset))
    base = args.base_dir or str(Path(args.dataset).parent)
    out = run_dir(args, cfg)
    verdicts = args.verdicts
    if verdicts is None:
        results = judge_dataset(ds, _gateway(args, cfg), args.kind)
        failed = {k: v for k, v in results.items() if isinstance(v, Exception)}
        if failed:
            tid, err = next(iter(failed.items()))
            raise CliError("judge", f"{len(failed)} verdicts failed, first {tid}: {err}")
        verdicts = out / "verdicts.jsonl"
        _write_jsonl(verdicts, [verdict_record(k, v) for k, v in results.items()])
    kb = kb_build(ds, verdicts, args.refinements, _encoder(cfg, base), out / "kb.jsonl")
    print(json.dumps({"kb": str(out / "kb.jsonl"), "exemplars": len(kb)}, sort_keys=True))
    return 0


def cmd_kb_retrieve(args, cfg) -> int:
    from .kb import KnowledgeBase, retrieve

    kb = KnowledgeBase.load(args.kb)
    hit = retrieve(kb, args.task, args.frames, _encoder(cfg, args.base_dir))
    print(json.dumps({"text_hit": hit.text_hit.id, "text_cosine": hit.text_cosine,
                      "scene_hit": hit.scene_hit.id, "scene_cosine": hit.scene_cosine}, sort_keys=True))
    return 0


def cmd_score_run(args, cfg) -> int:
    from .kb import KnowledgeBase
    from .scorer import evaluate_run

    ds = _robot_only(_load(args.dataset))
    base = args.base_dir or str(Path(args.dataset).parent)
    kb_path = args.kb or cfg["kb"].get("path")
    kb = KnowledgeBase.load(kb_path) if kb_path else None
    report = evaluate_run(ds, args.outcomes, kb, _gateway(args, cfg), args.kind, _encoder(cfg, base))
    out = run_dir(args, cfg)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = report.table(args.name)
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_score_report(args, cfg) -> int:
    path = Path(args.report)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        means = doc["means"]
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise CliError("data", f"unreadable report {path}: {err}") from None
    cols = ("R", "A", "I", "RA", "Sim.", "VLA Score")
    print(" | ".join(f"{c:>9}" for c in cols))
    print(" | ".join(f"{'-' if means.get(c) is None else format(means[c], '.1f'):>9}" for c in cols))
    print(f"scored {doc['n_scored']}/{doc['n_trajectories']}, errors {doc['n_errors']}")
    return 0


# -- parser --------------------------------------------------------------------

def _common(top: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="YAML config overriding the packaged defaults")
    common.add_argument("--seed", type=int, default=d(0))
    common.add_argument("--jobs", type=int, default=d(None), help="parallelism (default: logical CPUs)")
    common.add_argument("--run-dir", default=d(None), help="write artifacts here instead of a timestamped directory")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(top=False)
    p = argparse.ArgumentParser(prog="dualpost", parents=[_common(top=True)],
                                description="Reasoning pruning, dual-teacher distillation and judge scoring.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_flags(sp):
        sp.add_argument("--scene", help="detector | meta | path to a label file")
        sp.add_argument("--window", type=int)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--base-dir", help="directory observation refs are relative to")

    sp = sub.add_parser("stats", parents=[common], help="reasoning token counts and entropy")
    sp.add_argument("dataset")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("label-kinematic", parents=[common], help="kinematic keyframe labels")
    sp.add_argument("dataset")
    sp.set_defaults(func=cmd_label_kinematic)

    sp = sub.add_parser("label-scene", parents=[common], help="scene event-boundary labels")
    sp.add_argument("dataset")
    scene_flags(sp)
    sp.set_defaults(func=cmd_label_scene)

    sp = sub.add_parser("prune", parents=[common], help="label, prune and report")
    sp.add_argument("dataset")
    scene_flags(sp)
    sp.add_argument("--strategy", choices=("dual_layer", "random"), default="dual_layer")
    sp.set_defaults(func=cmd_prune)

    dp = sub.add_parser("distill", help="distillation engine").add_subparsers(dest="action", required=True)
    sp = dp.add_parser("train", parents=[common], help="run one training protocol")
    sp.add_argument("--protocol", choices=("specialist", "mixed_baseline", "dual_distilled"))
    sp.add_argument("--pruning", choices=("dual_layer", "random", "none"))
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_distill_train)
    sp = dp.add_parser("check-grad", parents=[common], help="finite-difference gradient check")
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.set_defaults(func=cmd_distill_check_grad)
    sp = dp.add_parser("make-task", parents=[common], help="write the synthetic gridworld corpus")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--n-multimodal", type=int, default=None)
    sp.add_argument("--grid", type=int, default=None)
    sp.add_argument("--render", action="store_true", help="also draw every robot frame as PNG")
    sp.set_defaults(func=cmd_distill_make_task)

    kp = sub.add_parser("kb", help="exemplar knowledge base").add_subparsers(dest="action", required=True)
    sp = kp.add_parser("build", parents=[common], help="build a KB from verdicts and refinements")
    sp.add_argument("dataset")
    sp.add_argument("--verdicts", help="verdict JSONL; judged with the configured backend when omitted")
    sp.add_argument("--refinements")
    sp.add_argument("--kind", choices=("Reasoning", "Specialist"), default="Reasoning")
    sp.add_argument("--base-dir")
    sp.set_defaults(func=cmd_kb_build)
    sp = kp.add_parser("retrieve", parents=[common], help="dual top-1 retrieval")
    sp.add_argument("kb")
    sp.add_argument("--task", required=True)
    sp.add_argument("--frames", nargs="+", required=True)
    sp.add_argument("--base-dir")
    sp.set_defaults(func=cmd_kb_retrieve)

    cp = sub.add_parser("score", help="VLA Score").add_subparsers(dest="action", required=True)
    sp = cp.add_parser("run", parents=[common], help="judge and score a rollout set")
    sp.add_argument("dataset")
    sp.add_argument("--outcomes", required=True)
    sp.add_argument("--kb")
    sp.add_argument("--kind", choices=("Reasoning", "Specialist"), default="Reasoning")
    sp.add_argument("--name", default="policy", help="row label in the table")
    sp.add_argument("--base-dir")
    sp.set_defaults(func=cmd_score_run)
    sp = cp.add_parser("report", parents=[common], help="print a saved report as a table")
    sp.add_argument("report")
    sp.set_defaults(func=cmd_score_report)
    return p


def _category(err: BaseException) -> str:
    from .distill import PolicyError, TrainingDiverged
    from .judge import JudgeError
    from .kb import EmbeddingError, KBError
    from .prune import PruneError
    from .scene import SceneLabelError
    from .scorer import ScoreError

    if isinstance(err, CliError):
        return err.category
    if isinstance(err, TrainingDiverged):
        return "training"
    if isinstance(err, (JudgeError, EmbeddingError)):
        return "judge"
    if isinstance(err, (SchemaError, SceneLabelError, PruneError, KBError, ScoreError, PolicyError,
                        FileNotFoundError)):
        return "data"
    return "internal"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except Exception as err:  # noqa: BLE001 - every failure becomes one categorized line
        category = _category(err)
        message = " ".join(str(err).split()) or type(err).__name__
        print(f"error[{category}]: {message}", file=sys.stderr)
        if category == "internal":
            log.debug("traceback", exc_info=True)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
