"""Command-line entry point: ``cellsearch <command> [options]``.

Failures print one ``error: <kind>: <message>`` line on stderr and exit
nonzero (2 for usage problems, 1 for everything else).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig, load_config, with_overrides
from .data import GENERATORS, DatasetSpec, dataset_stats, load_splits
from .evaluation import (DEPTH_GAP_COLUMNS, EVAL_COLUMNS, build_eval_network, depth_gap_probe,
                         experiment_random_space, experiment_skip_sweep, train_eval, write_csv)
from .exceptions import CellSearchError, ConfigError
from .genotype import (derive, export_graph, genotype_to_dict, dumps, load_genotype, load_snapshot,
                       refine_skip_count, save_genotype)
from .gradcheck import format_table, run_suite
from .search import SearchData, run_progressive_search

log = logging.getLogger("cellsearch")

LOCK_NAME = "run.lock"
LOG_NAME = "run.log"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- run directories

@contextmanager
def run_directory(path: Path, *, fresh: bool = True):
    """Create ``path`` and hold an exclusive lock file in it for the duration."""
    path.mkdir(parents=True, exist_ok=True)
    if fresh and any(p.name not in (LOCK_NAME,) for p in path.iterdir()):
        raise UsageError(f"output directory {path} is not empty")
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CellSearchError(f"{path} is locked by another process ({lock} exists)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    handler = logging.FileHandler(path / LOG_NAME)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("cellsearch")
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()
        lock.unlink(missing_ok=True)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, extra: Optional[dict] = None) -> dict:
    """List every artifact under ``path`` with its digest; logs and the lock are excluded."""
    skip = {LOCK_NAME, LOG_NAME, MANIFEST_NAME}
    files = sorted(p for p in path.rglob("*") if p.is_file() and p.name not in skip)
    manifest = {"artifacts": {str(p.relative_to(path)): sha256_file(p) for p in files}}
    manifest.update(extra or {})
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.json").write_text(cfg.dumps())


# ---------------------------------------------------------------- helpers

def _existing(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _dataset_override(value: Optional[str], base: DatasetSpec) -> Optional[DatasetSpec]:
    if value is None:
        return None
    if value in GENERATORS:
        return dataclasses.replace(base, source="synthetic", generator=value)
    parts = value.split(",")
    if len(parts) != 2:
        raise UsageError(f"--dataset takes one of {GENERATORS} or TRAIN.pdts,TEST.pdts")
    for p in parts:
        _existing(p, "dataset file")
    return dataclasses.replace(base, source="file", train_path=parts[0], test_path=parts[1])


def _resolve_config(args) -> RunConfig:
    cfg = load_config(_existing(args.config, "config file")) if args.config else RunConfig()
    return with_overrides(
        cfg, seed=getattr(args, "seed", None), plan=getattr(args, "plan", None),
        m_skip=getattr(args, "m_skip", None),
        dataset=_dataset_override(getattr(args, "dataset", None), cfg.dataset))


# ---------------------------------------------------------------- commands

def cmd_search(args) -> int:
    cfg = _resolve_config(args)
    plan = cfg.search.resolve_plan()
    splits = load_splits(cfg.dataset)
    data = SearchData.from_splits(splits, cfg.dataset.split_seed)
    out = Path(args.out)
    with run_directory(out):
        _write_config(out, cfg)
        log.info("search seed %d plan %s", cfg.seed, plan.digest())
        result = run_progressive_search(plan, data, cfg.seed, optim=cfg.search.optimizer,
                                        network=cfg.search.network, out_dir=out)
        save_genotype(out / "genotype_raw.json", derive(result.final))
        refined = refine_skip_count(result.final, cfg.refine.m_skip, cfg.refine.cell_types)
        save_genotype(out / "genotype.json", refined.genotype)
        write_manifest(out, {"dataset_stats": dataset_stats(splits)})
    print(f"wrote {len(result.snapshots)} snapshots and genotype.json to {out}")
    return 0


def cmd_derive(args) -> int:
    snap = load_snapshot(_existing(args.snapshot, "snapshot"))
    g = derive(snap)
    _emit_genotype(g, args.out)
    return 0


def cmd_refine(args) -> int:
    snap_path = _existing(args.snapshot, "snapshot")
    cfg = _resolve_config(args)
    snap = load_snapshot(snap_path)
    res = refine_skip_count(snap, cfg.refine.m_skip, cfg.refine.cell_types)
    _emit_genotype(res.genotype, args.out)
    print(f"refined in {res.iterations} derivation(s); normal-cell skips: {res.genotype.skip_count()}",
          file=sys.stderr)
    return 0


def _emit_genotype(g, out) -> None:
    if out:
        save_genotype(out, g)
    else:
        sys.stdout.write(dumps(genotype_to_dict(g)))


def cmd_eval(args) -> int:
    g = load_genotype(_existing(args.genotype, "genotype"))
    cfg = _resolve_config(args)
    splits = load_splits(cfg.dataset)
    out = Path(args.out)
    with run_directory(out):
        _write_config(out, cfg)
        net = build_eval_network(g, cfg.eval, splits.num_classes, in_channels=splits.train.image_shape[0],
                                 seed=cfg.seed)
        res = train_eval(net, splits, cfg.eval, cfg.seed)
        save_genotype(out / "genotype.json", g)
        write_csv(out / "metrics.csv", EVAL_COLUMNS, res.history)
        summary = {"test_error": res.test_error, "train_loss": res.train_loss,
                   "parameters": net.num_parameters()}
        (out / "result.json").write_text(dumps(summary))
        write_manifest(out, {"dataset_stats": dataset_stats(splits)})
    print(f"test error {res.test_error:.4f} with {summary['parameters']} parameters")
    return 0


def cmd_experiment(args) -> int:
    cfg = _resolve_config(args)
    name = args.name or cfg.experiment.name
    snaps = []
    if name in ("skip_sweep", "depth_gap"):
        paths = list(args.snapshot or [])
        if args.run:
            run = Path(args.run)
            paths = sorted(run.glob("snapshot_stage*.json"))
            if not paths:
                raise UsageError(f"no stage snapshots in {run}")
        if not paths:
            raise UsageError(f"experiment {name} needs --snapshot or --run")
        snaps = [load_snapshot(_existing(str(p), "snapshot")) for p in paths]
    out = Path(args.out)
    with run_directory(out):
        _write_config(out, cfg)
        if name == "depth_gap":
            rows = depth_gap_probe(snaps, out_dir=out)
            columns = DEPTH_GAP_COLUMNS
        elif name == "skip_sweep":
            splits = None if args.no_train else load_splits(cfg.dataset)
            num_classes = splits.num_classes if splits else cfg.dataset.classes
            rows = experiment_skip_sweep(snaps[-1], cfg.experiment.m_values, cfg.eval, num_classes,
                                         splits, cfg.seed, cfg.dataset.channels, out_dir=out)
            columns = ("m", "normal_skips", "parameters", "test_error")
        else:
            splits = load_splits(cfg.dataset)
            data = SearchData.from_splits(splits, cfg.dataset.split_seed)
            rows = experiment_random_space(cfg.search.resolve_plan(), data, splits, cfg.experiment.seeds,
                                           cfg.eval, optim=cfg.search.optimizer,
                                           network=cfg.search.network,
                                           random_repeats=cfg.experiment.random_repeats, out_dir=out)
            columns = ("seed", "arm", "repeat", "normal_skips", "test_error", "selected")
        write_manifest(out)
    print("\t".join(columns))
    for r in rows:
        print("\t".join(str(r[c]) for c in columns))
    return 0


def cmd_export_dot(args) -> int:
    g = load_genotype(_existing(args.genotype, "genotype"))
    cells = ("normal", "reduce") if args.cell == "both" else (args.cell,)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for ct in cells:
            (out / f"{ct}.dot").write_text(export_graph(g, ct))
    else:
        for ct in cells:
            sys.stdout.write(export_graph(g, ct))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: gradcheck: {len(failed)} case(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cellsearch", description="Progressive differentiable cell search at desk scale.")
    p.add_argument("--version", action="version", version=f"cellsearch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, seed=True, dataset=True):
        sp.add_argument("--config", help="run configuration (JSON)")
        if seed:
            sp.add_argument("--seed", type=int)
        if dataset:
            sp.add_argument("--dataset", help=f"generator name ({', '.join(GENERATORS)}) or TRAIN,TEST file pair")

    s = sub.add_parser("search", help="run the staged search")
    common(s)
    s.add_argument("--plan", choices=("desk", "full"))
    s.add_argument("--m-skip", type=int, dest="m_skip")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("derive", help="derive a genotype from a snapshot")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_derive, config=None)

    s = sub.add_parser("refine", help="derive with at most M normal-cell skip-connects")
    s.add_argument("--config")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--m-skip", type=int, dest="m_skip")
    s.add_argument("--out")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", help="train a genotype's network from scratch")
    common(s)
    s.add_argument("--genotype", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="diagnostic experiments")
    common(s)
    s.add_argument("--name", choices=("random_space", "skip_sweep", "depth_gap"))
    src = s.add_mutually_exclusive_group()
    src.add_argument("--snapshot", action="append", help="snapshot file (repeatable)")
    src.add_argument("--run", help="search run directory holding stage snapshots")
    s.add_argument("--plan", choices=("desk", "full"))
    s.add_argument("--m-skip", type=int, dest="m_skip")
    s.add_argument("--no-train", action="store_true", help="skip_sweep: report parameter counts only")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("export-dot", help="write DOT drawings of a genotype's cells")
    s.add_argument("--genotype", required=True)
    s.add_argument("--cell", choices=("normal", "reduce", "both"), default="both")
    s.add_argument("--out", help="directory for normal.dot / reduce.dot (default: stdout)")
    s.set_defaults(func=cmd_export_dot, config=None)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck, config=None)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger("cellsearch").setLevel(logging.INFO)
        if getattr(args, "m_skip", None) is not None and args.m_skip < 0:
            raise UsageError("--m-skip must be >= 0")
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except CellSearchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
