"""Command-line driver: ``hicon <command> [flags]``.

Commands write their artifacts plus a ``manifest.json`` (config snapshot,
dataset fingerprint, seed, argv and sha256 checksums of every artifact) into
``--out``.  Nothing time-dependent goes into any file, so repeating a command
with the same inputs reproduces it byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import ContractError, NumericalError
from .data import DataFormatError, Dataset, SynthSpec, load_dataset, save_dataset, synth_generate
from .evaluation import DegenerateExportError, MetricError, angle_density_export, density_csv
from .graph import GraphError, Kind, NodeRef, hop_neighbor_stats
from .metapath import BudgetExceeded, MetaPathError, build_subgraph, iter_instances, parse_metapath
from .model import ITEM_PATHS, PREDICT_MODES, USER_PATHS, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, build_model, evaluate, node_representations, train

log = logging.getLogger("hicon")

COMMANDS = ("synth", "paths", "stats", "train", "eval", "sweep", "smoothness", "density")
DEFAULT_SWEEP = "0.01,0.05,1,10"
DEFAULT_BANDS = "0,25,50,75,100"

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "dim": "dim", "lr": "lr", "epochs": "epochs", "batch": "batch_size", "lam": "lam", "tau": "tau",
    "metapaths_user": "user_paths", "metapaths_item": "item_paths", "mode": "predict_mode",
    "disable_low": "disable_low", "disable_high": "disable_high", "disable_cl": "disable_cl",
    "recursive_depth": "recursive_depth", "pooling": "pooling", "patience": "patience",
    "eval_every": "eval_every",
}


class CommandError(RuntimeError):
    pass


def _csv(kind):
    def parse(text: str):
        items = [x.strip() for x in text.split(",") if x.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        try:
            return [kind(x) for x in items]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hicon", description="Hierarchical knowledge-aware recommender toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, type=Path, help="dataset directory")
    data.add_argument("--threshold", type=float, default=1.0, help="rating threshold for raw ratings")

    tr = argparse.ArgumentParser(add_help=False)
    tr.add_argument("--config", type=Path, help="JSON file of training settings; flags override it")
    tr.add_argument("--dim", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--tau", type=float)
    tr.add_argument("--metapaths-user", type=_csv(str))
    tr.add_argument("--metapaths-item", type=_csv(str))
    tr.add_argument("--mode", choices=PREDICT_MODES)
    tr.add_argument("--disable-low", action="store_const", const=True)
    tr.add_argument("--disable-high", action="store_const", const=True)
    tr.add_argument("--disable-cl", action="store_const", const=True)
    tr.add_argument("--recursive-depth", type=int)
    tr.add_argument("--pooling", choices=("mean", "sum"))
    tr.add_argument("--patience", type=int)
    tr.add_argument("--eval-every", type=int)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    defaults = SynthSpec()
    s.add_argument("--users", type=int, default=defaults.n_users)
    s.add_argument("--items", type=int, default=defaults.n_items)
    s.add_argument("--entities", type=int, default=defaults.n_entities)
    s.add_argument("--relations", type=int, default=defaults.n_relations)
    s.add_argument("--clusters", type=int, default=defaults.n_clusters)
    s.add_argument("--noise", type=float, default=defaults.noise)

    s = sub.add_parser("paths", parents=[common, data], help="dump meta-path subgraphs and instances")
    s.add_argument("--metapaths", type=_csv(str), default=list(USER_PATHS + ITEM_PATHS))
    s.add_argument("--anchor", help="also list the instances from one anchor, e.g. U3 or I0")
    s.add_argument("--budget", type=int, default=10**6, help="instance budget for --anchor listings")

    s = sub.add_parser("stats", parents=[common, data], help="per-hop neighbor counts of users")
    s.add_argument("--max-hop", type=int, default=4)
    s.add_argument("--hop-mode", choices=("distinct", "walks"), default="distinct")

    s = sub.add_parser("train", parents=[common, data, tr], help="train a model")
    s.add_argument("--lambda", dest="lam", type=float)

    s = sub.add_parser("eval", parents=[common, data], help="evaluate a trained run")
    s.add_argument("--run", required=True, type=Path, help="directory written by `train`")
    s.add_argument("--mode", choices=PREDICT_MODES, default="full")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--strata", nargs="?", const=DEFAULT_BANDS, type=_csv(float),
                   help=f"percentile band edges over training activity (default {DEFAULT_BANDS})")

    s = sub.add_parser("sweep", parents=[common, data, tr], help="train and evaluate over a lambda grid")
    s.add_argument("--lambda", dest="lam_grid", type=_csv(float), default=_csv(float)(DEFAULT_SWEEP))
    s.add_argument("--jobs", type=int, default=1, help="grid points run in parallel processes")

    s = sub.add_parser("smoothness", parents=[common, data, tr], help="hierarchical vs. recursive SMV")
    s.add_argument("--lambda", dest="lam", type=float)

    s = sub.add_parser("density", parents=[common, data], help="angle-density CSV of a trained run")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--mode", choices=PREDICT_MODES, default="full")
    s.add_argument("--bins", type=int, default=64)
    return p


# -- helpers ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(out: Path, command: str, argv: Sequence[str], seed: int, artifacts: Sequence[Path],
                   config: dict | None = None, fingerprint: str | None = None) -> Path:
    entries = {str(p.relative_to(out)): _sha256(p) for p in sorted(artifacts)}
    manifest = dict(command=command, argv=list(argv), seed=seed, config=config,
                    dataset_fingerprint=fingerprint, output_dir=str(out), artifacts=entries)
    return _write(out / "manifest.json", _json(manifest))


def train_config(args, base: dict | None = None) -> TrainConfig:
    """Built-in defaults < ``--config`` file < explicit flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CommandError(f"{args.config}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise CommandError(f"{args.config}: unknown settings {sorted(unknown)}")
        values.update(loaded)
    for flag, field in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, MetaPathError) as exc:
        raise CommandError(str(exc)) from exc


def _dataset(args) -> Dataset:
    return load_dataset(args.data, args.threshold, args.seed)


def _finite_report(report) -> None:
    for row in report.rows():
        for k in ("auc", "f1", "smv", "smv_users"):
            if row[k] is not None and not math.isfinite(row[k]):
                raise CommandError(f"non-finite {k} in report {row['label']!r}")


def _train_into(out: Path, config: TrainConfig, ds: Dataset) -> tuple[list[Path], object]:
    result = train(config, ds)
    ckpt = out / "checkpoint.txt"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, ckpt)
    cfg = _write(out / "config.json", _json(config.to_dict()))
    logf = _write(out / "train_log.tsv", result.log_tsv())
    return [ckpt, cfg, logf], result


def _load_run(run: Path, ds: Dataset):
    try:
        config = TrainConfig.from_dict(json.loads((run / "config.json").read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise CommandError(f"{run}: not a training run directory ({exc.filename} missing)") from exc
    params = load_checkpoint(run / "checkpoint.txt")
    model = build_model(config, ds)
    expected = model.init_params(np.random.default_rng(0)).named()
    got = params.named()
    if set(expected) != set(got) or any(expected[k].shape != got[k].shape for k in expected):
        raise CommandError(f"{run}: checkpoint does not match the dataset/configuration")
    return config, model, params


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, argv):
    spec = SynthSpec(n_users=args.users, n_items=args.items, n_entities=args.entities,
                     n_relations=args.relations, n_clusters=args.clusters, noise=args.noise)
    ds = synth_generate(spec, args.seed)
    files = save_dataset(ds, args.out)
    write_manifest(args.out, "synth", argv, args.seed, files, asdict(spec), ds.fingerprint())


def _parse_anchor(text: str) -> NodeRef:
    kinds = {"U": Kind.USER, "I": Kind.ITEM, "E": Kind.ENTITY}
    if len(text) < 2 or text[0] not in kinds or not text[1:].isdigit():
        raise CommandError(f"bad anchor {text!r}; expected kind letter plus index, e.g. U3")
    return NodeRef(kinds[text[0]], int(text[1:]))


def cmd_paths(args, argv):
    ds = _dataset(args)
    g = ds.unified()
    out: Path = args.out
    files, summary = [], ["metapath\tinstances\tedges\tnodes"]
    anchor = _parse_anchor(args.anchor) if args.anchor else None
    for name in args.metapaths:
        m = parse_metapath(name)
        sub = build_subgraph(g, m)
        touched = int(np.count_nonzero(sub.degrees))
        summary.append(f"{name}\t{sub.instance_count}\t{len(sub.edges)}\t{touched}")
        rows = ["node_a\tnode_b"] + [f"{a}\t{b}" for a, b in sub.edge_refs(g)]
        files.append(_write(out / f"subgraph_{name}.tsv", "\n".join(rows) + "\n"))
        if anchor is not None and anchor.kind is m.anchor:
            lines = ["\t".join(f"n{k}" for k in range(m.length + 1))]
            lines += ["\t".join(str(n) for n in inst.nodes) for inst in iter_instances(g, m, anchor, args.budget)]
            files.append(_write(out / f"instances_{name}_{args.anchor}.tsv", "\n".join(lines) + "\n"))
    files.append(_write(out / "paths.tsv", "\n".join(summary) + "\n"))
    write_manifest(out, "paths", argv, args.seed, files, dict(metapaths=args.metapaths, anchor=args.anchor),
                   ds.fingerprint())


def cmd_stats(args, argv):
    ds = _dataset(args)
    if args.max_hop < 1:
        raise CommandError("--max-hop must be >= 1")
    counts = hop_neighbor_stats(ds.unified(), args.max_hop, args.hop_mode)
    rows = ["hop\tmean_neighbors"] + [f"{k}\t{c!r}" for k, c in enumerate(counts, 1)]
    f = _write(args.out / "hops.tsv", "\n".join(rows) + "\n")
    write_manifest(args.out, "stats", argv, args.seed, [f], dict(max_hop=args.max_hop, mode=args.hop_mode),
                   ds.fingerprint())


def cmd_train(args, argv):
    ds = _dataset(args)
    config = train_config(args)
    files, _ = _train_into(args.out, config, ds)
    write_manifest(args.out, "train", argv, args.seed, files, config.to_dict(), ds.fingerprint())


def cmd_eval(args, argv):
    ds = _dataset(args)
    config, model, params = _load_run(args.run, ds)
    if args.mode == "high_only" and (config.disable_high or config.recursive_depth):
        raise CommandError("high_only needs a run with the high-order encoder")
    report = evaluate(model, params, ds, args.split, args.mode, args.strata)
    _finite_report(report)
    rows = ds.splits[args.split]
    scores = model.score_pairs(params, rows[:, 0], rows[:, 1], args.mode)
    out: Path = args.out
    files = [_write(out / "eval.tsv", report.to_tsv()), _write(out / "eval.jsonl", report.to_jsonl()),
             _write(out / "scores.tsv", "user\titem\tlabel\tscore\n"
                    + "".join(f"{u}\t{i}\t{y}\t{s!r}\n" for (u, i, y), s in zip(rows.tolist(), scores.tolist())))]
    write_manifest(out, "eval", argv, args.seed, files,
                   dict(run=str(args.run), mode=args.mode, split=args.split, strata=args.strata,
                        train=config.to_dict()), ds.fingerprint())


def _sweep_point(out: Path, config: TrainConfig, ds: Dataset):
    files, result = _train_into(out, config, ds)
    report = evaluate(result.model, result.params, ds, "test", config.predict_mode)
    _finite_report(report)
    files += [_write(out / "eval.tsv", report.to_tsv()), _write(out / "eval.jsonl", report.to_jsonl())]
    return files, report


def _lam_dir(lam: float) -> str:
    return f"lambda_{lam!r}"


def _sweep_job(payload):
    out, cfg, data, threshold = payload
    ds = load_dataset(data, threshold, cfg["seed"])
    files, report = _sweep_point(Path(out), TrainConfig.from_dict(cfg), ds)
    return [str(f) for f in files], report.auc, report.f1, report.smv


def cmd_sweep(args, argv):
    ds = _dataset(args)
    base = train_config(args)
    grid = [base.__class__.from_dict({**base.to_dict(), "lam": lam}) for lam in args.lam_grid]
    out: Path = args.out
    jobs = [(str(out / _lam_dir(c.lam)), c.to_dict(), str(args.data), args.threshold) for c in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = []
        for (o, _, _, _), c in zip(jobs, grid):
            files, rep = _sweep_point(Path(o), c, ds)
            results.append(([str(f) for f in files], rep.auc, rep.f1, rep.smv))
    files = [Path(f) for r in results for f in r[0]]
    rows = ["lambda\tauc\tf1\tsmv"] + [f"{c.lam!r}\t{a!r}\t{f!r}\t{s!r}" for c, (_, a, f, s) in zip(grid, results)]
    files.append(_write(out / "sweep.tsv", "\n".join(rows) + "\n"))
    write_manifest(out, "sweep", argv, args.seed, files,
                   dict(base=base.to_dict(), lambdas=list(args.lam_grid)), ds.fingerprint())


def cmd_smoothness(args, argv):
    ds = _dataset(args)
    # parents share action objects, so the depth default lives here rather than in set_defaults
    depth = 6 if args.recursive_depth is None else args.recursive_depth
    args.recursive_depth = None
    hier = train_config(args)
    if depth < 1:
        raise CommandError("--recursive-depth must be >= 1")
    rec = TrainConfig.from_dict({**hier.to_dict(), "recursive_depth": depth, "predict_mode": "full"})
    out: Path = args.out
    files, rows = [], ["variant\tdepth\tauc\tf1\tsmv\tsmv_users"]
    for name, cfg in (("hierarchical", hier), ("recursive", rec)):
        f, report = _sweep_point(out / name, cfg, ds)
        files += f
        rows.append(f"{name}\t{cfg.recursive_depth or ''}\t{report.auc!r}\t{report.f1!r}"
                    f"\t{report.smv!r}\t{report.smv_users!r}")
    files.append(_write(out / "smoothness.tsv", "\n".join(rows) + "\n"))
    write_manifest(out, "smoothness", argv, args.seed, files,
                   dict(hierarchical=hier.to_dict(), recursive=rec.to_dict()), ds.fingerprint())


def cmd_density(args, argv):
    ds = _dataset(args)
    config, model, params = _load_run(args.run, ds)
    reps = model.represent(params)
    table = angle_density_export(node_representations(reps, args.mode), bins=args.bins)
    f = _write(args.out / "density.csv", density_csv(table))
    write_manifest(args.out, "density", argv, args.seed, [f],
                   dict(run=str(args.run), mode=args.mode, bins=args.bins, train=config.to_dict()),
                   ds.fingerprint())


HANDLERS = {"synth": cmd_synth, "paths": cmd_paths, "stats": cmd_stats, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "smoothness": cmd_smoothness, "density": cmd_density}

# errors reported as a one-line message with exit status 1
HANDLED = (CommandError, OSError, DataFormatError, GraphError, MetaPathError, BudgetExceeded, TrainingError,
           ContractError, NumericalError, MetricError, DegenerateExportError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args, argv)
    except HANDLED as exc:
        print(f"hicon {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
