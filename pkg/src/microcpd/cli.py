"""Command-line entry point: featurize, voxelize, train, predict, evaluate, analyze.

Every artifact carries a provenance stamp (tool version, config hash, seed)
and is written atomically. Failures print one line::

    error code=<name> msg=<text>

and exit with a code from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import correlation_report, structures_from_rows
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import (
    ConfigError,
    FileFormatError,
    MicroCPDError,
    TrainingDivergedError,
    VersionMismatchError,
)
from .features import ElementClass, featurize, load_charge_table, load_radii_table
from .io_utils import atomic_write_bytes, atomic_write_text, csv_comment, dump_json, provenance
from .metrics import ranked_classes
from .network import ModelConfig
from .structure import AMINO_ACIDS, extract_sites, read_structure, sample_sites, select_chains
from .training import TrainConfig, build_dataset, evaluate, format_history, predict, train
from .voxel import EMOG_MAGIC, GridDataset, GridSpec, VoxelizeReport, encode_grid_dataset, read_grid_dataset, voxelize_sites

log = logging.getLogger("microcpd")

EXIT_CODES = {
    "usage": 2,
    "unreadable_input": 3,
    "version_mismatch": 4,
    "bad_format": 5,
    "invalid_data": 6,
    "diverged": 7,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _chains(text):
    return {c for c in text.split(",") if c} if text else None


def _require_readable(paths):
    for p in paths:
        if not os.path.isfile(p) or not os.access(p, os.R_OK):
            raise FileNotFoundError(f"cannot read {p}")


def _require_writable(path):
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory {directory} does not exist")


def _load_grids(paths) -> GridDataset:
    """Grid files are read directly; anything else is treated as a manifest."""
    parts = []
    for p in paths:
        with open(p, "rb") as fh:
            magic = fh.read(4)
        parts.append(read_grid_dataset(p) if magic == EMOG_MAGIC else build_dataset(p))
    return GridDataset.concatenate(parts)


def _tables(args):
    """Charge and radius tables, from --charges / --radii when given."""
    for p in (args.charges, args.radii):
        if p:
            _require_readable([p])
    return load_charge_table(args.charges), load_radii_table(args.radii)


def _structure_id(site_id: str) -> str:
    return site_id.rsplit(":", 2)[0]


# -- subcommands ----------------------------------------------------------


def cmd_featurize(args):
    _require_readable([args.input])
    _require_writable(args.output)
    settings = {"command": "featurize", "probe_radius": args.probe_radius, "n_points": args.n_points,
                "chains": sorted(_chains(args.chains) or []), "charges": args.charges, "radii": args.radii}
    model = read_structure(args.input, include_hetero=args.include_hetero)
    if args.chains:
        model = select_chains(model, _chains(args.chains))
    charges, radii = _tables(args)
    feats = featurize(model, charges, radii, args.probe_radius, args.n_points)
    buf = io.StringIO()
    buf.write(csv_comment(provenance(settings, None)))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["serial", "element", "name", "residue", "chain", "seq", "icode",
                "C", "N", "O", "S", "H", "charge", "sasa"])
    for atom_id, row in zip(feats.atom_ids, feats.values):
        a = model.atoms[atom_id]
        element = ElementClass(int(np.argmax(row[:5]))).name
        w.writerow([a.serial, element, a.name, a.residue_name, a.chain_id, a.residue_seq, a.insertion_code or ""]
                   + [repr(float(v)) for v in row])
    atomic_write_text(args.output, buf.getvalue())
    log.info("featurized %d atoms", len(feats))


def cmd_voxelize(args):
    _require_readable(args.inputs)
    _require_writable(args.output)
    settings = {"command": "voxelize", "probe_radius": args.probe_radius, "n_points": args.n_points,
                "chains": sorted(_chains(args.chains) or []), "sample_threshold": args.sample_threshold,
                "sample_cap": args.sample_cap, "include_hetero": args.include_hetero,
                "charges": args.charges, "radii": args.radii}
    charges, radii = _tables(args)
    parts, report = [], VoxelizeReport()
    for k, path in enumerate(args.inputs):
        model = read_structure(path, include_hetero=args.include_hetero)
        if args.chains:
            model = select_chains(model, _chains(args.chains))
        sites = sample_sites(extract_sites(model), args.sample_threshold, args.sample_cap,
                             seed=np.random.default_rng([args.seed, k]))
        feats = featurize(model, charges, radii, args.probe_radius, args.n_points)
        parts.append(GridDataset.from_grids(voxelize_sites(model, feats, sites, GridSpec(), report)))
    data = GridDataset.concatenate(parts)
    data.metadata = {"provenance": provenance(settings, args.seed), "frame_failures": report.frame_failures}
    atomic_write_bytes(args.output, encode_grid_dataset(data))
    log.info("wrote %d grids (%d sites skipped)", len(data), report.frame_failures)


def _train_config(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        _require_readable([args.config])
        with open(args.config, encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from None
        model_overrides = loaded.pop("model", {})
        base.update(loaded)
        base["model"].update(model_overrides)
    for key in ("lr", "weight_decay", "batch_size", "epochs", "max_steps", "val_every", "seed",
                "stop_at_train_accuracy"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    return TrainConfig.from_dict(base)


def cmd_train(args):
    _require_readable(args.train + (args.val or []))
    _require_writable(args.output)
    cfg = _train_config(args)
    train_set = _load_grids(args.train)
    val_set = _load_grids(args.val) if args.val else None
    result = train(cfg, train_set, val_set, on_step=lambda r: log.debug("step %d loss %.6f acc %.4f", r.step, r.train_loss, r.train_acc))
    result.model.load_state_dict(result.best_state)
    prov = provenance(cfg.to_dict(), cfg.seed)
    save_checkpoint(result.model, args.output, {**prov, "best_step": result.best_step})
    if args.history:
        _require_writable(args.history)
        atomic_write_text(args.history, format_history(result.history, csv_comment(prov)))
    last = result.history[-1]
    log.info("trained %d steps; final loss %.4f, train accuracy %.4f", last.step, last.train_loss, last.train_acc)


def cmd_predict(args):
    _require_readable([args.checkpoint] + args.data)
    _require_writable(args.output)
    if args.topk is not None and not 1 <= args.topk <= 20:
        raise UsageError("--topk must lie in [1, 20]")
    model, header = load_checkpoint(args.checkpoint)
    data = _load_grids(args.data)
    probs = predict(model, data.values, args.batch_size)
    ranks = ranked_classes(probs)
    settings = {"command": "predict", "checkpoint": header.get("provenance", {}).get("config_hash"), "topk": args.topk}
    buf = io.StringIO()
    buf.write(csv_comment(provenance(settings, header.get("provenance", {}).get("seed"))))
    w = csv.writer(buf, lineterminator="\n")
    cols = ["site_id", "structure_id", "true_class", "predicted_class"] + [f"p_{a}" for a in AMINO_ACIDS]
    k = args.topk or 0
    cols += [f"rank{i + 1}" for i in range(k)]
    w.writerow(cols)
    for sid, label, p, order in zip(data.site_ids, data.labels, probs, ranks):
        row = [sid, _structure_id(sid), AMINO_ACIDS[label], AMINO_ACIDS[order[0]]] + [repr(float(v)) for v in p]
        row += [f"{AMINO_ACIDS[c]}:{float(p[c])!r}" for c in order[:k]]
        w.writerow(row)
    atomic_write_text(args.output, buf.getvalue())


def cmd_evaluate(args):
    _require_readable([args.checkpoint] + args.data)
    _require_writable(args.output)
    model, header = load_checkpoint(args.checkpoint)
    data = _load_grids(args.data)
    report = evaluate(model, data, args.batch_size)
    prov = provenance({"command": "evaluate", "checkpoint": header.get("provenance", {}).get("config_hash")},
                      header.get("provenance", {}).get("seed"))
    atomic_write_text(args.output, dump_json({"provenance": prov, **report.to_dict()}))
    if args.confusion:
        _require_writable(args.confusion)
        buf = io.StringIO()
        buf.write(csv_comment(prov))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted"] + list(AMINO_ACIDS))
        for name, row in zip(AMINO_ACIDS, report.confusion):
            w.writerow([name] + [int(v) for v in row])
        atomic_write_text(args.confusion, buf.getvalue())
    log.info("accuracy %.4f on %d samples", report.accuracy, len(data))


def read_predictions(path) -> list:
    """(structure id, true class index, predicted class index) rows from a predictions CSV."""
    index = {a: i for i, a in enumerate(AMINO_ACIDS)}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        rows = []
        for n, rec in enumerate(reader, start=2):
            try:
                rows.append((rec["structure_id"], index[rec["true_class"]], index[rec["predicted_class"]]))
            except (KeyError, TypeError) as exc:
                raise FileFormatError(f"{path}: bad predictions row {n}: missing or unknown {exc}") from None
    return rows


def cmd_analyze(args):
    _require_readable([args.predictions])
    _require_writable(args.output)
    structures = structures_from_rows(read_predictions(args.predictions))
    report = correlation_report(structures, args.alpha, args.bin_width)
    prov = provenance({"command": "analyze", "alpha": args.alpha, "bin_width": args.bin_width}, None)
    atomic_write_text(args.output, dump_json({"provenance": prov, **report.to_dict()}))
    if args.scatter:
        _require_writable(args.scatter)
        buf = io.StringIO()
        buf.write(csv_comment(prov))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["structure_id", "accuracy", "negative", "positive", "neutral"])
        g = report.groups
        for k, s in enumerate(structures):
            w.writerow([s.structure_id, repr(s.accuracy)] + [repr(float(g[n].content[k])) for n in ("negative", "positive", "neutral")])
        atomic_write_text(args.scatter, buf.getvalue())
    if args.histogram:
        _require_writable(args.histogram)
        h = report.histogram
        buf = io.StringIO()
        buf.write(csv_comment(prov))
        buf.write("bin_start,bin_end,count\n")
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            buf.write(f"{lo:.6g},{hi:.6g},{int(c)}\n")
        atomic_write_text(args.histogram, buf.getvalue())


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="microcpd", description="Residue-type prediction from protein microenvironments.")
    p.add_argument("--version", action="version", version=f"microcpd {__version__}")
    p.add_argument("--dump-config", action="store_true", help="print the default training config as JSON and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def structure_opts(sp):
        sp.add_argument("--chains", help="comma-separated chain ids to keep")
        sp.add_argument("--include-hetero", action="store_true", help="also read HETATM records")
        sp.add_argument("--probe-radius", type=float, default=1.4)
        sp.add_argument("--n-points", type=int, default=960)
        sp.add_argument("--charges", help="partial-charge table replacing the shipped one")
        sp.add_argument("--radii", help="vdW radius table replacing the shipped one")

    sp = sub.add_parser("featurize", parents=[common], help="per-atom 7-dimensional features as CSV")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    structure_opts(sp)
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("voxelize", parents=[common], help="structures -> EMOG grid dataset")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--sample-threshold", type=int, default=200)
    sp.add_argument("--sample-cap", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    structure_opts(sp)
    sp.set_defaults(func=cmd_voxelize)

    sp = sub.add_parser("train", parents=[common], help="train a classifier checkpoint")
    sp.add_argument("--train", nargs="+", required=True, help="EMOG files or manifests")
    sp.add_argument("--val", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--config", help="JSON training config (see --dump-config)")
    sp.add_argument("--history", help="per-step history CSV")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--val-every", type=int)
    sp.add_argument("--stop-at-train-accuracy", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", parents=[common], help="class probabilities per site as CSV")
    sp.add_argument("data", nargs="+")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--topk", type=int, help="also emit the K most probable classes per site")
    sp.add_argument("--batch-size", type=int, default=150)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", parents=[common], help="accuracy, per-class metrics and top-k curve as JSON")
    sp.add_argument("data", nargs="+")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--confusion", help="confusion matrix CSV")
    sp.add_argument("--batch-size", type=int, default=150)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", parents=[common], help="accuracy-versus-composition correlation report")
    sp.add_argument("predictions")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--bin-width", type=float, default=0.01)
    sp.add_argument("--scatter", help="group content vs accuracy CSV")
    sp.add_argument("--histogram", help="accuracy histogram CSV")
    sp.set_defaults(func=cmd_analyze)
    return p


def _error(code: str, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"error code={code} msg={text}", file=sys.stderr)
    return EXIT_CODES[code]


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        if args.dump_config:
            sys.stdout.write(dump_json(TrainConfig().to_dict()))
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required")
        args.func(args)
        return 0
    except UsageError as exc:
        return _error("usage", exc)
    except TrainingDivergedError as exc:
        return _error("diverged", exc)
    except VersionMismatchError as exc:
        return _error("version_mismatch", exc)
    except FileFormatError as exc:
        return _error("bad_format", exc)
    except (MicroCPDError, ValueError) as exc:
        return _error("invalid_data", exc)
    except OSError as exc:
        return _error("unreadable_input", exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
