"""Command-line entry point: ``mptkit {generate-data,run-scenario,evaluate,plot-embeddings}``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime failure.
The default output directory comes from ``$MPTKIT_OUTPUT_DIR`` (else ``./mptkit-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, Dataset, SplitSpec, concentric_rings, gaussian_blobs, load_csv, partition_classes, save_csv
from .mathcore import ContractError, TrainingDiverged
from .metrics import UndefinedMetric
from .pipeline import CheckpointError, ConfigError, evaluate_update, load_checkpoint, load_config, run_scenario
from .report import (
    EmbeddingPlotSpec,
    ReportDocument,
    ReportValidationError,
    UnsupportedDimension,
    format_table,
    headline,
    plot_embeddings,
    plot_k_sweep,
    plot_method_summary,
    read_json,
    summary_csv,
    summary_rows,
    write_json,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ENV = "MPTKIT_OUTPUT_DIR"

log = logging.getLogger("mptkit")


class UsageError(Exception):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "mptkit-out"))


def resolve_config(ref: str) -> Path:
    """A config path, or the name of a bundled preset (``blobs-small``, ``presets/blobs-small``)."""
    p = Path(ref)
    if p.is_file():
        return p
    name = p.name[: -len(".yaml")] if p.name.endswith(".yaml") else p.name
    preset = resources.files("mptkit").joinpath("presets", f"{name}.yaml")
    if preset.is_file():
        return Path(str(preset))
    raise ConfigError([f"config {ref!r} is neither a file nor a bundled preset"])


def preset_names() -> list[str]:
    return sorted(f.name[:-5] for f in resources.files("mptkit").joinpath("presets").iterdir() if f.name.endswith(".yaml"))


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    out = Path(args.out) if args.out else default_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "blobs":
        params = dict(class_count=args.classes, n_train=args.n_train, n_test=args.n_test, dim=args.dim,
                      radius=args.radius, sigma=args.sigma, seed=args.seed)
        train, test = gaussian_blobs(**params)
    else:
        params = dict(class_count=args.classes, n_train=args.n_train, n_test=args.n_test, noise=args.noise,
                      seed=args.seed, radius_step=args.radius_step)
        train, test = concentric_rings(**params)
    save_csv(train, out / "train.csv", header=args.header)
    save_csv(test, out / "test.csv", header=args.header)
    manifest = {"generator": args.kind, "params": params, "header": args.header,
                "files": {"train": "train.csv", "test": "test.csv"}, "toolkit_version": __version__}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return EXIT_OK


def _write_outputs(doc: dict, result, out: Path) -> None:
    rows = summary_rows(doc)
    (out / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    plot_method_summary(doc, figs / "methods.svg")
    plot_k_sweep(doc, figs / "k_sweep.svg")
    cfg = result.config
    if cfg.embedding_dim == 2 and result.data is not None:
        seed = cfg.seeds[0]
        panels = [("Old model", result.checkpoints.get((seed, "old")))]
        panels += [(m.name, result.checkpoints.get((seed, m.name))) for m in cfg.methods if "@k=" not in m.name]
        panels = [(t, c) for t, c in panels if c is not None]
        test = result.data.test
        embeddings = [c.embeddings(test.features) for _, c in panels]
        plot_embeddings(embeddings, test.labels, figs / f"embeddings_seed{seed}.svg",
                        EmbeddingPlotSpec(titles=[t for t, _ in panels]))


def cmd_run_scenario(args) -> int:
    path = resolve_config(args.config)
    cfg = load_config(path)
    out = Path(args.out) if args.out else default_output_dir() / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = run_scenario(cfg, out_dir=out, resume=args.resume, progress=progress)
    doc = ReportDocument.from_result(result).to_dict()
    write_json(doc, out / "report.json", "scenario_report")
    # the summary is rendered from the file just written so both views share one source
    doc = read_json(out / "report.json", "scenario_report")
    _write_outputs(doc, result, out)
    print(format_table(summary_rows(doc)))
    failed = [r for r in doc["runs"] if r["status"] == "failed"]
    for r in failed:
        print(f"FAILED {r['label']} seed {r['seed']}: {r['error']}", file=sys.stderr)
    print(f"report: {out / 'report.json'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _load_test(args) -> Dataset:
    test = load_csv(args.test, class_count=args.classes, header=args.header, split="test")
    if args.standardize_from:
        train = load_csv(args.standardize_from, class_count=test.class_count, header=args.header)
        mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
        sd[sd == 0] = 1.0
        test = Dataset((test.features - mu) / sd, test.labels, test.class_count, "test")
    return test


def cmd_evaluate(args) -> int:
    old = load_checkpoint(args.old)
    new = load_checkpoint(args.new)
    test = _load_test(args)
    partition = partition_classes(test.class_count, SplitSpec(args.old_fraction, args.split_seed, args.split_rule))
    report = evaluate_update(old, new, test, partition, keep_records=True).to_dict(include_records=True)
    out = Path(args.out) if args.out else default_output_dir() / "update_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(report, out, "update_report")
    print(headline(read_json(out, "update_report")))
    print(f"report: {out}")
    return EXIT_OK


def cmd_plot_embeddings(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoints]
    for p, c in zip(args.checkpoints, ckpts):
        if c.arch.embedding_dim != 2:
            raise UnsupportedDimension(f"{p}: embedding dimension is {c.arch.embedding_dim}, plots need 2")
    test = _load_test(args)
    titles = args.titles or [c.label or Path(p).stem for p, c in zip(args.checkpoints, ckpts)]
    if len(titles) != len(ckpts):
        raise UsageError("--titles needs one title per checkpoint")
    limits = None
    if args.bounds == "fixed":
        if args.limits is None:
            raise UsageError("--bounds fixed requires --limits XMIN XMAX YMIN YMAX")
        limits = tuple(args.limits)
    spec = EmbeddingPlotSpec(point_size=args.point_size, bounds=args.bounds, limits=limits, titles=titles)
    out = Path(args.out) if args.out else default_output_dir() / "embeddings.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_embeddings([c.embeddings(test.features) for c in ckpts], test.labels, out, spec)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_test_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--test", required=True, help="test CSV (feature columns then integer label)")
    p.add_argument("--classes", type=int, default=None, help="class count (default: max label + 1)")
    p.add_argument("--header", action="store_true", help="CSV has a header line")
    p.add_argument("--standardize-from", metavar="TRAIN_CSV",
                   help="standardize features with this training file's statistics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mptkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mptkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write synthetic train/test CSV files and a manifest")
    g.add_argument("kind", choices=("blobs", "rings"))
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--n-train", type=int, default=100, help="training samples per class")
    g.add_argument("--n-test", type=int, default=100, help="test samples per class")
    g.add_argument("--dim", type=int, default=2, help="feature dimension (blobs)")
    g.add_argument("--radius", type=float, default=4.0, help="circle radius of class means (blobs)")
    g.add_argument("--sigma", type=float, default=0.5, help="isotropic noise (blobs)")
    g.add_argument("--noise", type=float, default=0.1, help="radial noise (rings)")
    g.add_argument("--radius-step", type=float, default=1.0, help="ring spacing (rings)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--header", action="store_true", help="write a header line")
    g.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./mptkit-out)")
    g.set_defaults(func=cmd_generate_data)

    r = sub.add_parser("run-scenario", help="train old/reference/updated models and report flip metrics")
    r.add_argument("config", help=f"YAML scenario file or preset name ({', '.join(preset_names())})")
    r.add_argument("--out", help="output directory (default $MPTKIT_OUTPUT_DIR/<scenario name>)")
    r.add_argument("--resume", action="store_true", help="skip runs whose reports already exist")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run_scenario)

    e = sub.add_parser("evaluate", help="compare an updated checkpoint against an old one")
    e.add_argument("--old", required=True, help="old-model checkpoint")
    e.add_argument("--new", required=True, help="updated-model checkpoint")
    _add_test_args(e)
    e.add_argument("--old-fraction", type=float, default=0.5)
    e.add_argument("--split-rule", choices=("prefix", "shuffle"), default="prefix")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--out", help="output JSON path")
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot-embeddings", help="SVG scatter of 2-D embeddings, one panel per checkpoint")
    pl.add_argument("checkpoints", nargs="+")
    _add_test_args(pl)
    pl.add_argument("--titles", nargs="+")
    pl.add_argument("--point-size", type=float, default=8.0)
    pl.add_argument("--bounds", choices=("auto", "fixed"), default="auto")
    pl.add_argument("--limits", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    pl.add_argument("--out", help="output SVG path")
    pl.set_defaults(func=cmd_plot_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ContractError, CheckpointError, DataFormatError, ReportValidationError, UnsupportedDimension,
            UndefinedMetric) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
