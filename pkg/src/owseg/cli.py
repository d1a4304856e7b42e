"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``ablate`` and ``report``.

Every command writes a ``manifest.json`` next to its outputs with the
resolved configuration, its hash, the seed and the package version. Outputs
go under ``$OWSEG_OUTPUT_ROOT`` (default ``./runs``) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import SHAPE_FAMILIES, CategorySplit, SceneSpec, generate_synthetic, load_coco, \
    save_dataset
from .evaluation import EvalConfig
from .model import ModelConfig, load_checkpoint
from .trainer import PRESETS, TrainConfig, evaluate_model, preset, train

logger = logging.getLogger("owseg")

OUTPUT_ROOT_ENV = "OWSEG_OUTPUT_ROOT"
VARIANTS = ("void", "cls", "box", "mask", "fusion")
METRIC_COLUMNS = ("AR_box", "AR", "AR_0.5", "AR_0.75", "AR_small", "AR_med", "AR_large")
VARIANT_TABLE_COLUMNS = ("method",) + METRIC_COLUMNS
NECK_TABLE_COLUMNS = ("DCN", "BiFPN") + METRIC_COLUMNS
CONFIG_SECTIONS = ("model", "train", "data", "eval")


class CliError(Exception):
    """A user-facing error; reported without a traceback and exits with status 2."""


# --------------------------------------------------------------------------
# helpers


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": config, "config_hash": config_hash(config),
                "seed": seed, "version": __version__}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml
        try:
            cfg = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise CliError(f"{p}: invalid YAML ({err})") from err
    else:
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as err:
            raise CliError(f"{p}: invalid JSON ({err})") from err
    if not isinstance(cfg, dict):
        raise CliError(f"{p}: top level must be a mapping")
    unknown = sorted(set(cfg) - set(CONFIG_SECTIONS))
    if unknown:
        raise CliError(f"unknown config section(s): {', '.join(unknown)}")
    return cfg


def _build(cls, section: str, values: dict):
    try:
        return cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
    except KeyError as err:
        raise CliError(f"[{section}] {err.args[0]}") from err
    except TypeError as err:
        raise CliError(f"[{section}] {err}") from err
    except (ValueError, NotImplementedError) as err:
        raise CliError(f"[{section}] {err}") from err


def resolve_run_config(args) -> tuple[ModelConfig, TrainConfig]:
    """Merge preset, config file and flags (later wins) into model and train configs."""
    file_cfg = load_config_file(args.config)
    model_d = dict(file_cfg.get("model", {}))
    train_d: dict = {}
    if args.preset:
        train_d.update(preset(args.preset).to_dict())
    train_d.update(file_cfg.get("train", {}))
    if args.variant:
        model_d["variant"] = args.variant
    if args.queries is not None:
        model_d["num_queries"] = args.queries
    if args.seed is not None:
        train_d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        scaled = preset(args.preset or "1x", epochs=args.epochs)
        train_d["epochs"] = scaled.epochs
        train_d["decay_epochs"] = list(scaled.decay_epochs)
    model_cfg = _build(ModelConfig, "model", model_d)
    train_cfg = _build(TrainConfig, "train", train_d)
    return model_cfg, train_cfg


def load_data_dir(data_dir: str | Path, supervision: str = "all"):
    d = Path(data_dir)
    ann = d / "annotations.json"
    if not ann.is_file():
        raise CliError(f"no annotations.json in {d}")
    split = None
    if (d / "split.json").is_file():
        s = json.loads((d / "split.json").read_text())
        split = CategorySplit(frozenset(s["base_ids"]), frozenset(s["novel_ids"]))
    try:
        return load_coco(ann, split, supervision if split else "all", image_root=d)
    except (ValueError, FileNotFoundError) as err:
        raise CliError(str(err)) from err


def budgets_for(k: int) -> tuple[int, ...]:
    if k < 1:
        raise CliError("--budget must be >= 1")
    return tuple(sorted({min(10, k), k}))


def evaluate_both(model, dataset, protocol: str, budget: int, out: Path | None):
    """Box and mask reports; predictions are written once beside them."""
    reports = {}
    for mode in ("box", "mask"):
        cfg = EvalConfig(budgets=budgets_for(budget), mode=mode, protocol=protocol)
        reports[mode] = evaluate_model(model, dataset, cfg, out if mode == "box" else None)
    return reports


def metric_row(reports: dict, budget: int) -> dict:
    box, mask = reports["box"], reports["mask"]
    return {"AR_box": box.ar[budget], "AR": mask.ar[budget], "AR_0.5": mask.ar_50,
            "AR_0.75": mask.ar_75, "AR_small": mask.ar_size["small"],
            "AR_med": mask.ar_size["medium"], "AR_large": mask.ar_size["large"]}


def write_table(rows: list[dict], columns: tuple[str, ...], path_stem: Path) -> None:
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    with open(path_stem.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns) + ["status"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k))
                             for k in list(columns) + ["status"]})
    path_stem.with_suffix(".json").write_text(
        json.dumps({"columns": list(columns), "rows": rows}, sort_keys=True, indent=2) + "\n")


def format_table(columns, rows) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{100 * v:.1f}"
        return str(v)

    lines = ["| " + " | ".join(list(columns) + ["status"]) + " |",
             "|" + "---|" * (len(columns) + 1)]
    for r in rows:
        lines.append("| " + " | ".join(cell(r.get(c)) for c in list(columns) + ["status"]) + " |")
    return "\n".join(lines)


def plot_table(rows: list[dict], label_fn, path: Path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig, ax = plt.subplots(figsize=(9, 3.5))
    x = np.arange(len(METRIC_COLUMNS))
    width = 0.8 / max(1, len(rows))
    for i, r in enumerate(rows):
        vals = [100 * r[c] if isinstance(r.get(c), float) else 0.0 for c in METRIC_COLUMNS]
        ax.bar(x + i * width, vals, width, label=label_fn(r))
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(METRIC_COLUMNS)
    ax.set_ylabel("AR (%)")
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    # a fixed metadata block keeps repeated renders byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def render_report(table_json: Path) -> str:
    data = json.loads(table_json.read_text())
    cols, rows = tuple(data["columns"]), data["rows"]
    if cols[0] == "method":
        label, title = (lambda r: r["method"]), "objectness variants"
    else:
        label, title = (lambda r: f"DCN={r['DCN']} BiFPN={r['BiFPN']}"), "modules"
    plot_table(rows, label, table_json.with_suffix(".png"), title)
    md = format_table(cols, rows)
    table_json.with_suffix(".md").write_text(md + "\n")
    return md


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    novel = [f for f in (args.novel or "").split(",") if f]
    spec = SceneSpec(image_size=(args.image_size, args.image_size), seed=args.seed,
                     max_shapes=args.max_shapes)
    try:
        split = spec.split_by_family(novel) if novel else None
    except ValueError as err:
        raise CliError(str(err)) from err
    if args.num_images < 1:
        raise CliError("--num-images must be >= 1")
    out = Path(args.out) if args.out else output_root() / "data"
    ds = generate_synthetic(spec, args.num_images, split)
    save_dataset(ds, out)
    if split is not None:
        (out / "split.json").write_text(json.dumps(
            {"base_ids": sorted(split.base_ids), "novel_ids": sorted(split.novel_ids)},
            sort_keys=True) + "\n")
    cfg = {"num_images": args.num_images, "image_size": args.image_size,
           "max_shapes": args.max_shapes, "novel": novel, "seed": args.seed}
    write_manifest(out, "gen-data", cfg, args.seed)
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_run_config(args)
    dataset = load_data_dir(args.data, "base_only")
    out = Path(args.out) if args.out else output_root() / "train"
    cfg = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
           "data": str(args.data), "max_steps": args.max_steps}
    write_manifest(out, "train", cfg, train_cfg.seed)
    (out / "config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                   sort_keys=True, indent=2) + "\n")
    try:
        res = train(model_cfg, train_cfg, dataset, out, max_steps=args.max_steps)
    except ValueError as err:
        raise CliError(str(err)) from err
    last = res.metrics[-1]["total"] if res.metrics else float("nan")
    print(f"trained {len(res.metrics)} steps, final loss {last:.4f}; run dir {out}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    ckpt = run / "checkpoint.bin"
    if not ckpt.is_file():
        raise CliError(f"no checkpoint.bin in {run}")
    try:
        model, _ = load_checkpoint(ckpt)
    except ValueError as err:
        raise CliError(str(err)) from err
    dataset = load_data_dir(args.data)
    protocol = args.protocol.replace("-", "_")
    out = Path(args.out) if args.out else run / f"eval_{protocol}"
    write_manifest(out, "eval", {"run": str(run), "data": str(args.data),
                                 "protocol": protocol, "budget": args.budget}, args.seed or 0)
    reports = evaluate_both(model, dataset, protocol, args.budget, out)
    for mode, r in reports.items():
        (out / f"report_{mode}.json").write_text(r.to_json() + "\n")
        (out / f"report_{mode}.csv").write_text(r.to_csv_row(run=str(run)))
    row = metric_row(reports, args.budget) if not reports["box"].empty else {}
    print(json.dumps({k: row.get(k) for k in METRIC_COLUMNS}, sort_keys=False))
    return 0


def _run_cell(name, model_cfg, train_cfg, dataset, eval_data, out, max_steps, protocol, budget):
    row = {"status": "ok"}
    try:
        cell_dir = out / "cells" / name
        write_manifest(cell_dir, "ablate-cell", {"model": model_cfg.to_dict(),
                                                 "train": train_cfg.to_dict(),
                                                 "max_steps": max_steps}, train_cfg.seed)
        res = train(model_cfg, train_cfg, dataset, cell_dir, max_steps=max_steps)
        reports = evaluate_both(res.model, eval_data, protocol, budget, cell_dir)
        for mode, r in reports.items():
            (cell_dir / f"report_{mode}.json").write_text(r.to_json() + "\n")
        row.update(metric_row(reports, budget))
    except Exception as err:  # a failing cell must not stop the suite
        logger.error("cell %s failed: %s", name, err)
        row = {"status": f"failed: {type(err).__name__}: {err}"}
    return row


def cmd_ablate(args) -> int:
    base_model, train_cfg = resolve_run_config(args)
    dataset = load_data_dir(args.data, "base_only")
    eval_data = load_data_dir(args.data)
    protocol = args.protocol.replace("-", "_")
    out = Path(args.out) if args.out else output_root() / "ablate"
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variant(s): {', '.join(bad)}")
    axes = ("variant", "neck") if args.axis == "both" else (args.axis,)
    n_cells = (len(variants) if "variant" in axes else 0) + (2 if "neck" in axes else 0)
    if n_cells < 2:
        raise CliError("an ablation needs at least two cells")
    write_manifest(out, "ablate", {"model": base_model.to_dict(), "train": train_cfg.to_dict(),
                                   "variants": variants, "axes": list(axes),
                                   "max_steps": args.max_steps, "protocol": protocol,
                                   "budget": args.budget, "data": str(args.data)},
                   train_cfg.seed)
    tables = []
    if "variant" in axes:
        rows = []
        for v in variants:
            cfg = replace(base_model, variant=v)
            row = _run_cell(f"variant-{v}", cfg, train_cfg, dataset, eval_data, out,
                            args.max_steps, protocol, args.budget)
            rows.append({"method": v, **row})
        write_table(rows, VARIANT_TABLE_COLUMNS, out / "table_variants")
        tables.append(out / "table_variants.json")
    if "neck" in axes:
        rows = []
        for use_neck in (False, True):
            cfg = replace(base_model, use_neck=use_neck)
            row = _run_cell(f"neck-{'on' if use_neck else 'off'}", cfg, train_cfg, dataset,
                            eval_data, out, args.max_steps, protocol, args.budget)
            rows.append({"DCN": "", "BiFPN": "x" if use_neck else "", **row})
        write_table(rows, NECK_TABLE_COLUMNS, out / "table_neck")
        tables.append(out / "table_neck.json")
    for t in tables:
        print(render_report(t))
        print()
    return 0


def cmd_report(args) -> int:
    src = Path(args.input)
    tables = sorted(src.glob("table_*.json")) if src.is_dir() else [src]
    if not tables or not all(t.is_file() for t in tables):
        raise CliError(f"no ablation tables found at {src}")
    for t in tables:
        print(render_report(t))
        print()
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"owseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    g.add_argument("--out")
    g.add_argument("--num-images", type=int, default=16)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--max-shapes", type=int, default=4)
    g.add_argument("--novel", help=f"comma-separated novel families from {SHAPE_FAMILIES}")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def run_flags(sp):
        sp.add_argument("--data", required=True, help="directory with annotations.json")
        sp.add_argument("--config", help="JSON or YAML with model/train sections")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--epochs", type=int, help="stretch the preset to this many epochs")
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--queries", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train a model")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=("plain", "cross-category"), default="plain")
    e.add_argument("--budget", type=int, default=100)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="variant and neck ablation tables")
    run_flags(a)
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.add_argument("--axis", choices=("variant", "neck", "both"), default="both")
    a.add_argument("--protocol", choices=("plain", "cross-category"), default="plain")
    a.add_argument("--budget", type=int, default=100)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="render ablation tables and plots")
    r.add_argument("input", help="ablation output directory or a table JSON")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(f"owseg {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
