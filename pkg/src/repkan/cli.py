"""Command-line interface.

Subcommands: gen-data, train, eval, fuse, explain, distill. Machine-readable
results go to stdout as JSON; human-readable progress and tables go to
stderr, so commands compose in pipelines.

Run configuration is an INI file with sections [model], [train], [data],
[explain]; every key has a default (listed in each subcommand's --help) and
``--set section.key=value`` overrides file values from the command line.
Unknown keys are rejected.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 state error. The REPKAN_THREADS environment variable caps internal
(BLAS) parallelism; 0 or unset means automatic.
"""

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (MstdDataset, compute_band_stats, default_spectral_indices,
                   generate_synthetic, mstd_read, mstd_write, normalize,
                   rule_accuracy, split_dataset)
from .errors import (ConfigurationError, DataFormatError, DimensionError,
                     InputError, NumericError, RepKanError, StateError)
from .interpret import (curve_csv, energy_profile, energy_report_csv,
                        interaction_landscape, landscape_csv, reasoning_map,
                        sample_curve_with_distribution, select_expert_filters,
                        write_f32, write_pgm)
from .model import ModelConfig, RepKanModel
from .symbolic import ablation_csv, ablation_table
from .training import TrainConfig, evaluate, train_epochs, train_log_csv

FUSION_TOLERANCE = 1e-8
FUSION_PROBES = 50

# section -> key -> (default, parser, help)
CONFIG_SCHEMA = {
    "model": {
        "grid_size": ("3", "int", "spline grid intervals per edge function"),
        "spline_order": ("3", "int", "B-spline degree of the edge functions"),
        "stage_widths": ("32,64,128", "ints", "channels per stage, comma-separated"),
        "blocks_per_stage": ("1,1,1", "ints", "dual-path blocks per stage"),
    },
    "train": {
        "epochs": ("50", "int", "training epochs"),
        "batch_size": ("64", "int", "mini-batch size"),
        "lr": ("5e-4", "float", "peak learning rate"),
        "weight_decay": ("0.05", "float", "decoupled weight decay"),
        "warmup_epochs": ("5", "int", "linear warmup length"),
        "min_lr": ("1e-6", "float", "cosine annealing floor"),
        "seed": ("0", "int", "run seed (init, shuffling, augmentation)"),
        "augment": ("true", "bool", "random flip + pad-and-crop jitter"),
        "val_fraction": ("0.2", "float", "stratified validation split fraction"),
    },
    "data": {
        "normalize": ("true", "bool", "per-band standardization with training stats"),
    },
    "explain": {
        "stage": ("1", "int", "stage profiled by interpretability reports"),
        "energy_metric": ("l1", "str", "path energy metric: l1 or l2"),
        "n_points": ("200", "int", "activation-curve sample count"),
        "resolution": ("64", "int", "interaction-landscape grid resolution"),
        "n_samples": ("200", "int", "distillation sample count per edge"),
        "density_weighted": ("false", "bool", "weight distillation fits by data density"),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "1": True, "yes": True,
                       "false": False, "0": False, "no": False}[s.strip().lower()],
    "ints": lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
}


def _schema_epilog(sections) -> str:
    lines = ["configuration keys (file sections or --set overrides):"]
    for section in sections:
        for key, (default, _, help_text) in CONFIG_SCHEMA[section].items():
            lines.append(f"  {section}.{key} (default {default}): {help_text}")
    return "\n".join(lines)


def load_config(path=None, overrides=()):
    """Parse an INI run configuration, apply --set overrides, return a
    {section: {key: value}} dict with typed values and defaults filled in."""
    raw = {s: dict() for s in CONFIG_SCHEMA}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as f:
                parser.read_file(f)
        except FileNotFoundError:
            raise
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigurationError(f"{path}: unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigurationError(
                        f"{path}: unknown config key '{key}' in section [{section}]")
                raw[section][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
            raise ConfigurationError(f"--set: unknown config key '{dotted}'")
        raw[section][key] = value

    config = {}
    for section, keys in CONFIG_SCHEMA.items():
        config[section] = {}
        for key, (default, kind, _) in keys.items():
            text = raw[section].get(key, default)
            try:
                config[section][key] = _PARSERS[kind](text)
            except (ValueError, KeyError) as exc:
                raise ConfigurationError(
                    f"config {section}.{key}: cannot parse {text!r} as {kind}") from exc
    return config


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    dataset = generate_synthetic(args.classes, args.per_class, args.channels,
                                 args.size, args.size, seed=args.seed,
                                 noise=args.noise)
    mstd_write(dataset, args.out)
    red, nir = default_spectral_indices(args.channels)
    certificate = rule_accuracy(dataset, red, nir)
    _say(f"wrote {len(dataset)} samples ({args.classes} classes, "
         f"{args.channels}x{args.size}x{args.size}) to {args.out}")
    _say(f"separability certificate: closed-form index rule OA = {certificate:.4f}")
    _emit({"path": str(args.out), "n": len(dataset), "certificate_oa": certificate})
    return 0


def _banner(model: RepKanModel) -> None:
    cfg = model.config
    _say(f"model: widths={list(cfg.stage_widths)} blocks={list(cfg.blocks_per_stage)} "
         f"grid_size={cfg.grid_size} order={cfg.spline_order} classes={cfg.num_classes}")
    _say(f"parameters: total={model.param_count()} "
         f"spline={model.spline_param_count()} "
         f"(per block: out*in*(grid_size+order+2))")


def _load_and_normalize(data_path, ckpt):
    dataset = mstd_read(data_path)
    if ckpt.norm_stats is not None:
        dataset = normalize(dataset, ckpt.norm_stats)
    return dataset


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or ())
    dataset = mstd_read(args.data)
    mc, tc, dc = config["model"], config["train"], config["data"]
    train_set, val_set = split_dataset(dataset, tc["val_fraction"], tc["seed"])
    stats = None
    if dc["normalize"]:
        stats = compute_band_stats(train_set)
        train_set = normalize(train_set, stats)
        if len(val_set):
            val_set = normalize(val_set, stats)
    model_config = ModelConfig(
        in_channels=dataset.images.shape[1],
        stage_widths=mc["stage_widths"],
        blocks_per_stage=mc["blocks_per_stage"],
        grid_size=mc["grid_size"],
        spline_order=mc["spline_order"],
        num_classes=dataset.n_classes,
        input_hw=dataset.images.shape[2:],
    )
    model = RepKanModel(model_config, seed=tc["seed"])
    _banner(model)
    train_config = TrainConfig(
        epochs=tc["epochs"], batch_size=tc["batch_size"], lr=tc["lr"],
        weight_decay=tc["weight_decay"], warmup_epochs=tc["warmup_epochs"],
        min_lr=tc["min_lr"], seed=tc["seed"], augment=tc["augment"])
    history = train_epochs(model, train_set,
                           val_set if len(val_set) else None, train_config)
    for entry in history:
        _say(f"epoch {entry.epoch:3d}  lr {entry.lr:.3e}  loss {entry.train_loss:.4f}"
             f"  val_oa {entry.val_oa:.4f}")
    save_checkpoint(model, args.out_checkpoint, seed=tc["seed"], epoch=tc["epochs"],
                    class_names=dataset.class_names, norm_stats=stats)
    log_path = args.log_csv or str(args.out_checkpoint) + ".log.csv"
    Path(log_path).write_text(train_log_csv(history))
    final_oa = history[-1].val_oa if history else None
    _emit({"checkpoint": str(args.out_checkpoint), "log": str(log_path),
           "epochs": tc["epochs"], "final_val_oa": final_oa})
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_and_normalize(args.data, ckpt)
    report = evaluate(ckpt.model, dataset)
    _say(f"oa {report.overall_accuracy:.4f}  macro_p {report.macro_precision:.4f}  "
         f"macro_r {report.macro_recall:.4f}  macro_f1 {report.macro_f1:.4f}")
    _emit(report.to_dict())
    return 0


def cmd_fuse(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    fused = model.fuse()  # StateError if already deployed
    cfg = model.config
    probe_rng = rng_mod.stream(ckpt.seed, rng_mod.STREAM_PROBE)
    worst = 0.0
    for _ in range(FUSION_PROBES):
        batch = probe_rng.uniform(-2.0, 2.0,
                                  size=(4, cfg.in_channels, *cfg.input_hw))
        ref, _ = model.forward(batch, bn_mode="eval")
        out, _ = fused.forward(batch, bn_mode="eval")
        worst = max(worst, float(np.abs(ref - out).max()))
    reads_train = sum(b.spatial_param_reads() for blocks in model.stages for b in blocks)
    reads_deploy = sum(b.spatial_param_reads() for blocks in fused.stages for b in blocks)
    save_checkpoint(fused, args.out, seed=ckpt.seed, epoch=ckpt.epoch,
                    class_names=ckpt.class_names, norm_stats=ckpt.norm_stats)
    _say(f"fusion equivalence: max |deviation| = {worst:.3e} over "
         f"{FUSION_PROBES} probe batches (tolerance {FUSION_TOLERANCE:.0e})")
    _say(f"block kernel parameter reads: {reads_train} -> {reads_deploy}")
    _emit({"checkpoint": str(args.out), "max_abs_deviation": worst,
           "param_reads_train": reads_train, "param_reads_deploy": reads_deploy})
    if worst >= FUSION_TOLERANCE:
        _say("fusion deviation exceeds tolerance")
        return 4
    return 0


def cmd_explain(args) -> int:
    config = load_config(args.config, args.set or ())
    ec = config["explain"]
    stage = args.stage if args.stage is not None else ec["stage"]
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_and_normalize(args.data, ckpt)
    bands = _parse_bands(args.bands, dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    reports, warnings = energy_profile(ckpt.model, dataset, stage=stage,
                                       metric=ec["energy_metric"])
    for w in warnings:
        _say(f"warning: {w}")
    path = out_dir / "energy_report.csv"
    path.write_text(energy_report_csv(reports, metric=ec["energy_metric"]))
    written.append(path.name)

    experts, warnings = select_expert_filters(ckpt.model, dataset, stage=stage)
    for w in warnings:
        _say(f"warning: {w}")
    for expert in experts:
        for band in bands:
            sample = sample_curve_with_distribution(
                ckpt.model, dataset, band, expert, n_points=ec["n_points"])
            path = out_dir / f"curve_{expert.class_name}_{dataset.band_names[band]}.csv"
            path.write_text(curve_csv(sample))
            written.append(path.name)

    if len(bands) >= 2:
        expert = experts[0]
        xs, ys, z = interaction_landscape(ckpt.model, expert, bands[0], bands[1],
                                          resolution=ec["resolution"])
        path = (out_dir / f"landscape_{dataset.band_names[bands[0]]}_"
                          f"{dataset.band_names[bands[1]]}.csv")
        path.write_text(landscape_csv(xs, ys, z))
        written.append(path.name)

    for expert in experts:
        sel = np.nonzero(dataset.labels == expert.class_id)[0]
        amap = reasoning_map(ckpt.model, dataset.images[sel[0]], expert)
        for suffix, writer in ((".pgm", write_pgm), (".f32", write_f32)):
            path = out_dir / f"reasoning_{expert.class_name}{suffix}"
            writer(path, amap)
            written.append(path.name)

    _emit({"out_dir": str(out_dir), "files": written})
    return 0


def cmd_distill(args) -> int:
    config = load_config(args.config, args.set or ())
    ec = config["explain"]
    stage = args.stage if args.stage is not None else ec["stage"]
    n_samples = args.n_samples if args.n_samples is not None else ec["n_samples"]
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_and_normalize(args.data, ckpt)
    bands = _parse_bands(args.bands, dataset)
    rows = ablation_table(ckpt.model, dataset, bands, stage=stage,
                          n_samples=n_samples,
                          density_weighted=ec["density_weighted"])
    csv_text = ablation_csv(rows, band_names=dataset.band_names)
    Path(args.out).write_text(csv_text)
    _say(csv_text.rstrip("\n"))
    _emit({"path": str(args.out), "rows": len(rows)})
    return 0


def _parse_bands(band_arg, dataset: MstdDataset):
    if band_arg:
        bands = tuple(int(b) for b in band_arg.split(","))
    else:
        bands = default_spectral_indices(dataset.images.shape[1])
    for band in bands:
        if not 0 <= band < dataset.images.shape[1]:
            raise InputError(f"band {band} outside [0, {dataset.images.shape[1]})")
    return bands


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repkan",
        description="Train, fuse, evaluate, and interpret dual-path "
                    "spline-convolution classifiers on multispectral data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic planted-index MSTD dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--classes", type=int, default=4, help="number of classes (2..8)")
    p.add_argument("--per-class", type=int, default=125, help="samples per class")
    p.add_argument("--channels", type=int, default=13, help="spectral bands")
    p.add_argument("--size", type=int, default=16, help="square image size")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--noise", type=float, default=0.05, help="texture noise sigma")
    p.add_argument("--out", required=True, help="output MSTD path")
    p.set_defaults(func=cmd_gen_data)

    common_cfg = dict(formatter_class=argparse.RawDescriptionHelpFormatter)
    p = sub.add_parser("train", help="train a model on an MSTD dataset",
                       epilog=_schema_epilog(("model", "train", "data")), **common_cfg)
    p.add_argument("--config", default=None, help="INI run configuration (optional)")
    p.add_argument("--data", required=True, help="MSTD dataset path")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--log-csv", default=None,
                   help="training log CSV path (default: <checkpoint>.log.csv)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; metrics JSON on stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="MSTD dataset path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="fold branches into deploy form + equivalence report")
    p.add_argument("--checkpoint", required=True, help="train-mode checkpoint")
    p.add_argument("--out", required=True, help="fused checkpoint output path")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("explain", help="energy report, curves, landscape, reasoning maps",
                       epilog=_schema_epilog(("explain",)), **common_cfg)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="MSTD dataset path")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", type=int, default=None, help="override explain.stage")
    p.add_argument("--bands", default=None,
                   help="comma-separated band indices (default: red/nir pair)")
    p.add_argument("--config", default=None, help="INI run configuration (optional)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("distill", help="polynomial distillation table for expert edges",
                       epilog=_schema_epilog(("explain",)), **common_cfg)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="MSTD dataset path")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--bands", default=None,
                   help="comma-separated band indices (default: red/nir pair)")
    p.add_argument("--stage", type=int, default=None, help="override explain.stage")
    p.add_argument("--n-samples", type=int, default=None,
                   help="override explain.n_samples")
    p.add_argument("--config", default=None, help="INI run configuration (optional)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.set_defaults(func=cmd_distill)
    return parser


def _apply_thread_cap() -> None:
    value = os.environ.get("REPKAN_THREADS", "0")
    try:
        cap = int(value)
    except ValueError:
        raise ConfigurationError(f"REPKAN_THREADS must be an integer, got {value!r}")
    if cap > 0:
        import threadpoolctl
        global _thread_limiter
        _thread_limiter = threadpoolctl.threadpool_limits(limits=cap)


_thread_limiter = None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except ConfigurationError as exc:
        _say(f"configuration error: {exc}")
        return 2
    except (DataFormatError, InputError, DimensionError,
            FileNotFoundError, IsADirectoryError) as exc:
        _say(f"data error: {exc}")
        return 3
    except NumericError as exc:
        _say(f"numeric failure: {exc}")
        return 4
    except StateError as exc:
        _say(f"state error: {exc}")
        return 5
    except RepKanError as exc:
        _say(f"error: {exc}")
        return 1


def console_entry() -> None:
    sys.exit(main())
