"""Command line entry point: gradient checks, data generation, training,
the ablation matrix, and attention-map export.

Exit codes are a stable contract: 0 success, 1 numerical or experiment
failure, 2 usage or IO error. Every run writes exactly one JSON manifest
alongside its outputs; apart from the manifest's wall-clock field, reruns
with identical flags and seed produce byte-identical artifacts.

DCATTN_THREADS caps process-level parallelism (the ablation matrix). The
numeric kernels themselves always run single-threaded so results do not
depend on the thread budget.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks
from .attention import VARIANTS, attention_to_gray, write_pgm
from .data import GenConfig, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, ContractError, FormatError, GenerationError
from .network import (ToyNetConfig, load_checkpoint, model_forward_with_attention,
                      model_init, save_checkpoint)
from .tensor import Tensor, write_tensor
from .train import TrainConfig, TrainingDiverged, history_to_csv, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _threads() -> int:
    raw = os.environ.get("DCATTN_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n >= 1 else (os.cpu_count() or 1)


def _usage_error(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _write_manifest(path: Path, command: str, config: dict, seed,
                    artifacts: list[str], started: float, status: str,
                    extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "wall_clock_s": round(time.time() - started, 3),
        "status": status,
    }
    if extra:
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line without '=': {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _resolve(args, defaults: dict, file_cfg: dict[str, str]) -> dict:
    """Flag > config file > default, with types taken from the defaults."""
    out = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_cfg:
            caster = type(default)
            out[key] = caster(file_cfg[key]) if default is not None else file_cfg[key]
        else:
            out[key] = default
    return out


# --- gradcheck ------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    started = time.time()
    names = None if args.ops in (None, "all") else [s for s in args.ops.split(",") if s]
    if names:
        unknown = [n for n in names if n not in checks.CHECKS]
        if unknown:
            return _usage_error(
                f"unknown ops {unknown}; known: {', '.join(sorted(checks.CHECKS))}")
    report = checks.run_checks(names, seeds=args.seeds, tol=args.tol)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv())
    for row in report.rows:
        print(f"{'PASS' if row.passed else 'FAIL'} {row.op}/{row.tensor} "
              f"max_rel_err={row.max_rel_err:.3e}")
    status = "pass" if report.passed else "fail"
    _write_manifest(out_dir / "manifest.json", "gradcheck",
                    {"ops": args.ops or "all", "seeds": args.seeds, "tol": args.tol},
                    None, ["report.csv"], started, status)
    print(f"gradcheck: {status}")
    return EXIT_OK if report.passed else EXIT_FAIL


# --- gen-data ------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    started = time.time()
    if args.count < 1:
        return _usage_error(f"--count must be >= 1, got {args.count}")
    try:
        cfg = GenConfig(height=args.height, width=args.width, classes=args.classes,
                        min_shapes=args.min_shapes, max_shapes=args.max_shapes,
                        color_confusion=args.confusion, depth_noise=args.depth_noise,
                        seed=args.seed)
    except ConfigError as e:
        return _usage_error(str(e))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        samples = generate_dataset(cfg, args.count)
        save_dataset(samples, out)
    except GenerationError as e:
        print(f"generation failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as e:
        return _usage_error(f"cannot write {out}: {e}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data",
                    {"count": args.count, **cfg.__dict__}, args.seed,
                    [out.name], started, "ok")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


# --- train ---------------------------------------------------------------


_TRAIN_DEFAULTS = {
    "lr": 0.008, "momentum": 0.9, "weight_decay": 1e-4, "poly_power": 0.9,
    "epochs": 8, "batch_size": 8, "stages": 3, "base_channels": 16,
    "variant": "full", "seed": 0,
}


def _train_once(dataset, cfg_vals: dict, classes: int):
    net_cfg = ToyNetConfig(stages=cfg_vals["stages"],
                           base_channels=cfg_vals["base_channels"],
                           classes=classes, variant=cfg_vals["variant"],
                           seed=cfg_vals["seed"])
    train_cfg = TrainConfig(base_lr=cfg_vals["lr"], momentum=cfg_vals["momentum"],
                            weight_decay=cfg_vals["weight_decay"],
                            poly_power=cfg_vals["poly_power"],
                            epochs=cfg_vals["epochs"],
                            batch_size=cfg_vals["batch_size"],
                            seed=cfg_vals["seed"], variant=cfg_vals["variant"])
    params = model_init(net_cfg)
    history, trained = train(params, dataset, train_cfg)
    return history, trained


def _dataset_classes(dataset) -> int:
    return int(max(s.labels.max() for s in dataset)) + 1


def _cmd_train(args) -> int:
    started = time.time()
    file_cfg = _read_config_file(args.config) if args.config else {}
    vals = _resolve(args, _TRAIN_DEFAULTS, file_cfg)
    if vals["variant"] not in VARIANTS:
        return _usage_error(f"unknown variant {vals['variant']!r}; choose from {VARIANTS}")
    data_path = Path(args.data)
    if not data_path.exists():
        return _usage_error(f"dataset not found: {data_path}")
    try:
        dataset = load_dataset(data_path)
    except FormatError as e:
        return _usage_error(str(e))
    classes = args.classes if args.classes is not None else _dataset_classes(dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.json"
    try:
        history, trained = _train_once(dataset, vals, classes)
    except (TrainingDiverged, ContractError, ConfigError) as e:
        print(f"training failed: {e}", file=sys.stderr)
        _write_manifest(manifest, "train", vals, vals["seed"], [], started, "fail",
                        {"error": str(e)})
        return EXIT_FAIL
    (out_dir / "metrics.csv").write_text(history_to_csv(history, classes))
    save_checkpoint(out_dir / "checkpoint.dcap", trained)
    _write_manifest(manifest, "train", {**vals, "classes": classes}, vals["seed"],
                    ["metrics.csv", "checkpoint.dcap"], started, "ok")
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss={last.loss:.4f} "
              f"pixel_acc={last.pixel_acc:.4f} miou={last.miou:.4f}")
    else:
        print("0 epochs requested; wrote empty history")
    return EXIT_OK


# --- ablate --------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _load_dataset_cached(path: str):
    return load_dataset(path)


def _ablate_cell(job: tuple) -> dict:
    data_path, variant, seed, vals_json, classes = job
    vals = json.loads(vals_json)
    vals.update(variant=variant, seed=seed)
    dataset = _load_dataset_cached(data_path)
    try:
        history, _ = _train_once(dataset, vals, classes)
    except TrainingDiverged as e:
        return {"variant": variant, "seed": seed, "error": str(e)}
    last = history[-1]
    return {"variant": variant, "seed": seed, "pixel_acc": last.pixel_acc,
            "miou": last.miou,
            "csv": history_to_csv(history, classes)}


def _cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = _read_config_file(args.config) if args.config else {}
    vals = _resolve(args, _TRAIN_DEFAULTS, file_cfg)
    data_path = Path(args.data)
    if not data_path.exists():
        return _usage_error(f"dataset not found: {data_path}")
    if args.seeds < 1:
        return _usage_error(f"--seeds must be >= 1, got {args.seeds}")
    dataset = load_dataset(str(data_path))
    classes = args.classes if args.classes is not None else _dataset_classes(dataset)
    out_dir = Path(args.out)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)

    vals_json = json.dumps(vals)
    jobs = [(str(data_path), variant, vals["seed"] + s, vals_json, classes)
            for variant in VARIANTS for s in range(args.seeds)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = [_ablate_cell(j) for j in jobs]

    failed = [r for r in results if "error" in r]
    for r in results:
        if "csv" in r:
            cell = out_dir / "cells" / f"{r['variant']}_seed{r['seed']}.csv"
            cell.write_text(r.pop("csv"))

    lines = ["variant,median_pixel_acc,median_miou"]
    summary = {}
    for variant in VARIANTS:
        cells = [r for r in results if r["variant"] == variant and "error" not in r]
        if cells:
            med_acc = float(np.median([r["pixel_acc"] for r in cells]))
            med_iou = float(np.median([r["miou"] for r in cells]))
            summary[variant] = {"median_pixel_acc": med_acc, "median_miou": med_iou}
            lines.append(f"{variant},{med_acc!r},{med_iou!r}")
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")

    extra = {"summary": summary, "cells_failed": len(failed)}
    if args.seeds == 1:
        extra["low_confidence"] = True
    status = "ok" if not failed else "fail"
    _write_manifest(out_dir / "manifest.json", "ablate",
                    {**vals, "seeds": args.seeds, "classes": classes},
                    vals["seed"], ["summary.csv"], started, status, extra)
    for variant, med in summary.items():
        print(f"{variant}: median pixel_acc={med['median_pixel_acc']:.4f} "
              f"median miou={med['median_miou']:.4f}")
    if failed:
        print(f"{len(failed)} cells diverged", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --- dump-attention -------------------------------------------------------


def _cmd_dump_attention(args) -> int:
    started = time.time()
    ckpt_path, data_path = Path(args.checkpoint), Path(args.data)
    if not ckpt_path.exists():
        return _usage_error(f"checkpoint not found: {ckpt_path}")
    if not data_path.exists():
        return _usage_error(f"dataset not found: {data_path}")
    try:
        params = load_checkpoint(ckpt_path)
        dataset = load_dataset(data_path)
    except FormatError as e:
        return _usage_error(str(e))
    if not 0 <= args.sample < len(dataset):
        return _usage_error(f"--sample {args.sample} out of range [0, {len(dataset)})")
    sample = dataset[args.sample]
    _, maps = model_forward_with_attention(sample.rgb, sample.depth, params)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for stage, (rgb_attn, depth_attn) in enumerate(maps):
        for branch, attn in (("rgb", rgb_attn), ("depth", depth_attn)):
            if attn is None:
                # omitted attention path acts as the identity map
                shape = (1, 1, sample.labels.shape[0] >> (stage + 1),
                         sample.labels.shape[1] >> (stage + 1))
                attn = Tensor(np.ones(shape, dtype=np.float32))
            base = f"attention_stage{stage}_{branch}"
            write_tensor(out_dir / f"{base}.dcat", attn)
            write_pgm(out_dir / f"{base}.pgm", attention_to_gray(attn))
            artifacts += [f"{base}.dcat", f"{base}.pgm"]
    _write_manifest(out_dir / "manifest.json", "dump-attention",
                    {"checkpoint": str(ckpt_path), "data": str(data_path),
                     "sample": args.sample},
                    None, artifacts, started, "ok")
    print(f"wrote {len(artifacts)} attention artifacts to {out_dir}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcattn",
                                description="Differential convolution attention toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--ops", default=None,
                   help="comma-separated op names, or 'all' (default)")
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--tol", type=float, default=None,
                   help="override the per-op tolerance")
    g.add_argument("--out", default="runs/gradcheck")
    g.set_defaults(func=_cmd_gradcheck)

    d = sub.add_parser("gen-data", help="generate a synthetic RGB-D dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=625)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--confusion", type=float, default=0.5)
    d.add_argument("--height", type=int, default=32)
    d.add_argument("--width", type=int, default=32)
    d.add_argument("--classes", type=int, default=5)
    d.add_argument("--depth-noise", type=float, default=0.02)
    d.add_argument("--min-shapes", type=int, default=4)
    d.add_argument("--max-shapes", type=int, default=7)
    d.set_defaults(func=_cmd_gen_data)

    def add_train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--momentum", type=float, default=None)
        sp.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
        sp.add_argument("--poly-power", dest="poly_power", type=float, default=None)
        sp.add_argument("--stages", type=int, default=None)
        sp.add_argument("--base-channels", dest="base_channels", type=int, default=None)
        sp.add_argument("--classes", type=int, default=None,
                        help="label count (default: inferred from the dataset)")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train one variant on a dataset file")
    add_train_flags(t)
    t.add_argument("--variant", default=None, choices=VARIANTS)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("ablate", help="train all variants over several seeds")
    add_train_flags(a)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_ablate)

    m = sub.add_parser("dump-attention", help="export per-stage attention maps")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--sample", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_dump_attention)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, FileNotFoundError) as e:
        return _usage_error(str(e))


if __name__ == "__main__":
    sys.exit(main())
