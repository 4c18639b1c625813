"""Operator CLI: gen-data, train, eval, attack, report.

A run directory collects everything one training produces:

    run/
      config.json        # normalized config, written before any checkpoint
      checkpoints/       # one checkpoint per epoch (per member for ensembles)
      logs/train.csv     # one row per optimizer step
      reports/<tag>/     # metrics.json plus plot-ready CSVs per evaluation

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Subcommands never mutate input datasets.  MIMO_RUN_THREADS caps torch
intra-op parallelism.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .adversarial import AttackConfig, fgsm
from .arch import (build_model, checkpoint_hash, load_checkpoint,
                   param_count)
from .baselines import dropout_predict, ensemble_predict
from .config import ConfigError, load_run_config
from .data_io import (DatasetError, SynthTaskConfig, generate_synthetic,
                      load_dataset, write_raster)
from .predictive import decompose_variance
from .trainer import (EvalResult, TrainingDiverged, evaluate,
                      mimo_fields_fn, train)

__all__ = ["main"]


def _apply_thread_cap():
    cap = os.environ.get("MIMO_RUN_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise ConfigError(f"bad --size {text!r}, expected N or HxW")


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    height, width = _parse_size(args.size)
    cfg = SynthTaskConfig(
        field_kind=args.field,
        channels=args.channels,
        height=height,
        width=width,
        noise_scale_fn=args.noise_fn,
        noise_scale=args.noise_scale,
        noise_base=args.noise_base,
        noise_gain=args.noise_gain,
        ood_shift=args.ood_shift,
        seed=args.seed,
    )
    manifest = generate_synthetic(cfg, args.n, args.out)
    print(Path(args.out) / "manifest.json")
    print(f"kind={manifest.kind} samples={manifest.sample_count} "
          f"shape=({manifest.input_channels},{manifest.height},{manifest.width})")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    if args.sync is not None:
        run_cfg = dataclasses.replace(
            run_cfg,
            train=dataclasses.replace(run_cfg.train,
                                      sync_enabled=args.sync == "on"),
        )
    dataset = load_dataset(args.data)
    if dataset.input_channels != run_cfg.arch.in_channels:
        raise ConfigError(
            f"dataset has {dataset.input_channels} channels but the model "
            f"expects {run_cfg.arch.in_channels}"
        )
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(run_cfg.to_json())

    if run_cfg.kind == "ensemble":
        for k, seed in enumerate(run_cfg.ensemble.seeds):
            member_cfg = dataclasses.replace(run_cfg.arch, seed=seed)
            model = build_model(member_cfg)
            member_dir = run_dir / f"member_{k:02d}"
            train(model, dataset, run_cfg.train, run_dir=member_dir,
                  checkpoint_kind="ensemble")
            print(f"member {k}: trained, checkpoints under {member_dir}")
    else:
        model = build_model(run_cfg.arch)
        result = train(model, dataset, run_cfg.train, run_dir=run_dir,
                       checkpoint_kind=run_cfg.kind)
        last = result.checkpoint_dirs[-1]
        print(f"trained {run_cfg.kind} model, final checkpoint {last}")
        print(f"checkpoint_hash={checkpoint_hash(last)}")
    return 0


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows, extra: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(extra)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + keys)
        for row in rows:
            writer.writerow(list(row) + [extra[k] for k in keys])


def _write_reports(res: EvalResult, out_dir: Path, meta: dict,
                   extra_cols: dict | None = None):
    extra_cols = extra_cols or {}
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {**res.scalars(), **meta, **extra_cols}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=1,
                                                     sort_keys=True))
    _write_csv(out_dir / "calibration.csv", ["level", "observed"],
               zip(res.calibration.levels, res.calibration.observed),
               extra_cols)
    _write_csv(out_dir / "sparsification.csv", ["fraction", "mae"],
               zip(res.sparsification.retained_fractions,
                   res.sparsification.mae_at_fraction),
               extra_cols)
    hist_rows = []
    for kind, (counts, edges) in (("epistemic", res.epistemic_entropy_hist),
                                  ("combined", res.combined_entropy_hist)):
        for i, count in enumerate(counts):
            hist_rows.append([kind, edges[i], edges[i + 1], int(count)])
    _write_csv(out_dir / "entropy_hist.csv",
               ["kind", "bin_left", "bin_right", "count"], hist_rows,
               extra_cols)
    _write_csv(out_dir / "per_image.csv",
               ["index", "mae", "epistemic_entropy", "combined_entropy"],
               zip(range(len(res.per_image_mae)), res.per_image_mae,
                   res.per_image_epistemic_entropy,
                   res.per_image_combined_entropy),
               extra_cols)


def _save_uncertainty_maps(fields_fn, dataset, count: int, out_dir: Path):
    """Persist per-sample mean/variance maps in the raster container."""
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    with torch.no_grad():
        for i in range(min(count, len(dataset))):
            x = torch.from_numpy(dataset[i].x[None])
            fields = fields_fn(x)
            dec = decompose_variance(fields, ddof=1 if len(fields) > 1 else 0)
            entry = {"index": i, "rasters": {}}
            for name, tensor in (("mean", dec.mean),
                                 ("aleatoric_var", dec.aleatoric_var),
                                 ("epistemic_var", dec.epistemic_var),
                                 ("combined_var", dec.combined_var)):
                arr = tensor.squeeze(0).numpy()
                rel = f"{i:05d}_{name}.bin"
                crc = write_raster(out_dir / rel, arr)
                entry["rasters"][name] = {"file": rel, "crc32": crc,
                                          "shape": list(arr.shape)}
            records.append(entry)
    (out_dir / "maps_manifest.json").write_text(
        json.dumps({"version": 1, "samples": records}, indent=1,
                   sort_keys=True))


def _latest_checkpoint(root: Path) -> Path:
    ckpts = sorted((root / "checkpoints").glob("epoch_*"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoint under {root / 'checkpoints'}")
    return ckpts[-1]


def _load_run(run_dir: Path, baseline: str | None):
    """Returns (kind, models, checkpoint dirs) for a run directory."""
    cfg_path = run_dir / "config.json"
    kind = baseline
    if kind is None:
        if not cfg_path.is_file():
            raise FileNotFoundError(f"no config.json in {run_dir}")
        kind = json.loads(cfg_path.read_text())["model"]["kind"]
    if kind == "ensemble":
        member_dirs = sorted(run_dir.glob("member_*"))
        if not member_dirs:
            raise FileNotFoundError(f"no ensemble members under {run_dir}")
        ckpts = [_latest_checkpoint(d) for d in member_dirs]
        return kind, [load_checkpoint(c) for c in ckpts], ckpts
    ckpt = _latest_checkpoint(run_dir)
    return kind, [load_checkpoint(ckpt)], [ckpt]


def _dataset_tag(args) -> str:
    if args.tag:
        return args.tag
    return Path(args.data).resolve().parent.name if Path(args.data).name == "manifest.json" \
        else Path(args.data).resolve().name


def _cmd_eval(args) -> int:
    run_dir = Path(args.run)
    kind, models, ckpts = _load_run(run_dir, args.baseline)
    dataset = load_dataset(args.data)
    levels = np.asarray(_parse_floats(args.levels)) if args.levels else None

    if kind == "ensemble":
        fields_fn = lambda batch: ensemble_predict(models, batch)
        model = models[0]
    elif kind == "dropout":
        model = models[0]
        fields_fn = lambda batch: dropout_predict(
            model, batch, args.dropout_samples, seed=args.seed)
    else:
        model = models[0]
        fields_fn = None

    res = evaluate(model, dataset, fields_fn=fields_fn, levels=levels)
    out_dir = run_dir / "reports" / _dataset_tag(args)
    if args.save_maps > 0:
        _save_uncertainty_maps(fields_fn or mimo_fields_fn(model.eval()),
                               dataset, args.save_maps, out_dir / "maps")
    meta = {
        "baseline": kind,
        "m": (len(models) if kind == "ensemble"
              else args.dropout_samples if kind == "dropout"
              else model.num_subnetworks),
        "params": int(sum(param_count(mod) for mod in models)),
        "checkpoint_hash": ",".join(checkpoint_hash(c) for c in ckpts),
        "dataset": str(Path(args.data)),
        "dataset_kind": dataset.manifest.kind,
    }
    _write_reports(res, out_dir, meta)
    print(out_dir / "metrics.json")
    for key in ("mae", "rmse", "nll", "ece"):
        print(f"{key}={res.scalars()[key]:.6f}")
    return 0


def _cmd_attack(args) -> int:
    eps_list = _parse_floats(args.eps)
    if any(e < 0 for e in eps_list):
        raise ConfigError("epsilon values must be nonnegative")
    run_dir = Path(args.run)
    kind, models, ckpts = _load_run(run_dir, None)
    if kind == "ensemble":
        raise ConfigError("attack supports single-model runs only")
    model = models[0]
    dataset = load_dataset(args.data)
    clip = tuple(_parse_floats(args.clip))
    if len(clip) != 2:
        raise ConfigError("--clip expects 'lo,hi'")

    base_tag = args.tag or "attack"
    for eps in eps_list:
        atk = AttackConfig(epsilon=eps, clip_range=clip)
        perturbed = []
        for start in range(0, len(dataset), 16):
            idx = range(start, min(start + 16, len(dataset)))
            x = torch.from_numpy(np.stack([dataset[i].x for i in idx]))
            y = torch.from_numpy(np.stack([dataset[i].y for i in idx]))
            x_adv = fgsm(model, x, y, atk)
            perturbed.extend(x_adv.numpy())
        res = evaluate(model, dataset, inputs=perturbed)
        meta = {
            "baseline": kind,
            "epsilon": eps,
            "params": param_count(model),
            "checkpoint_hash": checkpoint_hash(ckpts[0]),
            "dataset": str(Path(args.data)),
        }
        out_dir = run_dir / "reports" / base_tag / f"eps_{eps:g}"
        _write_reports(res, out_dir, meta, extra_cols={"epsilon": eps})
        print(f"eps={eps:g} mae={res.mae:.6f} "
              f"epistemic_entropy={res.mean_epistemic_entropy:.6f}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        cfg_path = run_dir / "config.json"
        kind = "?"
        m = 0
        if cfg_path.is_file():
            cfg = json.loads(cfg_path.read_text())
            kind = cfg["model"]["kind"]
            m = cfg["model"]["arch"].get("num_subnetworks", 1)
        for metrics_path in sorted(run_dir.glob("reports/**/metrics.json")):
            metrics = json.loads(metrics_path.read_text())
            tag = str(metrics_path.parent.relative_to(run_dir / "reports"))
            rows.append([
                metrics.get("baseline", kind), m, run_dir.name, tag,
                metrics.get("params", ""),
                metrics.get("mae", ""), metrics.get("rmse", ""),
                metrics.get("nll", ""), metrics.get("ece", ""),
            ])
    rows.sort(key=lambda r: (str(r[0]), r[1], r[2], r[3]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "m", "run", "dataset", "params",
                         "mae", "rmse", "nll", "ece"])
        writer.writerows(rows)
    print(out)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimo-unet",
        description="MIMO U-Net training and uncertainty evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16, help="sample count")
    p.add_argument("--size", default="64", help="N or HxW")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--field", default="gauss_bumps",
                   choices=["gauss_bumps", "value_noise"])
    p.add_argument("--noise-fn", default="proportional",
                   choices=["constant", "proportional"])
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--noise-base", type=float, default=0.05)
    p.add_argument("--noise-gain", type=float, default=0.2)
    p.add_argument("--ood-shift", type=float, default=0.0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model into a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--sync", choices=["on", "off"], default=None,
                   help="override the sync setting of the config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", choices=["mimo", "dropout", "ensemble"],
                   default=None, help="prediction method (default: run kind)")
    p.add_argument("--dropout-samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0,
                   help="dropout mask seed")
    p.add_argument("--levels", default=None,
                   help="comma-separated calibration levels")
    p.add_argument("--tag", default=None, help="report subdirectory name")
    p.add_argument("--save-maps", type=int, default=0,
                   help="persist uncertainty rasters for the first N samples")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attack", help="FGSM sweep over epsilon values")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", required=True, help="comma-separated epsilons")
    p.add_argument("--clip", default="0,1", help="input clip range lo,hi")
    p.add_argument("--tag", default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("report", help="merge run reports into one table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
