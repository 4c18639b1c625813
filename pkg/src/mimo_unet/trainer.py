"""Training loop and evaluation harness.

One optimizer step: build a permuted MIMO batch, run the single forward
pass, compute per-subnetwork NLLs, refresh the synchronization weights,
apply them as constants, and step Adam with decoupled weight decay.  The
learning rate decays by a fixed factor every ``lr_step_epochs`` epochs and
a checkpoint is written per epoch.

Evaluation tiles each input across subnetworks, aggregates the Laplace
heads into mean / variance / entropy maps, and accumulates MAE, RMSE,
mixture NLL, calibration, sparsification and entropy histograms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch import MimoUNet, save_checkpoint
from .batching import RepetitionPolicy, make_eval_batch, make_train_batch
from .metrics import (CalibrationReport, SparsificationCurve, calibration,
                      entropy_histogram, sparsification)
from .predictive import (decompose_variance, entropy_maps, laplace_nll,
                         mixture_cdf, mixture_nll, to_laplace)
from .sync import SyncState, apply_weights, push_and_weight

__all__ = [
    "TrainConfig",
    "TrainLogRow",
    "TrainingDiverged",
    "TrainResult",
    "EvalResult",
    "train",
    "evaluate",
    "mimo_fields_fn",
    "per_submodel_nll",
    "write_train_log",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_gamma: float = 0.5
    lr_step_epochs: int = 20
    weight_decay: float = 0.0
    rho: float = 0.0
    sync_enabled: bool = True
    sync_tau: float = 0.3
    sync_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.lr_step_epochs < 1:
            raise ValueError("lr_step_epochs must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class TrainLogRow:
    step: int
    epoch: int
    loss: float
    lr: float
    nlls: list[float]
    weights: list[float]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass
class TrainResult:
    model: MimoUNet
    log: list[TrainLogRow]
    checkpoint_dirs: list[Path] = field(default_factory=list)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


def write_train_log(rows: list[TrainLogRow], path):
    if not rows:
        return
    m = len(rows[0].nlls)
    header = (["step", "epoch", "loss", "lr"]
              + [f"nll_{i}" for i in range(m)]
              + [f"weight_{i}" for i in range(m)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [row.step, row.epoch, f"{row.loss:.8g}", f"{row.lr:.8g}"]
                + [f"{v:.8g}" for v in row.nlls]
                + [f"{w:.8g}" for w in row.weights]
            )


def train(model: MimoUNet, dataset, cfg: TrainConfig,
          run_dir=None, sync_state: SyncState | None = None,
          checkpoint_kind: str = "mimo") -> TrainResult:
    """Train in place; returns the model, the step log and checkpoint dirs.

    Deterministic given (model seed, cfg.seed) in single-threaded mode.
    Raises TrainingDiverged on a non-finite loss, after writing a
    diagnostic checkpoint when a run directory is given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    m = model.num_subnetworks
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    policy = RepetitionPolicy(rho=cfg.rho)
    if sync_state is None:
        sync_state = SyncState(num_submodels=m, tau=cfg.sync_tau,
                               window=cfg.sync_window)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    run_dir = Path(run_dir) if run_dir is not None else None

    rows: list[TrainLogRow] = []
    checkpoints: list[Path] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            samples = [(dataset[int(i)].x, dataset[int(i)].y) for i in chunk]
            batch = make_train_batch(samples, m, policy, rng)
            xs = [torch.from_numpy(np.stack(batch.inputs[i])) for i in range(m)]
            ys = [torch.from_numpy(np.stack(batch.targets[i])) for i in range(m)]

            outs = model(xs)
            try:
                fields = [to_laplace(o) for o in outs]
                nll_terms = [laplace_nll(f, y)[1] for f, y in zip(fields, ys)]
                nll_values = [float(t.detach()) for t in nll_terms]
            except ValueError:
                nll_values = [float("nan")] * m
            if not all(math.isfinite(v) for v in nll_values):
                if run_dir is not None:
                    save_checkpoint(model, run_dir / "checkpoints"
                                    / f"diverged_step_{step:06d}")
                    write_train_log(rows, run_dir / "logs" / "train.csv")
                raise TrainingDiverged(
                    step, f"non-finite loss {nll_values} at step {step}")

            if cfg.sync_enabled:
                weights = push_and_weight(sync_state, nll_values)
            else:
                weights = np.ones(m)
            loss = apply_weights(nll_terms, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            rows.append(TrainLogRow(
                step=step, epoch=epoch, loss=float(loss.detach()), lr=lr,
                nlls=nll_values, weights=[float(w) for w in weights],
            ))
            step += 1

        if run_dir is not None:
            ckpt_dir = run_dir / "checkpoints" / f"epoch_{epoch:04d}"
            save_checkpoint(model, ckpt_dir, kind=checkpoint_kind)
            checkpoints.append(ckpt_dir)
            write_train_log(rows, run_dir / "logs" / "train.csv")

    model.eval()
    return TrainResult(model=model, log=rows, checkpoint_dirs=checkpoints)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalResult:
    mae: float
    rmse: float
    nll: float
    ece: float
    mean_epistemic_entropy: float
    mean_combined_entropy: float
    calibration: CalibrationReport
    sparsification: SparsificationCurve
    epistemic_entropy_hist: tuple
    combined_entropy_hist: tuple
    per_image_mae: np.ndarray
    per_image_epistemic_entropy: np.ndarray
    per_image_combined_entropy: np.ndarray

    def scalars(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "nll": self.nll,
            "ece": self.ece,
            "mean_epistemic_entropy": self.mean_epistemic_entropy,
            "mean_combined_entropy": self.mean_combined_entropy,
        }


def mimo_fields_fn(model: MimoUNet):
    """Tiled single-pass field producer used by the default evaluation."""
    def fields_fn(batch: torch.Tensor):
        outs = model(make_eval_batch(batch, model.num_subnetworks))
        return [to_laplace(o) for o in outs]
    return fields_fn


def evaluate(model, dataset, *, fields_fn=None, inputs=None, levels=None,
             batch_size: int = 16, bins: int = 50) -> EvalResult:
    """Deterministic evaluation over a dataset.

    ``fields_fn`` overrides how Laplace fields are produced from an input
    batch (used by the dropout and ensemble comparators); the default is
    the tiled single-pass MIMO forward.  ``inputs`` optionally substitutes
    the model inputs (e.g. adversarially perturbed ones) while targets are
    still read from the dataset.
    """
    if fields_fn is None:
        model.eval()
        fields_fn = mimo_fields_fn(model)

    abs_err_chunks = []
    unc_chunks = []
    pit_chunks = []
    epi_ent_chunks = []
    comb_ent_chunks = []
    nll_sum = 0.0
    epi_ent_images = []
    comb_ent_images = []
    mae_images = []

    n = len(dataset)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            if inputs is None:
                x = np.stack([dataset[i].x for i in idx])
            else:
                x = np.stack([np.asarray(inputs[i]) for i in idx])
            y = torch.from_numpy(np.stack([dataset[i].y for i in idx]))
            fields = fields_fn(torch.from_numpy(x))
            if len(fields) > 1:
                dec = decompose_variance(fields)
            else:
                dec = decompose_variance(fields, ddof=0)
            epi_ent, comb_ent = entropy_maps(dec)

            err = (dec.mean - y).abs()
            abs_err_chunks.append(err.reshape(-1).numpy())
            unc_chunks.append(dec.combined_var.reshape(-1).numpy())
            pit_chunks.append(mixture_cdf(fields, y).reshape(-1).numpy())
            epi_ent_chunks.append(epi_ent.reshape(-1).numpy())
            comb_ent_chunks.append(comb_ent.reshape(-1).numpy())
            nll_sum += float(mixture_nll(fields, y)) * len(idx)
            mae_images.extend(err.reshape(len(idx), -1).mean(dim=1).tolist())
            epi_ent_images.extend(
                epi_ent.reshape(len(idx), -1).mean(dim=1).tolist())
            comb_ent_images.extend(
                comb_ent.reshape(len(idx), -1).mean(dim=1).tolist())

    abs_err = np.concatenate(abs_err_chunks)
    unc = np.concatenate(unc_chunks)
    pit = np.concatenate(pit_chunks)
    epi_ent_flat = np.concatenate(epi_ent_chunks)
    comb_ent_flat = np.concatenate(comb_ent_chunks)
    report = calibration(pit, levels=levels)
    curve = sparsification(abs_err, unc)
    counts, edges = entropy_histogram([epi_ent_flat, comb_ent_flat], bins=bins)

    return EvalResult(
        mae=float(abs_err.mean()),
        rmse=float(np.sqrt((abs_err**2).mean())),
        nll=nll_sum / n,
        ece=report.ece,
        mean_epistemic_entropy=float(epi_ent_flat.mean()),
        mean_combined_entropy=float(comb_ent_flat.mean()),
        calibration=report,
        sparsification=curve,
        epistemic_entropy_hist=(counts[0], edges),
        combined_entropy_hist=(counts[1], edges),
        per_image_mae=np.asarray(mae_images),
        per_image_epistemic_entropy=np.asarray(epi_ent_images),
        per_image_combined_entropy=np.asarray(comb_ent_images),
    )


def per_submodel_nll(model: MimoUNet, dataset, batch_size: int = 16) -> list[float]:
    """Mean training-criterion NLL of each subnetwork over a dataset."""
    model.eval()
    m = model.num_subnetworks
    totals = np.zeros(m)
    n = len(dataset)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            x = torch.from_numpy(np.stack([dataset[i].x for i in idx]))
            y = torch.from_numpy(np.stack([dataset[i].y for i in idx]))
            outs = model(make_eval_batch(x, m))
            for i, out in enumerate(outs):
                totals[i] += float(laplace_nll(to_laplace(out), y)[1]) * len(idx)
    return [t / n for t in totals]
