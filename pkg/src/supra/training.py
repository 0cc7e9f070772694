"""Losses, normalizers, the AdamW/one-cycle optimizer, and the training loop.

The error metric throughout is the relative L2 norm of the prediction error,
averaged over samples.  Grid tasks can add a relative H1-seminorm penalty on
the error (central differences in the interior, one-sided at the edges).
Training runs on normalized inputs and targets; evaluation un-normalizes
predictions first so reported metrics are in physical units.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Sample, augment_flip, load_manifest, load_split
from .model import SupraOperator, save_model

__all__ = [
    "rel_l2",
    "h1_loss",
    "grid_gradient",
    "Normalizer",
    "AdamWState",
    "adamw_step",
    "OneCycleSchedule",
    "TrainConfig",
    "TrainingDiverged",
    "FitResult",
    "fit",
    "fit_samples",
    "evaluate",
    "mean_baseline",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last finite state was saved before raising."""


# ---------------------------------------------------------------------------
# metrics and losses


def rel_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Relative L2 error ||u - u*|| / ||u*|| over all entries of one sample."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    denom = np.sqrt(np.sum(target ** 2))
    if denom == 0.0:
        raise ValueError("rel_l2: target has zero norm (degenerate sample)")
    return float(np.sqrt(np.sum((pred - target) ** 2)) / denom)


def _rel_l2_tape(pred: Tensor, target: np.ndarray) -> Tensor:
    denom = np.sqrt(np.sum(target ** 2))
    if denom == 0.0:
        raise ValueError("rel_l2: target has zero norm (degenerate sample)")
    diff = ad.sub(pred, pred.tape.constant(target))
    return ad.sqrt(ad.tsum(ad.square(diff))) * (1.0 / denom)


def grid_gradient(fields: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise gradient of C x M grid fields: central differences in the
    interior, one-sided at the edges.  Returns (d/dx, d/dy), each C x M."""
    c = fields.shape[0]
    height, width = shape
    grids = fields.reshape(c, height, width)
    gx = _diff_axis(grids, 1, 1.0 / (height - 1))
    gy = _diff_axis(grids, 2, 1.0 / (width - 1))
    return gx.reshape(c, -1), gy.reshape(c, -1)


def _diff_axis(grids: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    u = np.moveaxis(grids, axis, -1)
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * spacing)
    out[..., 0] = (u[..., 1] - u[..., 0]) / spacing
    out[..., -1] = (u[..., -1] - u[..., -2]) / spacing
    return np.moveaxis(out, -1, axis)


def _diff_axis_adjoint(g: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    gg = np.moveaxis(g, axis, -1)
    r = np.zeros_like(gg)
    r[..., 2:] += gg[..., 1:-1] / (2 * spacing)
    r[..., :-2] -= gg[..., 1:-1] / (2 * spacing)
    r[..., 0] -= gg[..., 0] / spacing
    r[..., 1] += gg[..., 0] / spacing
    r[..., -1] += gg[..., -1] / spacing
    r[..., -2] -= gg[..., -1] / spacing
    return np.moveaxis(r, -1, axis)


def _grid_gradient_tape(fields: Tensor, shape: tuple[int, int]) -> tuple[Tensor, Tensor]:
    c = fields.value.shape[0]
    height, width = shape

    def make(axis, spacing):
        return ad.linear_op(
            fields,
            lambda v: _diff_axis(v.reshape(c, height, width), axis, spacing).reshape(c, -1),
            lambda g: _diff_axis_adjoint(g.reshape(c, height, width), axis, spacing).reshape(c, -1))

    return make(1, 1.0 / (height - 1)), make(2, 1.0 / (width - 1))


def h1_loss(pred, target: np.ndarray, shape: tuple[int, int]):
    """Relative H1 seminorm of the error: ||grad(u - u*)|| / ||grad(u*)||.

    Grid-only; accepts a taped tensor (differentiable) or a plain array.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] != shape[0] * shape[1]:
        raise ValueError(f"h1_loss: fields with {target.shape[-1]} points do not "
                         f"match grid {shape}")
    tx, ty = grid_gradient(target, shape)
    denom = np.sqrt(np.sum(tx ** 2) + np.sum(ty ** 2))
    if denom == 0.0:
        raise ValueError("h1_loss: target gradient has zero norm")
    if isinstance(pred, Tensor):
        gx, gy = _grid_gradient_tape(pred, shape)
        tape = pred.tape
        ex = ad.sub(gx, tape.constant(tx))
        ey = ad.sub(gy, tape.constant(ty))
        return ad.sqrt(ad.add(ad.tsum(ad.square(ex)), ad.tsum(ad.square(ey)))) * (1.0 / denom)
    px, py = grid_gradient(np.asarray(pred, dtype=np.float64), shape)
    return float(np.sqrt(np.sum((px - tx) ** 2) + np.sum((py - ty) ** 2)) / denom)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per-channel affine standardization fit on the training split."""

    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8

    @classmethod
    def fit(cls, stacks: list[np.ndarray], eps: float = 1e-8) -> "Normalizer":
        data = np.concatenate([s.reshape(s.shape[0], -1) for s in stacks], axis=1)
        mean = data.mean(axis=1)
        std = np.maximum(data.std(axis=1), eps)
        return cls(mean, std, eps)

    def apply(self, fields: np.ndarray) -> np.ndarray:
        return (fields - self.mean[:, None]) / self.std[:, None]

    def unapply(self, fields) -> np.ndarray:
        if isinstance(fields, Tensor):
            tape = fields.tape
            c = self.std.size
            scaled = ad.mul(fields, tape.constant(self.std.reshape(c, 1)))
            return ad.add(scaled, tape.constant(self.mean.reshape(c, 1)))
        return fields * self.std[:, None] + self.mean[:, None]

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "eps": self.eps}

    @classmethod
    def from_json(cls, blob: dict) -> "Normalizer":
        return cls(np.asarray(blob["mean"]), np.asarray(blob["std"]), blob["eps"])


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamWState:
    """Per-parameter moments; beta1=0.9, beta2=0.999, eps=1e-8."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float,
               weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns the new parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name}; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        out[name] = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * p)
    return out


@dataclass
class OneCycleSchedule:
    """Cosine warmup to max_lr then cosine decay; endpoint values are exact."""

    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def lr(self, step: int) -> float:
        warm = max(1, int(round(self.warmup_frac * self.total_steps)))
        start = self.max_lr / self.div_factor
        final = self.max_lr / (self.div_factor * self.final_div_factor)
        if step <= warm:
            t = step / warm
            return start + (self.max_lr - start) * 0.5 * (1 - np.cos(np.pi * t))
        t = (step - warm) / max(1, self.total_steps - warm)
        return final + (self.max_lr - final) * 0.5 * (1 + np.cos(np.pi * min(t, 1.0)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    max_lr: float = 1e-3
    weight_decay: float = 1e-4
    loss: str = "l2"          # "l2" or "l2_h1"
    h1_weight: float = 0.1
    seed: int = 0
    augment: bool = False
    max_steps: int | None = None
    eval_every: int = 1

    def validate(self) -> None:
        if self.loss not in ("l2", "l2_h1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class FitResult:
    best_test_rel_l2: float
    final_train_loss: float
    steps: int
    diverged: bool
    checkpoint_dir: str = ""
    metrics_path: str = ""
    history: list[dict] = field(default_factory=list)
    normalizers: dict = field(default_factory=dict)


def _sample_loss(model: SupraOperator, params_t: dict, sample: Sample,
                 in_norm: Normalizer, out_norm: Normalizer, config: TrainConfig,
                 tape: Tape) -> Tensor:
    pred = model.forward_from(tape, params_t, in_norm.apply(sample.inputs))
    target_n = out_norm.apply(sample.target)
    loss = _rel_l2_tape(pred, target_n)
    if config.loss == "l2_h1":
        shape = sample.grid_shape()
        loss = ad.add(loss, h1_loss(pred, target_n, shape) * config.h1_weight)
    return loss


def fit_samples(model: SupraOperator, train: list[Sample], test: list[Sample],
                config: TrainConfig, out_dir=None) -> FitResult:
    """Core training loop on in-memory samples; deterministic given the seed.

    With ``out_dir`` set, writes metrics.csv (epoch, step, lr, train_loss,
    test_rel_l2), the normalizer, and the best checkpoint.  A non-finite loss
    or parameter aborts with the last finite state kept (and saved, when
    writing) and raises TrainingDiverged.
    """
    config.validate()
    if not train:
        raise ValueError("empty training split")
    if config.loss == "l2_h1" and not train[0].geometry.startswith("grid:"):
        raise ValueError("the H1 penalty is grid-only")
    in_norm = Normalizer.fit([s.inputs for s in train])
    out_norm = Normalizer.fit([s.target for s in train])
    normalizers = {"inputs": in_norm.to_json(), "targets": out_norm.to_json()}

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "normalizer.json").write_text(json.dumps(normalizers, indent=2))
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "train_loss", "test_rel_l2"])
        ckpt_dir = out_dir / "checkpoint"

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, (len(train) + config.batch_size - 1) // config.batch_size)
    total_steps = config.max_steps or config.epochs * steps_per_epoch
    schedule = OneCycleSchedule(config.max_lr, total_steps)
    state = AdamWState.init(model.params)

    history: list[dict] = []
    best = np.inf
    step = 0
    diverged = False
    train_loss = np.nan

    # small per-layer matrices run fastest on one BLAS thread at desk scale
    blas_limit = int(os.environ.get("SUPRA_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(1, blas_limit)):
            epoch = 0
            while step < total_steps and not diverged:
                epoch += 1
                order = rng.permutation(len(train))
                epoch_losses = []
                for start in range(0, len(train), config.batch_size):
                    if step >= total_steps:
                        break
                    batch_idx = order[start:start + config.batch_size]
                    tape = Tape()
                    params_t = model.wrap_params(tape)
                    total = None
                    for idx in batch_idx:
                        sample = train[idx]
                        if config.augment:
                            sample = augment_flip(sample, rng)
                        loss = _sample_loss(model, params_t, sample, in_norm, out_norm,
                                            config, tape)
                        total = loss if total is None else ad.add(total, loss)
                    batch_loss = total * (1.0 / len(batch_idx))
                    loss_value = float(batch_loss.value)
                    if not np.isfinite(loss_value):
                        diverged = True
                        break
                    ad.backward(batch_loss)
                    grads = {name: params_t[name].grad for name in model.params}
                    step += 1
                    lr = schedule.lr(step)
                    try:
                        model.params = adamw_step(model.params, grads, state, lr,
                                                  config.weight_decay)
                    except TrainingDiverged:
                        diverged = True
                        break
                    if not all(np.all(np.isfinite(p)) for p in model.params.values()):
                        diverged = True
                        break
                    epoch_losses.append(loss_value)

                train_loss = float(np.mean(epoch_losses)) if epoch_losses else np.nan
                if diverged:
                    break
                if epoch % config.eval_every == 0 or step >= total_steps:
                    test_metric = (_mean_rel_l2(model, test, in_norm, out_norm)
                                   if test else np.nan)
                else:
                    test_metric = np.nan
                if writer is not None:
                    writer.writerow([epoch, step, f"{schedule.lr(step):.6e}",
                                     f"{train_loss:.6e}", f"{test_metric:.6e}"])
                history.append({"epoch": epoch, "step": step, "train_loss": train_loss,
                                "test_rel_l2": test_metric})
                if np.isfinite(test_metric) and test_metric < best:
                    best = test_metric
                    if ckpt_dir is not None:
                        save_model(model, ckpt_dir)
    finally:
        if fh is not None:
            fh.close()

    if ckpt_dir is not None and not ckpt_dir.exists():
        save_model(model, ckpt_dir)
    if diverged:
        # parameters are the last finite state: the rejected step never applied
        if out_dir is not None:
            save_model(model, out_dir / "checkpoint_last_finite")
        raise TrainingDiverged(
            f"training diverged at step {step}; last finite state retained"
            + (f" under {out_dir}" if out_dir is not None else ""))
    return FitResult(best_test_rel_l2=float(best), final_train_loss=train_loss,
                     steps=step, diverged=False,
                     checkpoint_dir=str(ckpt_dir) if ckpt_dir else "",
                     metrics_path=str(out_dir / "metrics.csv") if out_dir else "",
                     history=history, normalizers=normalizers)


def fit(model: SupraOperator, dataset_dir, config: TrainConfig, out_dir) -> FitResult:
    """Train on a generated dataset directory (see :func:`fit_samples`)."""
    manifest = load_manifest(dataset_dir)
    if manifest["geometry_ref"] != model.basis.geometry_ref():
        raise ValueError(
            f"dataset geometry {manifest['geometry_ref']!r} does not match model basis "
            f"geometry {model.basis.geometry_ref()!r}")
    train = load_split(dataset_dir, "train")
    test = load_split(dataset_dir, "test")
    return fit_samples(model, train, test, config, out_dir)


def _mean_rel_l2(model: SupraOperator, samples: list[Sample],
                 in_norm: Normalizer, out_norm: Normalizer) -> float:
    errors = []
    for sample in samples:
        pred = out_norm.unapply(model.predict(in_norm.apply(sample.inputs)))
        errors.append(rel_l2(pred, sample.target))
    return float(np.mean(errors))


def evaluate(model: SupraOperator, dataset_dir, split: str,
             normalizers: dict) -> dict:
    """Per-sample and mean relative L2 on a split, in physical units."""
    samples = load_split(dataset_dir, split)
    in_norm = Normalizer.from_json(normalizers["inputs"])
    out_norm = Normalizer.from_json(normalizers["targets"])
    per_sample = []
    for sample in samples:
        model.check_geometry(sample.geometry)
        pred = out_norm.unapply(model.predict(in_norm.apply(sample.inputs)))
        per_sample.append(rel_l2(pred, sample.target))
    return {"split": split, "count": len(samples),
            "mean_rel_l2": float(np.mean(per_sample)),
            "per_sample_rel_l2": [float(e) for e in per_sample]}


def mean_baseline(dataset_dir, split: str = "test") -> float:
    """Relative L2 of always predicting the train-split mean target field."""
    train = load_split(dataset_dir, "train")
    others = load_split(dataset_dir, split)
    mean_field = np.mean([s.target for s in train], axis=0)
    return float(np.mean([rel_l2(mean_field, s.target) for s in others]))
