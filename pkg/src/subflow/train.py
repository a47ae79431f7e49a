"""Dual full+sparse end-point-error loss, Adam, and the training loop.

The loss on a predicted field is the mean per-pixel Euclidean distance to
the label over all pixels (full term) plus the same sum restricted to
texture-masked pixels (sparse term).  Both terms divide by the total pixel
count N by default; dividing the sparse term by the masked count M instead
is selectable via ``sparse_norm="per_masked"``.

The loop shuffles with a seeded generator, evaluates validation loss every
epoch, and overwrites the checkpoint whenever validation strictly improves,
so the saved weights always correspond to the lowest validation loss seen.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import NonFiniteGradientError, ParameterError

SPARSE_NORMS = ("per_pixel", "per_masked")

LOG_COLUMNS = (
    "epoch",
    "train_full",
    "train_sparse",
    "train_total",
    "val_full",
    "val_sparse",
    "val_total",
    "seconds",
)


@dataclass(frozen=True)
class LossReport:
    """Batch-averaged loss terms plus the pixel counts behind them."""

    full_epe: float
    sparse_epe: float
    total: float
    masked_pixel_count: int
    total_pixel_count: int


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "SubFlowNetC"
    widths: tuple | None = None
    share_streams: bool = False
    batch_size: int = 128
    learning_rate: float = 0.001
    epochs: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_loss_enabled: bool = True
    sparse_norm: str = "per_pixel"
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.sparse_norm not in SPARSE_NORMS:
            raise ParameterError(f"sparse_norm must be one of {SPARSE_NORMS}")


@dataclass
class TrainState:
    """Parameters plus Adam moments and best-checkpoint bookkeeping."""

    params: nn.NetworkParams
    moment1: dict
    moment2: dict
    step: int = 0
    epoch: int = 0
    best_validation_loss: float = float("inf")
    best_checkpoint_path: str | None = None


def epe_loss(pred, labels, masks, include_sparse=True, sparse_norm="per_pixel"):
    """End-point-error loss and its gradient with respect to ``pred``.

    ``pred`` and ``labels`` are (b, 2, h, w); ``masks`` is (b, 2, h, w)
    boolean.  Returns (LossReport, gradient).  ``include_sparse=False``
    reports the measured sparse term but keeps it out of the total and the
    gradient (mask-supervision ablation).  The 2-norm's subgradient at an
    exactly zero residual is taken as 0.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ParameterError(f"pred must be (b, 2, h, w), got {pred.shape}")
    if pred.shape != labels.shape:
        raise ParameterError(f"pred {pred.shape} vs labels {labels.shape}")
    m = np.asarray(masks)
    if m.shape != pred.shape:
        raise ParameterError(f"masks {m.shape} must match pred {pred.shape}")
    if sparse_norm not in SPARSE_NORMS:
        raise ParameterError(f"sparse_norm must be one of {SPARSE_NORMS}")
    b = pred.shape[0]
    n_pixels = pred.shape[2] * pred.shape[3]
    diff = pred - labels
    err = np.sqrt((diff**2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(err[:, None] > 0, diff / err[:, None], 0.0)
    full = float(err.sum() / (b * n_pixels))
    gfull = unit / (b * n_pixels)

    mf = m.astype(pred.dtype)
    diff_m = diff * mf
    err_m = np.sqrt((diff_m**2).sum(axis=1))
    union = m.any(axis=1)
    masked_count = int(np.count_nonzero(union))
    if sparse_norm == "per_pixel":
        norm = np.full(b, n_pixels, dtype=float)
    else:
        norm = np.maximum(union.reshape(b, -1).sum(axis=1), 1).astype(float)
    sparse = float((err_m.reshape(b, -1).sum(axis=1) / norm).mean())
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_m = np.where(err_m[:, None] > 0, diff_m * mf / err_m[:, None], 0.0)
    gsparse = unit_m / (b * norm[:, None, None, None])

    total = full + sparse if include_sparse else full
    grad = gfull + gsparse if include_sparse else gfull
    report = LossReport(
        full_epe=full,
        sparse_epe=sparse,
        total=total,
        masked_pixel_count=masked_count,
        total_pixel_count=b * n_pixels,
    )
    return report, grad.astype(pred.dtype)


def init_state(params: nn.NetworkParams) -> TrainState:
    """Zeroed Adam moments shaped like the parameters."""
    m1, m2 = {}, {}
    for name, layer in params.layers.items():
        m1[name] = {
            "kernel": np.zeros_like(layer.kernel),
            "bias": None if layer.bias is None else np.zeros_like(layer.bias),
        }
        m2[name] = {
            "kernel": np.zeros_like(layer.kernel),
            "bias": None if layer.bias is None else np.zeros_like(layer.bias),
        }
    return TrainState(params=params, moment1=m1, moment2=m2)


def adam_step(state: TrainState, grads: dict, cfg: TrainConfig) -> TrainState:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, layer in state.params.layers.items():
        g = grads[name]
        for slot, value in (("kernel", layer.kernel), ("bias", layer.bias)):
            if value is None:
                continue
            gv = g[slot]
            if gv is None or not np.all(np.isfinite(gv)):
                raise NonFiniteGradientError(
                    f"layer {name!r}: non-finite {slot} gradient at step {t}"
                )
            m = state.moment1[name][slot]
            v = state.moment2[name][slot]
            m *= b1
            m += (1.0 - b1) * gv
            v *= b2
            v += (1.0 - b2) * gv**2
            value -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return state


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for lo in range(0, n, batch_size):
        yield idx[lo : lo + batch_size]


def _epoch_pass(data, state, cfg, rng=None):
    """One pass over ``data``; optimizes when ``rng`` is given, else evaluates."""
    n = data.reference.shape[0]
    order = rng.permutation(n) if (rng is not None and cfg.shuffle) else None
    sums = np.zeros(3)
    for batch_index, idx in enumerate(_batches(n, cfg.batch_size, order)):
        ref = data.reference[idx][:, None]
        cur = data.current[idx][:, None]
        labels = data.labels[idx]
        masks = data.masks[idx]
        training = rng is not None
        pred, cache = nn.forward(state.params, ref, cur, want_cache=training)
        report, gpred = epe_loss(
            pred,
            labels,
            masks,
            include_sparse=cfg.mask_loss_enabled,
            sparse_norm=cfg.sparse_norm,
        )
        if training:
            grads, _, _ = nn.backward(state.params, cache, gpred)
            try:
                adam_step(state, grads, cfg)
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(f"batch {batch_index}: {exc}") from None
        weight = len(idx)
        sums += weight * np.array([report.full_epe, report.sparse_epe, report.total])
    return sums / n


def train(
    train_data,
    val_data,
    cfg: TrainConfig,
    out_dir,
    checkpoint_name: str = "checkpoint.sfck",
    log_name: str = "train_log.csv",
) -> TrainState:
    """Optimize a fresh network; keep the checkpoint with the lowest
    validation loss and a per-epoch CSV log.

    ``train_data``/``val_data`` are :class:`~subflow.dataset.DatasetArrays`.
    """
    if train_data.reference.shape[0] < 1:
        raise ParameterError("training dataset is empty")
    if val_data.reference.shape[0] < 1:
        raise ParameterError("validation dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / checkpoint_name
    log_path = out / log_name

    params = nn.init_network(
        cfg.variant,
        widths=cfg.widths,
        seed=cfg.seed,
        share_streams=cfg.share_streams,
    )
    state = init_state(params)
    rng = np.random.default_rng(cfg.seed)

    with open(log_path, "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            try:
                train_full, train_sparse, train_total = _epoch_pass(
                    train_data, state, cfg, rng
                )
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(f"epoch {epoch}: {exc}") from None
            val_full, val_sparse, val_total = _epoch_pass(val_data, state, cfg)
            seconds = time.perf_counter() - started
            state.epoch = epoch
            if val_total < state.best_validation_loss:
                state.best_validation_loss = float(val_total)
                nn.save_checkpoint(state.params, checkpoint_path)
                state.best_checkpoint_path = str(checkpoint_path)
            writer.writerow(
                [epoch]
                + [repr(float(x)) for x in (
                    train_full, train_sparse, train_total,
                    val_full, val_sparse, val_total,
                )]
                + [f"{seconds:.3f}"]
            )
            log_file.flush()
    return state


def read_log(path) -> dict:
    """Load a training log CSV into named float columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_COLUMNS:
        raise ParameterError(f"{path} is not a training log")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return {name: data[:, i] for i, name in enumerate(LOG_COLUMNS)}
