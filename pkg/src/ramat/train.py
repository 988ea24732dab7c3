"""Pretraining and fine-tuning loops with AdamW, clipping and LR schedules."""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, Params, block_index, forward_head, head_loss
from .model import param_group, pretrain_loss, sample_mask
from .numerics import ContractError, NumericError, Tensor
from .reservoir import ReservoirSpec

log = logging.getLogger(__name__)

RESERVOIR_NAMES = ("reservoir.w_in", "reservoir.w_res")
FREEZE_MODES = ("head_only", "top_k_blocks", "full")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    # pretraining
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 16
    stride: int | None = None
    lr_peak: float = 1e-3
    lr_min: float = 0.0
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_norm: float = 1.0
    # fine-tuning
    freeze_mode: str = "top_k_blocks"
    top_k: int = 1
    layer_decay: float = 1.0
    finetune_lr: float = 1e-3
    finetune_epochs: int = 30
    finetune_batch_size: int = 32
    patience: int = 5
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.finetune_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.max_norm <= 0:
            raise ConfigError("max_norm must be > 0")
        if self.freeze_mode not in FREEZE_MODES:
            raise ConfigError(f"freeze_mode must be one of {FREEZE_MODES}")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# schedule


@dataclasses.dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    lr_peak: float
    lr_min: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got "
                              f"{self.warmup_steps}, {self.total_steps}")
        if self.lr_min > self.lr_peak or self.lr_min < 0:
            raise ConfigError("need 0 <= lr_min <= lr_peak")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to ``lr_min`` at ``total_steps``."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ConfigError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_peak * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimiser


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("max_norm must be > 0")
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: (g * g.dtype.type(factor)).astype(g.dtype) for k, g in grads.items()}, norm


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


@dataclasses.dataclass
class OptimState:
    """AdamW moments for the trainable parameters only."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def create(cls, params: Mapping[str, Tensor], trainable: Iterable[str],
               beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01) -> "OptimState":
        names = [n for n in params if n in set(trainable)]
        m = {n: np.zeros_like(params[n].data) for n in names}
        v = {n: np.zeros_like(params[n].data) for n in names}
        return cls(m, v, 0, beta1, beta2, eps, weight_decay)

    @property
    def trainable(self) -> tuple[str, ...]:
        return tuple(self.m)

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               opt: OptimState, lr: float,
               multipliers: Mapping[str, float] | None = None) -> Params:
    """One decoupled-weight-decay Adam update; returns a new parameter dict.

    Only names holding moment buffers in ``opt`` are touched.
    """
    missing = [n for n in opt.m if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters {missing}")
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = dict(params)
    for name in opt.m:
        w = params[name].data
        f = w.dtype.type
        g = grads[name].astype(w.dtype, copy=False)
        m = f(b1) * opt.m[name] + f(1 - b1) * g
        v = f(b2) * opt.v[name] + f(1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        lr_eff = lr * (1.0 if multipliers is None else multipliers.get(name, 1.0))
        if lr_eff == 0.0:
            continue
        update = (m / f(c1)) / (np.sqrt(v / f(c2)) + f(opt.eps))
        new = w - f(lr_eff) * update - f(lr_eff * opt.weight_decay) * w
        out[name] = Tensor(new, True, name, dtype=w.dtype)
    return out


def layerwise_multipliers(decay: float, num_layers: int,
                          names: Iterable[str]) -> dict[str, float]:
    """Head 1, block l gets ``decay**(L - l)``, embedding ``decay**(L + 1)``."""
    if not 0 < decay <= 1:
        raise ConfigError("layer decay must lie in (0, 1]")
    out = {}
    for name in names:
        group = param_group(name)
        if group in ("head", "decoder"):
            out[name] = 1.0
        elif group == "embed":
            out[name] = decay ** (num_layers + 1)
        else:
            out[name] = decay ** (num_layers - block_index(name))
    return out


# ---------------------------------------------------------------------------
# freezing and early stopping


@dataclasses.dataclass(frozen=True)
class FreezePlan:
    mode: str = "head_only"
    k: int = 1

    def __post_init__(self):
        if self.mode not in FREEZE_MODES:
            raise ConfigError(f"unknown freeze mode {self.mode!r}")
        if self.mode == "top_k_blocks" and self.k < 0:
            raise ConfigError("top_k must be >= 0")

    def trainable(self, names: Iterable[str], num_layers: int) -> set[str]:
        """Names updated during fine-tuning. Decoder and mask token only serve pretraining."""
        out = set()
        for name in names:
            group = param_group(name)
            if group == "head":
                out.add(name)
            elif group.startswith("blocks."):
                layer = block_index(name)
                if self.mode == "full" or (self.mode == "top_k_blocks"
                                           and layer >= num_layers - self.k):
                    out.add(name)
            elif group == "embed" and self.mode == "full" and name != "mask_token":
                out.add(name)
        return out

    def frozen(self, names: Iterable[str], num_layers: int) -> set[str]:
        names = list(names)
        return (set(names) - self.trainable(names, num_layers)) | set(RESERVOIR_NAMES)


class EarlyStop:
    """Stop once the metric has failed to improve for more than ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.since_best = 0

    def update(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best > self.patience


# ---------------------------------------------------------------------------
# data helpers


def standardize_series(series: np.ndarray) -> np.ndarray:
    """Z-score each channel over the whole series; constant channels keep unit std."""
    s = np.asarray(series, dtype=np.float64)
    mu = s.mean(axis=0)
    sd = s.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    return ((s - mu) / sd).astype(np.float32)


def sliding_windows(series: Sequence[np.ndarray], length: int, stride: int) -> np.ndarray:
    """All windows of ``length`` rows, series by series, in temporal order."""
    out = []
    for s in series:
        for start in range(0, len(s) - length + 1, stride):
            out.append(s[start:start + length])
    if not out:
        return np.zeros((0, length, series[0].shape[1] if series else 0), dtype=np.float32)
    return np.stack(out).astype(np.float32)


def channel_mse(pred, target) -> np.ndarray:
    """Per-channel mean squared error in 64-bit."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return (d * d).mean(axis=0)


def predict(params: Params, spec: ReservoirSpec, config: ModelConfig, X: np.ndarray,
            batch_size: int = 256) -> np.ndarray:
    outs = [forward_head(params, spec, config, X[i:i + batch_size]).data
            for i in range(0, len(X), batch_size)]
    if not outs:
        return np.zeros((0, config.head_dim), dtype=np.float32)
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# loops


@dataclasses.dataclass
class PretrainResult:
    params: Params
    opt: OptimState
    trace: list[dict]


def _grads(params: Params, names: Iterable[str]) -> dict[str, np.ndarray]:
    return {n: params[n].grad for n in names}


def _zero(params: Params) -> None:
    for t in params.values():
        t.zero_grad()


def pretrain(series: Sequence[np.ndarray], params: Params, spec: ReservoirSpec,
             config: ModelConfig, train: TrainConfig, rng: np.random.Generator,
             callback=None) -> PretrainResult:
    """Masked-patch pretraining over sliding windows of each series.

    Each series is standardized over its full length first. Windows are
    visited series by series in temporal order and grouped into consecutive
    mini-batches (``batch_size=1`` is the window-at-a-time loop).
    """
    stride = train.stride or config.window_length
    windows = sliding_windows([standardize_series(s) for s in series],
                              config.window_length, stride)
    if len(windows) == 0:
        raise ConfigError("no series is long enough for one window")
    per_epoch = math.ceil(len(windows) / train.batch_size)
    total = train.max_steps or train.epochs * per_epoch
    schedule = LrSchedule(min(train.warmup_steps, total - 1), total, train.lr_peak, train.lr_min)
    trainable = [n for n in params if param_group(n) != "head"]
    opt = OptimState.create(params, trainable, train.beta1, train.beta2, train.eps,
                            train.weight_decay)
    trace: list[dict] = []
    step = 0
    P = config.num_patches
    while step < total:
        for start in range(0, len(windows), train.batch_size):
            if step >= total:
                break
            batch = windows[start:start + train.batch_size]
            mask = sample_mask(P, config.mask_ratio, rng, batch=len(batch))
            _zero(params)
            with nx.Tape() as tape:
                loss = pretrain_loss(params, spec, config, batch, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step + 1}")
            nx.backward(loss, tape)
            try:
                grads, norm = clip_grad_norm(_grads(params, trainable), train.max_norm)
            except NumericError as exc:
                raise NumericError(f"step {step + 1}: {exc}") from None
            step += 1
            lr = cosine_lr(step, schedule)
            params = adamw_step(params, grads, opt, lr)
            record = {"step": step, "split": "train", "metric": value, "lr": lr,
                      "grad_norm": norm, "clipped_norm": global_norm(grads)}
            trace.append(record)
            if callback is not None:
                callback(record)
    return PretrainResult(params, opt, trace)


@dataclasses.dataclass
class FinetuneResult:
    params: Params
    opt: OptimState
    trace: list[dict]
    best_epoch: int
    stopped_epoch: int
    early_stopped: bool


def split_validation(M: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Temporal split: the last ``val_fraction`` of points validate."""
    n_val = max(1, int(round(M * val_fraction)))
    if M - n_val < 1:
        raise ConfigError(f"need at least 2 labelled points, got {M}")
    return np.arange(M - n_val), np.arange(M - n_val, M)


def finetune(params: Params, spec: ReservoirSpec, config: ModelConfig, train: TrainConfig,
             X: np.ndarray, y: np.ndarray, plan: FreezePlan, rng: np.random.Generator,
             callback=None) -> FinetuneResult:
    """Supervised head training on standardized (X, y); returns the best-validation weights."""
    if X.shape[1] % config.patch_length:
        raise ConfigError(f"sequence length {X.shape[1]} not divisible by patch_length")
    if config.head == "regression" and y.shape[1:] != (config.num_channels,):
        raise ConfigError(f"targets {y.shape} do not match a {config.num_channels}-channel head")
    tr, va = split_validation(len(X), train.val_fraction)
    trainable = plan.trainable(params, config.num_layers)
    opt = OptimState.create(params, trainable, train.beta1, train.beta2, train.eps,
                            train.weight_decay)
    mult = (layerwise_multipliers(train.layer_decay, config.num_layers, opt.trainable)
            if train.layer_decay < 1 else None)
    stopper = EarlyStop(train.patience)
    best, best_epoch = params, 0
    trace: list[dict] = []
    epoch = 0
    stopped = False
    bs = train.finetune_batch_size
    for epoch in range(1, train.finetune_epochs + 1):
        order = tr[rng.permutation(len(tr))]
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            _zero(params)
            with nx.Tape() as tape:
                loss = head_loss(params, spec, config, X[idx], y[idx])
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite fine-tuning loss in epoch {epoch}")
            nx.backward(loss, tape)
            grads, _ = clip_grad_norm(_grads(params, opt.trainable), train.max_norm)
            params = adamw_step(params, grads, opt, train.finetune_lr, mult)
            losses.append((loss.item(), len(idx)))
        train_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
        val_loss = evaluate_loss(params, spec, config, X[va], y[va])
        halt = stopper.update(val_loss)
        if stopper.since_best == 0:
            best, best_epoch = params, epoch
        for split, metric in (("train", train_loss), ("val", val_loss)):
            rec = {"step": epoch, "split": split, "metric": metric, "lr": train.finetune_lr}
            trace.append(rec)
            if callback is not None:
                callback(rec)
        if halt:
            stopped = True
            break
    return FinetuneResult(best, opt, trace, best_epoch, epoch, stopped)


def evaluate_loss(params: Params, spec: ReservoirSpec, config: ModelConfig,
                  X: np.ndarray, y: np.ndarray) -> float:
    if config.head == "classification":
        return head_loss(params, spec, config, X, y).item()
    return float(channel_mse(predict(params, spec, config, X), y).mean())
