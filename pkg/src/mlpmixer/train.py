"""Optimizers, learning-rate schedules, regularizers and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Dataset, augment_batch, normalize
from .model import MixerConfig, MixerParams, apply, bind, forward, init_params
from .surgery import PermSpec, permute_input

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


class Diverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class Schedule:
    kind: str = "linear_warmup_linear_decay"  # or "linear_warmup_cosine"
    warmup_steps: int = 0
    total_steps: int = 0
    peak_lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("linear_warmup_linear_decay", "linear_warmup_cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


@dataclass(frozen=True)
class TrainPlan:
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: str = "adam"  # or "sgd_momentum"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch: int = 128
    mixup_p: float = 0.0
    drop_rate: float = 0.0
    stoch_depth: float = 0.0
    augment: bool = True
    seed: int = 0
    log_every: int = 0  # 0: once per epoch

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm <= 0 or self.mixup_p < 0 or self.batch < 1:
            raise ValueError("need clip_norm > 0, mixup_p >= 0 and batch >= 1")


def desk_plan(total_steps: int, **overrides) -> TrainPlan:
    """Desk-scale defaults: Adam, 5% linear warmup then linear decay, peak 1e-3, wd 0.1."""
    peak = overrides.pop("peak_lr", 1e-3)
    kind = overrides.pop("schedule_kind", "linear_warmup_linear_decay")
    sched = Schedule(kind, int(round(0.05 * total_steps)), total_steps, peak)
    return TrainPlan(schedule=sched, **overrides)


# ---------------------------------------------------------------------------
# schedules and optimizers

def lr_at(schedule: Schedule, step: int) -> float:
    w, n, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    if step < w:
        return peak * step / w
    if n == w:
        return peak
    t = (step - w) / (n - w)
    if schedule.kind == "linear_warmup_cosine":
        return 0.5 * peak * (1.0 + math.cos(math.pi * t))
    return peak * (1.0 - t)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict, c: float) -> dict:
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    # slack absorbs the rounding of a previous clip, so clipping is idempotent
    if norm <= c * (1.0 + 1e-12):
        return grads
    factor = c / norm
    return {k: (g * factor).astype(g.dtype, copy=False) for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict
    v: dict
    count: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float = 0.0,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Adam with bias correction; weight decay is decoupled (``p -= lr*wd*p`` first)."""
    t = state.count + 1
    new_p, new_m, new_v = {}, {}, {}
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        if wd:
            p = p - lr * wd * p
        new_p[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(params[k].dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class SgdState:
    velocity: dict

    @classmethod
    def zeros(cls, params: dict) -> "SgdState":
        return cls({k: np.zeros_like(p) for k, p in params.items()})


def sgd_momentum_step(params: dict, grads: dict, state: SgdState, lr: float,
                      mu: float = 0.9) -> tuple[dict, SgdState]:
    vel = {k: mu * state.velocity[k] + grads[k] for k in params}
    new_p = {k: (p - lr * vel[k]).astype(p.dtype, copy=False) for k, p in params.items()}
    return new_p, SgdState(vel)


# ---------------------------------------------------------------------------
# regularizers

def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def mixup(x: np.ndarray, y: np.ndarray, p: float, rng: np.random.Generator, lam: float | None = None):
    """Convex combination of the batch with a shuffled copy of itself, lambda ~ Beta(p, p).

    ``p == 0`` returns the inputs untouched.
    """
    if p < 0:
        raise ValueError("mixup strength must be >= 0")
    if p == 0 and lam is None:
        return x, y
    if lam is None:
        lam = float(rng.beta(p, p))
    perm = rng.permutation(len(x))
    x2 = (lam * x + (1.0 - lam) * x[perm]).astype(x.dtype, copy=False)
    y2 = (lam * y + (1.0 - lam) * y[perm]).astype(y.dtype, copy=False)
    return x2, y2


# ---------------------------------------------------------------------------
# loop

class MetricsCSV:
    """Metrics sink writing one CSV row per log interval."""

    def __init__(self, path: str):
        self._f = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(METRICS_HEADER)
        self._f.flush()

    def __call__(self, row: dict) -> None:
        self._w.writerow([_fmt(row.get(k)) for k in METRICS_HEADER])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def evaluate(params: MixerParams, config: MixerConfig, dataset: Dataset, batch: int = 256,
             perm: PermSpec | None = None) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy (ties go to the lowest class index)."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(dataset), batch):
        x = dataset.images[start:start + batch]
        if perm is not None:
            x = permute_input(x, perm, config)
        logits = forward(normalize(x), params, config).astype(np.float64)
        y = dataset.labels[start:start + batch]
        logp = T.log_softmax(logits)
        total_loss += float(-logp[np.arange(len(y)), y].sum())
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return total_loss / len(dataset), correct / len(dataset)


def train_loop(config: MixerConfig, plan: TrainPlan, dataset: Dataset, sink=None,
               val: Dataset | None = None, perm: PermSpec | None = None,
               params: MixerParams | None = None) -> Checkpoint:
    """Run ``plan.schedule.total_steps`` optimizer steps and return the final checkpoint.

    Each step: batch -> flip/crop -> permutation pipeline -> normalize -> mixup ->
    forward(train) -> loss -> grad -> clip -> lr -> optimizer update.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.geometry != config.image:
        raise ValueError(f"dataset images {dataset.geometry} do not match config {config.image}")
    cfg = config.replace(drop_rate=plan.drop_rate, stoch_depth=plan.stoch_depth)
    if params is None:
        params = init_params(cfg, plan.seed)
    total = plan.schedule.total_steps
    n = len(dataset)
    batch = min(plan.batch, n)
    per_epoch = n // batch
    log_every = plan.log_every or per_epoch
    data_rng = np.random.default_rng([plan.seed, 1])
    aug_rng = np.random.default_rng([plan.seed, 2])
    mix_rng = np.random.default_rng([plan.seed, 3])
    model_rng = np.random.default_rng([plan.seed, 4])
    if plan.optimizer == "adam":
        opt_state = AdamState.zeros(params)
    else:
        opt_state = SgdState.zeros(params)

    order = np.empty(0, dtype=np.int64)
    run_loss, run_correct, run_seen = 0.0, 0, 0
    for step in range(total):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = data_rng.permutation(n)
        idx = order[pos * batch:(pos + 1) * batch]
        x = dataset.images[idx]
        if plan.augment:
            x = augment_batch(x, aug_rng)
        if perm is not None:
            x = permute_input(x, perm, cfg)
        x = normalize(x).astype(np.float32)
        labels = dataset.labels[idx]
        y = one_hot(labels, cfg.num_classes)
        x, y = mixup(x, y, plan.mixup_p, mix_rng)

        leaves = bind(params, True)
        logits = apply(x, leaves, cfg, "train", model_rng)
        loss = T.softmax_xent(logits, y)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise Diverged(step)
        grads = T.grad(loss, list(leaves.values()))
        grads = clip_global_norm(grads, plan.clip_norm)
        lr = lr_at(plan.schedule, step)
        if plan.optimizer == "adam":
            params, opt_state = adam_step(params, grads, opt_state, lr, plan.weight_decay, plan.beta1, plan.beta2)
        else:
            params, opt_state = sgd_momentum_step(params, grads, opt_state, lr, plan.momentum)

        run_loss += loss_value * len(idx)
        run_correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        run_seen += len(idx)
        done = step + 1
        if sink is not None and (done % log_every == 0 or done == total):
            row = {"step": done, "epoch": done / per_epoch, "lr": lr,
                   "train_loss": run_loss / run_seen, "train_acc": run_correct / run_seen}
            if val is not None:
                row["val_loss"], row["val_acc"] = evaluate(params, cfg, val, perm=perm)
            log.info("step %d loss %.4f acc %.3f", done, row["train_loss"], row["train_acc"])
            sink(row)
            run_loss, run_correct, run_seen = 0.0, 0, 0

    state = {"step": total, "epochs": total / per_epoch if per_epoch else 0.0, "seed": plan.seed}
    return Checkpoint(cfg, params, state)
