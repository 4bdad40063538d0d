"""AdamW with decoupled weight decay, plus warmup learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, OutOfRangeError, ShapeMismatchError

SCHEDULE_KINDS = ("constant_after_warmup", "cosine")


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant_after_warmup"
    warmup_epochs: float = 0.0
    total_epochs: float = 1.0
    base_lr: float = 2e-4
    final_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidConfigError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_epochs > self.total_epochs:
            raise InvalidConfigError("warmup_epochs must not exceed total_epochs")


def schedule_lr(schedule: Schedule, epoch: float) -> float:
    """Learning rate at an epoch position (fractional positions allowed).

    Ramps linearly from 0 to base over the warmup, then stays constant or
    follows a half-cosine down to final_lr at total_epochs. Continuous at
    the warmup boundary.
    """
    if not 0 <= epoch <= schedule.total_epochs:
        raise OutOfRangeError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * epoch / schedule.warmup_epochs
    if schedule.kind == "constant_after_warmup":
        return schedule.base_lr
    span = schedule.total_epochs - schedule.warmup_epochs
    progress = 0.0 if span == 0 else (epoch - schedule.warmup_epochs) / span
    cos = 0.5 * (1.0 + np.cos(np.pi * progress))
    return schedule.final_lr + (schedule.base_lr - schedule.final_lr) * cos


def layer_multipliers(names, depth: int, decay: float) -> dict:
    """Per-parameter learning-rate multipliers that shrink toward the input.

    The classifier head and final norm use the full rate; transformer block
    i is scaled by decay^(depth - i) and the patch/class/positional
    embeddings by decay^(depth + 1).
    """
    out = {}
    for name in names:
        if name.startswith("blocks."):
            block = int(name.split(".")[1])
            layer = block + 1
        elif name.split(".")[0] in ("patch", "cls", "pos"):
            layer = 0
        else:  # head, final norm, decoder
            layer = depth + 1
        out[name] = decay ** (depth + 1 - layer)
    return out


# Parameters that are biases, gains, or embeddings skip weight decay.
def _decays(name: str, shape) -> bool:
    if len(shape) < 2:
        return False
    return name not in ("cls", "pos", "decoder.pos")


@dataclass
class OptimState:
    """First/second moment accumulators and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Weight decay multiplies each decaying parameter by (1 - lr * wd) before
    the bias-corrected moment update is applied. An optional layer-wise
    multiplier rescales the step per parameter.
    """

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999),
                 eps=1e-8, multipliers=None):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.multipliers = multipliers or {}
        self.state = OptimState()
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.values)
            self.state.v[name] = np.zeros_like(p.values)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        if lr < 0:
            raise OutOfRangeError(f"lr must be >= 0, got {lr}")
        b1, b2 = self.betas
        self.state.step_count += 1
        t = self.state.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            if g.shape != p.values.shape:
                raise ShapeMismatchError(
                    f"{name}: grad shape {g.shape} != param shape {p.values.shape}")
            eff_lr = lr * self.multipliers.get(name, 1.0)
            if self.weight_decay and _decays(name, p.values.shape):
                p.values *= 1.0 - eff_lr * self.weight_decay
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.values -= (eff_lr * update).astype(p.values.dtype, copy=False)


def adamw_step(named_params, grads, optimizer: AdamW, lr: float):
    """Single functional step: assign grads, update, return the optimizer."""
    for name, g in grads.items():
        optimizer.params[name].grad = np.asarray(g)
    optimizer.step(lr)
    return optimizer
