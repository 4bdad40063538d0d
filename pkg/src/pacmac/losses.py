"""Objectives for source finetuning and selective self-training.

The self-training term averages r(x) * CE(chosen masked view, pseudolabel)
over the batch, with pseudolabels held fixed: they enter as integer targets,
never as tracked tensors, so no gradient flows through the clean-image pass
that produced them. The combined objective adds the labeled source
cross-entropy with the target term weighted by alpha.

Optional regularizers: entropy minimization on the reliable group, entropy
maximization on the unreliable group, and a diversity term against a running
class marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import LengthMismatchError


def sst_loss(verdicts, view_logits, pseudolabels, label_smoothing=0.0):
    """Selective self-training loss over one target batch.

    `view_logits` holds one row per verdict, or only the rows of the
    reliable subset (in verdict order); `pseudolabels` aligns with the rows.
    Either way the result is the batch mean of r(x) * CE, which is zero when
    nothing was selected.
    """
    n_total = len(verdicts)
    reliable = np.array([v.reliable for v in verdicts], dtype=bool)
    n_sel = int(reliable.sum())
    if n_total == 0 or n_sel == 0:
        return T.constant(0.0)

    rows = view_logits.shape[0]
    pseudolabels = np.asarray(pseudolabels, dtype=np.int64)
    if pseudolabels.shape[0] != rows:
        raise LengthMismatchError(
            f"{rows} logit rows vs {pseudolabels.shape[0]} pseudolabels")
    if rows == n_total:
        weights = reliable.astype(np.float64) / n_total
        return T.cross_entropy_from_logits(view_logits, pseudolabels,
                                           label_smoothing=label_smoothing,
                                           weights=weights)
    if rows == n_sel:
        ce = T.cross_entropy_from_logits(view_logits, pseudolabels,
                                         label_smoothing=label_smoothing)
        return T.scale(ce, n_sel / n_total)
    raise LengthMismatchError(
        f"view_logits has {rows} rows; expected {n_total} (all) or {n_sel} (selected)")


def pacmac_loss(source_logits, source_labels, target_term, alpha,
                label_smoothing=0.0):
    """Source cross-entropy plus alpha times the target self-training term."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    src = T.cross_entropy_from_logits(source_logits, source_labels,
                                      label_smoothing=label_smoothing)
    if alpha == 0 or target_term is None:
        return src
    if not isinstance(target_term, T.Tensor):
        target_term = T.constant(float(target_term))
    return T.add(src, T.scale(T.reshape(target_term, src.shape), alpha))


@dataclass
class RunningClassMarginal:
    """Exponential moving average of batch-mean class predictions."""

    q: np.ndarray
    decay: float = 0.9

    @classmethod
    def uniform(cls, num_classes: int, decay: float = 0.9) -> "RunningClassMarginal":
        return cls(q=np.full(num_classes, 1.0 / num_classes), decay=decay)

    def update(self, batch_mean: np.ndarray):
        q = self.decay * self.q + (1.0 - self.decay) * np.asarray(batch_mean, dtype=float)
        self.q = q / q.sum()


@dataclass
class RegularizerTerms:
    entmin: T.Tensor
    entmax: T.Tensor
    diversity: T.Tensor
    empty_reliable: bool = False
    empty_unreliable: bool = False
    empty_batch: bool = False


def _row_entropy(probs: T.Tensor) -> T.Tensor:
    """Shannon entropy per row of a probability matrix, as a tracked vector.

    Entries are floored at a tiny constant so exact zeros follow the
    p * log(p) -> 0 limit instead of producing log(0).
    """
    c = probs.shape[-1]
    floored = T.add(probs, T.constant(np.full(probs.shape[-1], 1e-300)))
    plogp = T.mul(probs, T.log(floored))
    return T.scale(T.mean(plogp, axis=-1), -float(c))


def regularizer_losses(target_probs, verdicts, marginal: RunningClassMarginal,
                       w_div: float = 5e-4, w_entmax: float = 1.0) -> RegularizerTerms:
    """Entropy and diversity penalties over one target batch.

    Rows of `target_probs` align with `verdicts`. Returns unweighted entmin
    (mean entropy of reliable rows), unweighted entmax (negative mean entropy
    of unreliable rows), and the diversity term sum_c mean_prediction(c) *
    log q(c); the caller applies its weights. The running marginal is updated
    from the batch mean after the losses are formed. An empty batch or group
    is reported through the flags with zero losses, not raised.
    """
    n = len(verdicts)
    zero = T.constant(0.0)
    if n == 0:
        return RegularizerTerms(zero, zero, zero, True, True, True)
    if target_probs.shape[0] != n:
        raise LengthMismatchError(f"{target_probs.shape[0]} prob rows vs {n} verdicts")

    reliable = np.array([v.reliable for v in verdicts], dtype=bool)
    n_rel = int(reliable.sum())
    n_unrel = n - n_rel
    ent = _row_entropy(target_probs)

    if n_rel:
        w = reliable / n_rel
        entmin = T.sum_all(T.mul(ent, T.constant(w)))
    else:
        entmin = zero
    if n_unrel:
        w = (~reliable) / n_unrel
        entmax = T.scale(T.sum_all(T.mul(ent, T.constant(w))), -1.0)
    else:
        entmax = zero

    batch_mean = T.mean(target_probs, axis=0)
    log_q = T.constant(np.log(np.clip(marginal.q, 1e-12, None)))
    diversity = T.sum_all(T.mul(batch_mean, log_q))
    marginal.update(batch_mean.values)

    return RegularizerTerms(entmin=entmin, entmax=entmax, diversity=diversity,
                            empty_reliable=n_rel == 0,
                            empty_unreliable=n_unrel == 0)
