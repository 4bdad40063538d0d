"""Per-instance reliability from masked-view consistency and confidence.

An instance is consistent when its masked-view predictions agree with the
clean-image prediction (unanimously, or by strict majority when configured)
and confident when the clean-image max probability exceeds the threshold.
The selection strategy combines the two bits; `consistent_or_confident`
is the default.

The view trained on is the last agreeing masked view when the consistency
vote passed; when selection happened through confidence alone it falls back
to the final view of the committee. Unselected instances carry a sentinel.

Pure functions over value inputs; safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    CommitteeSizeMismatchError,
    InvalidConfigError,
    LengthMismatchError,
    OracleWithoutLabelError,
)

STRATEGIES = ("all", "confident", "consistent", "consistent_and_confident",
              "consistent_or_confident", "oracle")
VOTING_MODES = ("unanimous", "majority")
MASKING_MODES = ("attention", "random")

NO_VIEW = -1


@dataclass(frozen=True)
class SelectionConfig:
    """How target instances are judged reliable for self-training."""

    strategy: str = "consistent_or_confident"
    voting: str = "unanimous"
    committee: int = 2
    ratio: float = 0.75
    threshold: float = 0.5
    masking: str = "attention"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(f"unknown strategy {self.strategy!r}")
        if self.voting not in VOTING_MODES:
            raise InvalidConfigError(f"unknown voting mode {self.voting!r}")
        if self.masking not in MASKING_MODES:
            raise InvalidConfigError(f"unknown masking mode {self.masking!r}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.committee < 1:
            raise InvalidConfigError(f"committee must be >= 1, got {self.committee}")


@dataclass
class ReliabilityVerdict:
    """Outcome of the reliability check for one target instance."""

    pseudolabel: int
    confidence: float
    agreement: np.ndarray      # (k,) bits, view prediction == clean prediction
    consistent: bool
    confident: bool
    reliable: bool
    training_view_index: int   # NO_VIEW when unreliable


def _vote(agreement: np.ndarray, voting: str) -> bool:
    k = agreement.shape[0]
    hits = int(agreement.sum())
    if voting == "unanimous":
        return hits == k
    return hits * 2 > k  # strict majority


def assess_reliability(clean, masked, config: SelectionConfig,
                       true_label=None) -> ReliabilityVerdict:
    """Judge one instance from its clean result and k masked-view results.

    `clean` and each entry of `masked` only need `.predictions` /
    `.confidences` style access for a single instance; plain
    (prediction, confidence) pairs are also accepted.
    """
    pred, conf = _as_pred_conf(clean)
    if len(masked) != config.committee:
        raise CommitteeSizeMismatchError(
            f"expected {config.committee} masked views, got {len(masked)}")
    if config.strategy == "oracle" and true_label is None:
        raise OracleWithoutLabelError("oracle selection requires true labels")

    view_preds = np.array([_as_pred_conf(m)[0] for m in masked])
    agreement = (view_preds == pred).astype(np.int8)
    consistent = _vote(agreement, config.voting)
    confident = conf > config.threshold

    if config.strategy == "all":
        reliable = True
    elif config.strategy == "confident":
        reliable = confident
    elif config.strategy == "consistent":
        reliable = consistent
    elif config.strategy == "consistent_and_confident":
        reliable = consistent and confident
    elif config.strategy == "consistent_or_confident":
        reliable = consistent or confident
    else:  # oracle
        reliable = pred == int(true_label)

    if not reliable:
        view = NO_VIEW
    elif consistent:
        view = int(np.flatnonzero(agreement)[-1])
    else:
        view = config.committee - 1
    return ReliabilityVerdict(pseudolabel=int(pred), confidence=float(conf),
                              agreement=agreement, consistent=bool(consistent),
                              confident=bool(confident), reliable=bool(reliable),
                              training_view_index=view)


def _as_pred_conf(obj):
    if isinstance(obj, tuple):
        return int(obj[0]), float(obj[1])
    probs = np.asarray(obj.probs).reshape(-1)
    return int(probs.argmax()), float(probs.max())


def assess_batch(clean_preds, clean_confs, view_preds, config: SelectionConfig,
                 true_labels=None):
    """Vectorized reliability over a batch.

    `view_preds` has shape (k, B). Returns a list of verdicts aligned with
    the batch.
    """
    view_preds = np.asarray(view_preds)
    if view_preds.shape[0] != config.committee:
        raise CommitteeSizeMismatchError(
            f"expected {config.committee} view rows, got {view_preds.shape[0]}")
    out = []
    for i in range(len(clean_preds)):
        label = None if true_labels is None else true_labels[i]
        out.append(assess_reliability(
            (clean_preds[i], clean_confs[i]),
            [(view_preds[j, i], 0.0) for j in range(config.committee)],
            config, true_label=label))
    return out


@dataclass
class SelectionStats:
    precision: float
    recall: float
    f1: float
    fraction_selected: float
    none_selected: bool
    per_class: dict  # class -> {"precision", "recall", "f1", "fraction_selected"}


def _prf(selected, correct):
    n_sel = int(selected.sum())
    n_cor = int(correct.sum())
    tp = int((selected & correct).sum())
    none_selected = n_sel == 0
    precision = 0.0 if none_selected else tp / n_sel
    recall = 0.0 if n_cor == 0 else tp / n_cor
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    fraction = float(selected.mean()) if selected.size else 0.0
    return precision, recall, f1, fraction, none_selected


def selection_stats(verdicts, true_labels) -> SelectionStats:
    """Precision/recall/F1 of the selected pseudolabels, overall and per class.

    Precision: of the selected instances, how many pseudolabels are correct.
    Recall: of the correctly-pseudolabeled instances, how many were selected.
    An empty selection reports precision 0 with the `none_selected` flag set.
    """
    if len(verdicts) != len(true_labels):
        raise LengthMismatchError(
            f"{len(verdicts)} verdicts vs {len(true_labels)} labels")
    labels = np.asarray(true_labels)
    selected = np.array([v.reliable for v in verdicts], dtype=bool)
    correct = np.array([v.pseudolabel for v in verdicts]) == labels

    precision, recall, f1, fraction, none_selected = _prf(selected, correct)
    per_class = {}
    for c in np.unique(labels):
        idx = labels == c
        p, r, f, frac, _ = _prf(selected[idx], correct[idx])
        per_class[int(c)] = {"precision": p, "recall": r, "f1": f,
                             "fraction_selected": frac}
    return SelectionStats(precision=precision, recall=recall, f1=f1,
                          fraction_selected=fraction,
                          none_selected=none_selected, per_class=per_class)


def verdicts_to_jsonl(verdicts, ids=None) -> str:
    """One JSON object per line: {id, pseudolabel, confidence, agreement, reliable, view}."""
    lines = []
    for i, v in enumerate(verdicts):
        lines.append(json.dumps({
            "id": int(ids[i]) if ids is not None else i,
            "pseudolabel": v.pseudolabel,
            "confidence": round(v.confidence, 6),
            "agreement": [int(a) for a in v.agreement],
            "reliable": int(v.reliable),
            "view": v.training_view_index,
        }))
    return "\n".join(lines) + "\n"
