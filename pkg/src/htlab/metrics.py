"""Metrics and diagnostics: the four accuracy views, the toxic-pair
false-negative rate, and feature-spectrum summaries.

Accuracy views. `overall` is plain test accuracy; `seen`/`unseen` restrict
to samples whose true class is seen/unseen; `seen_chopped` re-scores the
seen samples with the unseen logit columns removed, isolating feature
quality from the extra difficulty of the full label space. Ties always
break to the lowest class index.

The false-negative rate (confusable-pair scenarios only) is the fraction
of toxic-class test samples predicted as any non-toxic class.

Spectrum diagnostics come from the penultimate features of the full test
set. `effective_rank` counts singular values at or above RANK_TAU times
the leading one; the paper-style presentation is the raw spectrum, the
scalar exists for ordering assertions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, ToxicityMap
from .model import ModelParams, chopped_logits, forward
from .numkit import Spectrum, top_singular_values

RANK_TAU = 0.01

SCALAR_METRICS = ("overall_acc", "seen_acc", "unseen_acc", "seen_chopped_acc",
                  "false_negative_rate", "effective_rank")


@dataclass
class EvalReport:
    overall_acc: float
    seen_acc: float
    unseen_acc: float
    seen_chopped_acc: float
    false_negative_rate: Optional[float]
    spectrum: Spectrum
    effective_rank: float
    n_seen: int
    n_unseen: int

    def scalars(self) -> dict:
        return {m: getattr(self, m) for m in SCALAR_METRICS}


@dataclass
class AggregateReport:
    means: dict
    variances: dict
    count: int


def effective_rank(spectrum: Spectrum, tau: float = RANK_TAU) -> int:
    v = spectrum.values
    if v.size == 0 or v[0] <= 0:
        return 0
    return int(np.sum(v >= tau * v[0]))


def accuracy_views(scores: np.ndarray, y: np.ndarray, seen_mask: np.ndarray,
                   toxicity: Optional[ToxicityMap] = None) -> dict:
    """Accuracy views from per-class scores (logits or probabilities)."""
    seen_mask = np.asarray(seen_mask, dtype=bool)
    preds = np.argmax(scores, axis=1)
    is_seen = seen_mask[y]
    n_seen = int(is_seen.sum())
    n_unseen = int((~is_seen).sum())
    if n_seen == 0 or n_unseen == 0:
        raise ValueError("test set must contain both seen and unseen samples")
    correct = preds == y
    out = {
        "overall_acc": float(correct.mean()),
        "seen_acc": float(correct[is_seen].mean()),
        "unseen_acc": float(correct[~is_seen].mean()),
        "n_seen": n_seen,
        "n_unseen": n_unseen,
    }
    cols = np.flatnonzero(seen_mask)
    chop = chopped_logits(scores[is_seen], seen_mask)
    chop_preds = cols[np.argmax(chop, axis=1)]
    out["seen_chopped_acc"] = float((chop_preds == y[is_seen]).mean())
    if toxicity is not None:
        toxic = np.isin(y, toxicity.toxic_classes())
        if not toxic.any():
            raise ValueError("toxicity map given but no toxic samples present")
        misrouted = np.isin(preds[toxic], toxicity.non_toxic_classes())
        out["false_negative_rate"] = float(misrouted.mean())
    else:
        out["false_negative_rate"] = None
    return out


def evaluate(params: ModelParams, target_test: Dataset, seen_mask,
             toxicity: Optional[ToxicityMap] = None,
             k_spectrum: int = 20) -> EvalReport:
    """Eval-mode evaluation of a model on the full target test set."""
    if len(target_test) == 0:
        raise ValueError("empty test set")
    trace = forward(params, target_test.X, mode="eval")
    views = accuracy_views(trace.logits, target_test.y, seen_mask, toxicity)
    feats = trace.features
    k = min(k_spectrum, feats.shape[0], feats.shape[1])
    spectrum = top_singular_values(feats, k)
    return EvalReport(
        overall_acc=views["overall_acc"],
        seen_acc=views["seen_acc"],
        unseen_acc=views["unseen_acc"],
        seen_chopped_acc=views["seen_chopped_acc"],
        false_negative_rate=views["false_negative_rate"],
        spectrum=spectrum,
        effective_rank=effective_rank(spectrum),
        n_seen=views["n_seen"],
        n_unseen=views["n_unseen"],
    )


def report_from_scores(scores: np.ndarray, target_test: Dataset, seen_mask,
                       toxicity: Optional[ToxicityMap] = None) -> EvalReport:
    """EvalReport for prediction-level ensembles, which have class scores
    but no feature space; spectrum fields are empty/NaN."""
    views = accuracy_views(scores, target_test.y, seen_mask, toxicity)
    return EvalReport(
        overall_acc=views["overall_acc"],
        seen_acc=views["seen_acc"],
        unseen_acc=views["unseen_acc"],
        seen_chopped_acc=views["seen_chopped_acc"],
        false_negative_rate=views["false_negative_rate"],
        spectrum=Spectrum(np.empty(0)),
        effective_rank=float("nan"),
        n_seen=views["n_seen"],
        n_unseen=views["n_unseen"],
    )


def aggregate_seeds(reports: Sequence[EvalReport],
                    protocols: Optional[Sequence[str]] = None) -> AggregateReport:
    """Population mean and variance of each scalar metric across seeds."""
    if len(reports) < 2:
        raise ValueError("need at least 2 reports to aggregate")
    if protocols is not None and len(set(protocols)) != 1:
        raise ValueError(f"mismatched protocols: {sorted(set(protocols))}")
    means, variances = {}, {}
    for m in SCALAR_METRICS:
        vals = [getattr(r, m) for r in reports]
        if any(v is None for v in vals):
            continue
        arr = np.array(vals, dtype=np.float64)
        means[m] = float(arr.mean())
        variances[m] = float(arr.var())  # population variance
    return AggregateReport(means=means, variances=variances, count=len(reports))


def spectrum_trace(run, target_test: Dataset, k: int = 20) -> list:
    """Per-epoch feature spectra of a run's retained checkpoints, starting
    from the source model at position zero."""
    if getattr(run, "checkpoints", None) is None:
        raise ValueError("run did not retain checkpoints")
    out = []
    for params in run.checkpoints:
        feats = forward(params, target_test.X, mode="eval").features
        kk = min(k, feats.shape[0], feats.shape[1])
        out.append(top_singular_values(feats, kk))
    return out
