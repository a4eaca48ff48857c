"""Metrics and the all-subsets evaluation protocol."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .encoders import Batch, ModalityMask, Sample, all_masks, collate
from .errors import ConfigError, ProtocolError
from .seeding import make_rng

MAX_MODALITIES = 8


# metrics


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def argmax_predictions(probs: np.ndarray) -> np.ndarray:
    # np.argmax keeps the first maximum, so ties go to the lowest class index
    return np.argmax(probs, axis=1)


def per_class_f1(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    """F1 per class; a class never predicted and never present scores 0."""
    cm = confusion_matrix(labels, preds, num_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    out = np.zeros(num_classes)
    nz = denom > 0
    out[nz] = 2 * tp[nz] / denom[nz]
    return out


def macro_f1(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> float:
    return float(np.mean(per_class_f1(labels, preds, num_classes)))


def accuracy(labels: np.ndarray, preds: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(labels == np.asarray(preds)))


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney AUC with mid-ranks for ties; None when a side is empty."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Macro one-vs-rest AUC over classes that have both positives and negatives.

    Returns None when no class qualifies (e.g. every label is the same).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    per_class = []
    for c in range(scores.shape[1]):
        a = binary_auc(scores[:, c], labels == c)
        if a is not None:
            per_class.append(a)
    if not per_class:
        return None
    return float(np.mean(per_class))


# protocol


@dataclass
class SubsetReport:
    mask: ModalityMask
    acc: float
    macro_f1: float
    auc: float | None
    per_class_f1: np.ndarray
    n: int
    seed: int = 0

    def metric(self, name: str) -> float:
        value = getattr(self, name)
        return float("nan") if value is None else float(value)


METRICS = ("acc", "macro_f1", "auc")


@dataclass
class EvalSummary:
    """Per-seed subset reports plus their averages.

    ``averages[seed][metric]`` is the unweighted mean over subsets for one
    seed; ``mean``/``std`` aggregate those over seeds (population std).
    """

    reports: dict[int, list[SubsetReport]]
    averages: dict[int, dict[str, float]] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return list(self.reports)


@dataclass
class EvalConfig:
    samples: int = 10
    deterministic: bool = False
    seeds: tuple[int, ...] = (0,)


def _as_batch(test_set, dims, dtype) -> Batch:
    if isinstance(test_set, Batch):
        return test_set
    return collate(list(test_set), dims, dtype)


def scores_report(probs: np.ndarray, labels: np.ndarray, mask: ModalityMask, num_classes: int, seed: int = 0) -> SubsetReport:
    preds = argmax_predictions(probs)
    return SubsetReport(
        mask=mask,
        acc=accuracy(labels, preds),
        macro_f1=macro_f1(labels, preds, num_classes),
        auc=auc(probs, labels),
        per_class_f1=per_class_f1(labels, preds, num_classes),
        n=int(len(labels)),
        seed=seed,
    )


def evaluate_subset(model, test_set, mask: ModalityMask, config: EvalConfig | None = None, seed: int = 0) -> SubsetReport:
    """Re-mask every (complete) test subject to ``mask`` and score the model."""
    config = config or EvalConfig()
    if mask.is_empty():
        raise ProtocolError("evaluation mask must observe at least one modality")
    cfg = model.config
    if len(mask) != cfg.num_modalities:
        raise ProtocolError(f"mask has {len(mask)} bits for a {cfg.num_modalities}-modality model")
    batch = _as_batch(test_set, cfg.dims, cfg.dtype)
    if not batch.mask.all():
        raise ProtocolError("test samples must be fully observed")
    masked = batch.with_mask(mask)
    deterministic = config.deterministic or cfg.deterministic_inference
    rng = make_rng(seed, "eval", mask.to_int())
    probs = model.predict_proba(masked, samples=config.samples, rng=rng, deterministic=deterministic)
    return scores_report(probs, batch.labels, mask, cfg.num_classes, seed)


def summarise(reports: dict[int, list[SubsetReport]]) -> EvalSummary:
    summary = EvalSummary(reports)
    for seed, rows in reports.items():
        summary.averages[seed] = {m: float(np.mean([r.metric(m) for r in rows])) for m in METRICS}
    for m in METRICS:
        vals = np.array([summary.averages[s][m] for s in reports])
        summary.mean[m] = float(vals.mean()) if vals.size else float("nan")
        summary.std[m] = float(vals.std()) if vals.size else float("nan")
    return summary


def evaluate_all(model, test_set, config: EvalConfig | None = None) -> EvalSummary:
    """Score every non-empty subset (ascending mask order) for each evaluation seed."""
    config = config or EvalConfig()
    M = model.config.num_modalities
    if M > MAX_MODALITIES:
        raise ConfigError(f"subset enumeration is capped at {MAX_MODALITIES} modalities, got {M}")
    batch = _as_batch(test_set, model.config.dims, model.config.dtype)
    reports = {}
    for seed in config.seeds:
        reports[seed] = [evaluate_subset(model, batch, mask, config, seed) for mask in all_masks(M)]
    return summarise(reports)


# report files


def _num(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.10g}"


def report_csv(summary: EvalSummary, num_classes: int) -> str:
    out = io.StringIO()
    cols = ["seed", "mask", "n", "acc", "macro_f1", "auc"] + [f"f1_{c}" for c in range(num_classes)]
    out.write(",".join(cols) + "\n")
    for seed, rows in summary.reports.items():
        for r in rows:
            vals = [str(seed), str(r.mask), str(r.n), _num(r.acc), _num(r.macro_f1), _num(r.auc)]
            vals += [_num(v) for v in r.per_class_f1]
            out.write(",".join(vals) + "\n")
    out.write("[summary]\n")
    out.write("metric,mean,std,mean(std) %\n")
    for m in METRICS:
        out.write(f"{m},{_num(summary.mean[m])},{_num(summary.std[m])},{format_mean_std(summary.mean[m], summary.std[m])}\n")
    return out.getvalue()


def format_mean_std(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ({100 * std:.1f})"


def report_table(summary: EvalSummary) -> str:
    """Aligned plain-text table: one row per subset, seed-averaged."""
    seeds = summary.seeds
    first = summary.reports[seeds[0]]
    lines = [f"{'mask':<10}{'n':>6}{'ACC':>16}{'Macro-F1':>16}{'AUC':>16}"]
    for i, r in enumerate(first):
        cells = []
        for m in METRICS:
            vals = np.array([summary.reports[s][i].metric(m) for s in seeds])
            cells.append(format_mean_std(vals.mean(), vals.std()))
        lines.append(f"{str(r.mask):<10}{r.n:>6}" + "".join(f"{c:>16}" for c in cells))
    cells = [format_mean_std(summary.mean[m], summary.std[m]) for m in METRICS]
    lines.append(f"{'average':<10}{'':>6}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"
