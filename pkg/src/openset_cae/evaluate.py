"""Open-set metrics, ablation baselines and experiment protocols."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, SplitSpec, split_known_unknown, stratified_subsample
from .evt import compute_threshold, empirical_threshold
from .infer import OpenSetPrediction, decide, reconstruction_errors
from .nets import NetworkDef, OpenSetModel, forward_closed
from .train import (
    ErrorSets,
    TrainConfig,
    collect_error_sets,
    conditioned_errors,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)


@dataclass
class OpennessSpec:
    n_train: int
    n_test: int
    n_target: int

    def __post_init__(self):
        if self.n_train < 1 or self.n_target < 1 or self.n_test < self.n_target:
            raise ValueError(f"invalid openness counts {self}")


def openness(spec: OpennessSpec) -> float:
    return 1.0 - math.sqrt(2.0 * spec.n_train / (spec.n_test + spec.n_target))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (before + (counts + 1) / 2.0)[inverse]


def auroc(scores_known, scores_unknown, higher: str = "unknown") -> float:
    """Mann-Whitney AUROC; tied (known, unknown) pairs count one half.

    ``higher`` names the group expected to score higher.
    """
    a = np.asarray(scores_known, dtype=np.float64).ravel()
    b = np.asarray(scores_unknown, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be non-empty")
    if higher not in ("unknown", "known"):
        raise ValueError("higher must be 'unknown' or 'known'")
    if higher == "known":
        a, b = b, a
    ranks = _average_ranks(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def open_f_measure(predictions: list[OpenSetPrediction], ground_truth, k: int | None = None) -> float:
    """Macro F1 over known classes; accepted unknowns are false positives."""
    if not predictions:
        raise ValueError("no predictions")
    per_class = _per_class_counts(predictions, ground_truth, k)
    f1 = [2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
          for tp, fp, fn, support in per_class.values() if support > 0]
    return float(np.mean(f1)) if f1 else 0.0


def _per_class_counts(predictions, ground_truth, k=None):
    gt = list(ground_truth)
    if len(gt) != len(predictions):
        raise ValueError("one ground-truth entry per prediction required")
    if k is None:
        labels = [g for g in gt if g is not None] + [p.y_pred for p in predictions]
        k = max(labels) + 1 if labels else 0
    stats = {c: [0, 0, 0, 0] for c in range(k)}  # tp, fp, fn, support
    for p, g in zip(predictions, gt):
        said = p.y_pred if p.known else None
        if g is not None:
            stats[g][3] += 1
            if said == g:
                stats[g][0] += 1
            else:
                stats[g][2] += 1
        if said is not None and said != g:
            stats[said][1] += 1
    return {c: tuple(v) for c, v in stats.items()}


@dataclass
class EvalReport:
    openness: float
    auroc: float | None = None
    f_measure: float | None = None
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "openness": self.openness,
            "auroc": self.auroc,
            "f_measure": self.f_measure,
            "precision": self.precision,
            "recall": self.recall,
            "counts": self.counts,
        }
        d.update(self.extra)
        return d


def decision_counts(predictions, ground_truth) -> dict:
    c = dict.fromkeys(["known_correct", "known_incorrect", "known_rejected",
                       "unknown_accepted", "unknown_rejected"], 0)
    for p, g in zip(predictions, ground_truth):
        if g is None:
            c["unknown_accepted" if p.known else "unknown_rejected"] += 1
        elif not p.known:
            c["known_rejected"] += 1
        else:
            c["known_correct" if p.y_pred == g else "known_incorrect"] += 1
    return c


def build_report(predictions, ground_truth, k: int, openness_value: float, auroc_value=None) -> EvalReport:
    stats = _per_class_counts(predictions, ground_truth, k)
    precision = [tp / (tp + fp) if tp + fp else 0.0 for tp, fp, _, _ in stats.values()]
    recall = [tp / (tp + fn) if tp + fn else 0.0 for tp, _, fn, _ in stats.values()]
    return EvalReport(
        openness=openness_value,
        auroc=auroc_value,
        f_measure=open_f_measure(predictions, ground_truth, k),
        precision=precision,
        recall=recall,
        counts=decision_counts(predictions, ground_truth),
    )


# -- ablation baselines -------------------------------------------------------

def baseline_cls(model: OpenSetModel, X) -> list[OpenSetPrediction]:
    """Reject when the top softmax probability is below 0.5."""
    _, p, y_pred = forward_closed(model, X)
    top = p.max(axis=1)
    return [OpenSetPrediction(known=bool(t >= 0.5), y_pred=int(y), rec_errors=(), min_error=math.nan, tau=0.5)
            for t, y in zip(top, y_pred)]


def max_train_error(model: OpenSetModel, dataset: LabeledDataset) -> float:
    """Largest match-condition reconstruction error over the training set."""
    return float(conditioned_errors(model, dataset.features, dataset.labels).max())


def baseline_cls_dec(model: OpenSetModel, X, max_error: float | None) -> list[OpenSetPrediction]:
    """Reject when the error under the predicted class exceeds 95% of the max training error."""
    if max_error is None:
        raise ValueError("CLS+DEC needs the maximum training reconstruction error")
    X = model._check_input(X)
    _, _, y_pred = forward_closed(model, X)
    err = conditioned_errors(model, X, y_pred)
    cut = 0.95 * max_error
    return [OpenSetPrediction(known=not bool(e > cut), y_pred=int(y), rec_errors=(float(e),),
                              min_error=float(e), tau=cut)
            for e, y in zip(err, y_pred)]


def baseline_naive(error_sets: ErrorSets, p_u: float) -> float:
    """Threshold from raw error counts on the same grid, without tail models."""
    return empirical_threshold(error_sets.s_match, error_sets.s_nonmatch, p_u)


# -- protocols ----------------------------------------------------------------

def min_errors(model: OpenSetModel, X) -> np.ndarray:
    return reconstruction_errors(model, X)[1].min(axis=1)


def predict_with_tau(model: OpenSetModel, X, tau: float) -> list[OpenSetPrediction]:
    """Vectorized k-inference for evaluation sweeps."""
    y_pred, errs = reconstruction_errors(model, X)
    return [decide(e, y, tau) for e, y in zip(errs, y_pred)]


def _make_netdef(dataset: LabeledDataset, k: int, net: dict) -> NetworkDef:
    return NetworkDef(input_dim=dataset.dim, k=k, **net)


def run_auroc_protocol(dataset: LabeledDataset, known_classes, unknown_classes, net: dict,
                       config: TrainConfig, trials: int = 1, train_fraction: float = 0.8,
                       n_train: int | None = None, resample_classes: bool = False,
                       return_models: bool = False) -> dict:
    """Mean AUROC of the min-over-k reconstruction error, unknowns scoring high.

    With ``resample_classes`` each trial draws a fresh known/unknown partition
    of the same sizes from the union of both sets. ``return_models`` adds the
    trained model of every trial under ``"models"``.
    """
    known_classes, unknown_classes = list(known_classes), list(unknown_classes)
    if set(known_classes) & set(unknown_classes):
        raise ValueError("known and unknown class sets overlap")
    aucs, splits, models = [], [], []
    for t in range(trials):
        seed = config.seed + t
        known, unknown = known_classes, unknown_classes
        if resample_classes:
            pool = np.array(sorted(known_classes + unknown_classes))
            perm = np.random.default_rng([seed, 0xC1A5]).permutation(pool)
            known = sorted(perm[:len(known_classes)].tolist())
            unknown = sorted(perm[len(known_classes):].tolist())
        train, test_k, test_u = split_known_unknown(dataset, SplitSpec(known, unknown, train_fraction, seed))
        if n_train is not None:
            train = stratified_subsample(train, n_train, seed)
        cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
        model = OpenSetModel(_make_netdef(dataset, len(known), net), seed=seed)
        train_stage1(model, train, cfg)
        train_stage2(model, train, cfg)
        a = auroc(min_errors(model, test_k.features), min_errors(model, test_u.features), higher="unknown")
        log.info("trial %d known=%s auroc=%.4f", t, known, a)
        aucs.append(a)
        splits.append({"known": known, "unknown": unknown})
        if return_models:
            models.append(model)
    out = {"mean_auroc": float(np.mean(aucs)), "aurocs": aucs, "splits": splits}
    if return_models:
        out["models"] = models
    return out


FMEASURE_METHODS = ("CLS", "CLS+DEC", "Naive", "Proposed(p_u=0.5)", "Proposed")


def run_fmeasure_protocol(dataset: LabeledDataset, known_classes, unknown_order, net: dict,
                          config: TrainConfig, seeds=(0,), train_fraction: float = 0.8) -> dict:
    """Macro-F1 of every ablation method as unknown classes are added one by one.

    Level ``m`` tests on the known test split plus all samples of the first
    ``m`` classes in ``unknown_order``. ``Proposed`` uses p_u = 0.5 * openness;
    ``Naive`` uses the same prior on raw error counts.
    """
    unknown_order = list(unknown_order)
    k = len(known_classes)
    levels = list(range(len(unknown_order) + 1))
    opens = [openness(OpennessSpec(k, k + m, k)) for m in levels]
    scores = {name: np.zeros((len(seeds), len(levels))) for name in FMEASURE_METHODS}
    for si, seed in enumerate(seeds):
        cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
        train, test_k, test_u = split_known_unknown(
            dataset, SplitSpec(known_classes, unknown_order, train_fraction, seed))
        model = OpenSetModel(_make_netdef(dataset, k, net), seed=seed)
        train_stage1(model, train, cfg)
        dec_only = copy.deepcopy(model)
        train_stage2(model, train, cfg)
        train_stage2(dec_only, train, TrainConfig(**{**cfg.to_dict(), "alpha": 1.0}))
        sets = collect_error_sets(model, train, np.random.default_rng([seed, 3]))
        max_err = max_train_error(dec_only, train)

        for li, m in enumerate(levels):
            mask = np.isin(test_u.labels, unknown_order[:m])
            X = np.vstack([test_k.features, test_u.features[mask]])
            gt = list(test_k.labels) + [None] * int(mask.sum())
            p_u = 0.5 * opens[li]
            tau_prop = compute_threshold(sets, p_u).tau_star
            tau_half = compute_threshold(sets, 0.5).tau_star
            tau_naive = baseline_naive(sets, p_u)
            preds = {
                "CLS": baseline_cls(model, X),
                "CLS+DEC": baseline_cls_dec(dec_only, X, max_err),
                "Naive": predict_with_tau(model, X, tau_naive),
                "Proposed(p_u=0.5)": predict_with_tau(model, X, tau_half),
                "Proposed": predict_with_tau(model, X, tau_prop),
            }
            for name, pr in preds.items():
                scores[name][si, li] = open_f_measure(pr, gt, k)
    return {
        "openness": opens,
        "f_measure": {name: s.mean(axis=0).tolist() for name, s in scores.items()},
        "per_seed": {name: s.tolist() for name, s in scores.items()},
    }


# -- error histograms ---------------------------------------------------------

def error_histogram(s_match, s_nonmatch, bins: int = 50):
    """Normalized densities of both error sets over shared bins."""
    s_m = np.asarray(s_match, dtype=np.float64)
    s_nm = np.asarray(s_nonmatch, dtype=np.float64)
    lo = min(s_m.min(), s_nm.min())
    hi = max(s_m.max(), s_nm.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    dm, _ = np.histogram(s_m, bins=edges, density=True)
    dnm, _ = np.histogram(s_nm, bins=edges, density=True)
    return edges, dm, dnm


def overlap_coefficient(edges, d1, d2) -> float:
    """Shared area of two binned densities (0 = disjoint, 1 = identical)."""
    return float((np.minimum(d1, d2) * np.diff(edges)).sum())


def write_histogram_csv(path, edges, dm, dnm) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "match_density", "nonmatch_density"])
        for i in range(len(dm)):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(dm[i])), repr(float(dnm[i]))])


def read_histogram_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    left = np.array([float(r["bin_left"]) for r in rows])
    right = np.array([float(r["bin_right"]) for r in rows])
    dm = np.array([float(r["match_density"]) for r in rows])
    dnm = np.array([float(r["nonmatch_density"]) for r in rows])
    return np.append(left, right[-1]), dm, dnm


def histogram_svg(edges, dm, dnm, title="Reconstruction errors", width=640, height=360) -> str:
    """Overlaid match (blue) and non-match (red) density bars as SVG text."""
    pad_l, pad_r, pad_t, pad_b = 50, 20, 30, 40
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    top = max(float(dm.max()), float(dnm.max()), 1e-12)
    x0, x1 = float(edges[0]), float(edges[-1])
    sx = lambda v: pad_l + (v - x0) / (x1 - x0) * pw
    sy = lambda d: pad_t + ph - d / top * ph
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for dens, color in ((dm, "#1f77b4"), (dnm, "#d62728")):
        for i, d in enumerate(dens):
            if d <= 0:
                continue
            xl, xr = sx(edges[i]), sx(edges[i + 1])
            parts.append(f'<rect x="{xl:.2f}" y="{sy(d):.2f}" width="{xr - xl:.2f}" '
                         f'height="{pad_t + ph - sy(d):.2f}" fill="{color}" fill-opacity="0.5"/>')
    base = pad_t + ph
    parts += [
        f'<line x1="{pad_l}" y1="{base}" x2="{pad_l + pw}" y2="{base}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{base}" stroke="black"/>',
    ]
    for t in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{sx(t):.2f}" y="{base + 16}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{t:.3g}</text>')
    parts += [
        f'<text x="{pad_l + 10}" y="{pad_t + 12}" font-family="sans-serif" font-size="11" fill="#1f77b4">match</text>',
        f'<text x="{pad_l + 10}" y="{pad_t + 26}" font-family="sans-serif" font-size="11" fill="#d62728">non-match</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
