import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openset_cae.evaluate import (
    OpennessSpec,
    auroc,
    baseline_cls,
    baseline_cls_dec,
    baseline_naive,
    build_report,
    error_histogram,
    histogram_svg,
    open_f_measure,
    openness,
    overlap_coefficient,
    read_histogram_csv,
    run_auroc_protocol,
    write_histogram_csv,
)
from openset_cae.infer import OpenSetPrediction, decide
from openset_cae.nets import NetworkDef, OpenSetModel
from openset_cae.data import gen_toy
from openset_cae.train import ErrorSets, TrainConfig


# published openness values, in percent, truncated to two decimals,
# so agreement is checked to within one unit in the last place
PUBLISHED_OPENNESS = [
    ("6 known of 10", OpennessSpec(6, 10, 6), 13.39),
    ("4 known + 10 other", OpennessSpec(4, 14, 4), 33.33),
    ("4 known + 50 other", OpennessSpec(4, 54, 4), 62.86),
    ("20 known of 200", OpennessSpec(20, 200, 20), 57.35),
]


@pytest.mark.parametrize("name,spec,pct", PUBLISHED_OPENNESS)
def test_openness_published_values(name, spec, pct):
    assert abs(100 * openness(spec) - pct) < 0.01


def test_openness_closed_set_and_monotone():
    assert openness(OpennessSpec(5, 5, 5)) == 0.0
    assert openness(OpennessSpec(5, 8, 5)) < openness(OpennessSpec(5, 9, 5))
    assert openness(OpennessSpec(4, 9, 4)) > openness(OpennessSpec(5, 9, 5))
    with pytest.raises(ValueError):
        OpennessSpec(3, 2, 3)


def pairwise_auroc(known, unknown) -> float:
    """Exhaustive Mann-Whitney count; unknowns are expected to score higher."""
    total = 0.0
    for a in known:
        for b in unknown:
            total += 1.0 if b > a else 0.5 if b == a else 0.0
    return total / (len(known) * len(unknown))


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([1.0, 1.0, 1.0], [1.0, 1.0]) == 0.5
    assert auroc([0.1, 0.2, 0.9], [0.3, 0.8, 0.95]) == pytest.approx(7 / 9, abs=1e-15)
    assert pairwise_auroc([0.1, 0.2, 0.9], [0.3, 0.8, 0.95]) == 7 / 9
    with pytest.raises(ValueError):
        auroc([], [1.0])


def random_score_pair(rng):
    n, m = int(rng.integers(1, 501)), int(rng.integers(1, 501))
    if rng.random() < 0.5:
        # coarse integer scores force many ties
        return rng.integers(0, 10, n).astype(float), rng.integers(0, 12, m).astype(float)
    return rng.normal(0, 1, n), rng.normal(0.5, 1, m)


@pytest.mark.parametrize("seed", range(10))
def test_auroc_matches_pairwise_oracle(seed):
    a, b = random_score_pair(np.random.default_rng(seed))
    assert auroc(a, b) == pairwise_auroc(a, b)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30, unique=True).flatmap(
    lambda xs: st.integers(1, len(xs)).map(lambda i: (xs[:i], xs[i:]))))
def test_auroc_direction_complement(split):
    a, b = split
    if not b:
        return
    assert auroc(a, b, higher="unknown") + auroc(a, b, higher="known") == pytest.approx(1.0, abs=1e-12)


def _p(known, y):
    return OpenSetPrediction(known=known, y_pred=y, rec_errors=(0.0,), min_error=0.0, tau=1.0)


def test_f_measure_examples():
    preds = [_p(True, 0), _p(True, 0), _p(True, 1), _p(False, 1), _p(True, 0)]
    gt = [0, 0, 1, 1, None]
    assert open_f_measure(preds, gt, 2) == pytest.approx((0.8 + 2 / 3) / 2, abs=1e-12)
    assert open_f_measure([_p(True, 0), _p(True, 1), _p(False, 0)], [0, 1, None], 2) == 1.0
    assert open_f_measure([_p(False, 0), _p(False, 1)], [0, 1], 2) == 0.0


def test_f_measure_permutation_invariant():
    rng = np.random.default_rng(0)
    preds = [_p(bool(rng.random() < 0.7), int(rng.integers(3))) for _ in range(60)]
    gt = [None if rng.random() < 0.3 else int(rng.integers(3)) for _ in range(60)]
    perm = rng.permutation(60)
    assert open_f_measure(preds, gt, 3) == open_f_measure([preds[i] for i in perm], [gt[i] for i in perm], 3)


def test_report_counts_sum_to_size():
    preds = [_p(True, 0), _p(True, 1), _p(False, 1), _p(True, 0), _p(False, 0)]
    gt = [0, 0, 1, None, None]
    r = build_report(preds, gt, 2, 0.1).to_dict()
    assert sum(r["counts"].values()) == len(preds)
    assert r["counts"] == {"known_correct": 1, "known_incorrect": 1, "known_rejected": 1,
                           "unknown_accepted": 1, "unknown_rejected": 1}


def _fixed_classifier(probs):
    m = OpenSetModel(NetworkDef(input_dim=2, k=2))
    for W, _ in m.classifier.layers:
        W.data[:] = 0.0
    m.classifier.layers[-1][1].data[:] = np.log(probs)
    return m


def test_baseline_cls_examples():
    X = np.zeros((1, 2))
    assert baseline_cls(_fixed_classifier([0.9, 0.1]), X)[0].known
    assert baseline_cls(_fixed_classifier([0.5, 0.5]), X)[0].known
    # top probability 0.4 needs three classes
    m = OpenSetModel(NetworkDef(input_dim=2, k=3))
    for W, _ in m.classifier.layers:
        W.data[:] = 0.0
    m.classifier.layers[-1][1].data[:] = np.log([0.4, 0.3, 0.3])
    assert not baseline_cls(m, X)[0].known


def test_baseline_cls_dec_examples():
    m = OpenSetModel(NetworkDef(input_dim=2, k=2), seed=1)
    X = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    err = np.array([p.min_error for p in baseline_cls_dec(m, X, 1.0)])
    assert all(p.known for p in baseline_cls_dec(m, X, err.max() / 0.95))
    assert not any(p.known for p in baseline_cls_dec(m, X, err.min() / 0.95 * 0.999))
    assert not any(p.known for p in baseline_cls_dec(m, X, 0.0)) or np.all(err == 0)
    with pytest.raises(ValueError):
        baseline_cls_dec(m, X, None)


def test_baseline_naive_separable():
    rng = np.random.default_rng(1)
    sets = ErrorSets(rng.uniform(0, 1, 300), rng.uniform(2, 3, 300))
    tau = baseline_naive(sets, 0.5)
    assert np.sum(sets.s_match > tau) + np.sum(sets.s_nonmatch < tau) == 0


def test_histogram_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    edges, dm, dnm = error_histogram(rng.normal(1, 0.1, 500), rng.normal(2, 0.2, 500), bins=30)
    assert (dm * np.diff(edges)).sum() == pytest.approx(1.0)
    write_histogram_csv(tmp_path / "h.csv", edges, dm, dnm)
    e2, dm2, dnm2 = read_histogram_csv(tmp_path / "h.csv")
    assert np.array_equal(edges, e2) and np.array_equal(dm, dm2) and np.array_equal(dnm, dnm2)
    assert overlap_coefficient(edges, dm, dnm) < 0.05
    assert overlap_coefficient(edges, dm, dm) == pytest.approx(1.0)
    svg = histogram_svg(edges, dm, dnm)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_auroc_protocol_deterministic():
    ds = gen_toy("four_gauss", 60, 1)
    cfg = TrainConfig(epochs_stage1=3, epochs_stage2=3, seed=1)
    r1 = run_auroc_protocol(ds, [0, 1], [2, 3], {}, cfg, trials=1)
    r2 = run_auroc_protocol(ds, [0, 1], [2, 3], {}, cfg, trials=1)
    assert r1 == r2 and 0.0 <= r1["mean_auroc"] <= 1.0
    with pytest.raises(ValueError):
        run_auroc_protocol(ds, [0, 1], [1, 2], {}, cfg)
