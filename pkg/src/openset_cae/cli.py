"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric or fit failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (
    DataFormatError,
    LabeledDataset,
    SplitSpec,
    gen_toy,
    load_idx,
    read_csv,
    split_known_unknown,
    write_csv,
)
from .evaluate import (
    OpennessSpec,
    auroc,
    build_report,
    error_histogram,
    histogram_svg,
    min_errors,
    openness,
    overlap_coefficient,
    predict_with_tau,
    write_histogram_csv,
)
from .evt import FitError, InsufficientDataError, compute_threshold
from .infer import ThresholdMissingError, batch_inference
from .nets import NetworkDef, OpenSetModel
from .tensor_core import NumericError
from .train import TrainConfig, collect_error_sets, train_stage1, train_stage2

log = logging.getLogger("openset_cae")

NET_KEYS = ("encoder_widths", "classifier_widths", "decoder_widths", "activation")
TRAIN_KEYS = ("alpha", "lr", "batch_size", "epochs_stage1", "epochs_stage2", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump_json(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_data(args) -> LabeledDataset:
    if getattr(args, "images", None) or getattr(args, "labels", None):
        if not (args.images and args.labels):
            raise UsageError("--images and --labels must be given together")
        return load_idx(args.images, args.labels)
    if not args.data:
        raise UsageError("a dataset is required (--data CSV or --images/--labels)")
    return read_csv(args.data)


def _split_for(model: OpenSetModel, ds: LabeledDataset) -> SplitSpec:
    s = model.meta.get("split")
    if s is None:
        return SplitSpec(sorted(np.unique(ds.labels).tolist()), [], 0.8, 0)
    return SplitSpec(**s)


def _split_openness(split: SplitSpec) -> float:
    k = len(split.known_classes)
    return openness(OpennessSpec(k, k + len(split.unknown_classes), k))


def _seed_fallback() -> int:
    env = os.environ.get("C2AE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"C2AE_SEED must be an integer, got {env!r}") from None


def cmd_gen_toy(args):
    seed = args.seed if args.seed is not None else _seed_fallback()
    ds = gen_toy(args.kind, args.n, seed, sigma=args.sigma)
    write_csv(ds, args.out)


def _run_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.config}: invalid JSON ({exc})") from None
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", _seed_fallback())
    return cfg


def cmd_train(args):
    cfg = _run_config(args)
    ds = _load_data(args)
    split_cfg = cfg.get("split", {})
    split = SplitSpec(
        split_cfg.get("known_classes", sorted(np.unique(ds.labels).tolist())),
        split_cfg.get("unknown_classes", []),
        split_cfg.get("train_fraction", 0.8),
        split_cfg.get("seed", cfg["seed"]),
    )
    train, _, _ = split_known_unknown(ds, split)
    net = {k: cfg[k] for k in NET_KEYS if k in cfg}
    tcfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    model = OpenSetModel(NetworkDef(input_dim=ds.dim, k=len(split.known_classes), **net), seed=tcfg.seed)
    t1 = train_stage1(model, train, tcfg)
    tm, tnm = train_stage2(model, train, tcfg)
    model.meta = {
        "split": split.to_dict(),
        "train": tcfg.to_dict(),
        "final_loss": {"stage1": t1[-1] if t1 else None, "match": tm[-1] if tm else None,
                       "nonmatch": tnm[-1] if tnm else None},
    }
    checkpoint.save_checkpoint(model, args.out)


def cmd_fit_evt(args):
    model = checkpoint.load_checkpoint(args.model)
    ds = _load_data(args)
    split = _split_for(model, ds)
    train, _, _ = split_known_unknown(ds, split)
    if args.pu == "openness":
        p_u = 0.5 * _split_openness(split)
    else:
        try:
            p_u = float(args.pu)
        except ValueError:
            raise UsageError(f"--pu must be a number in [0, 1] or 'openness', got {args.pu!r}") from None
        if not 0.0 <= p_u <= 1.0:
            raise UsageError(f"--pu must be in [0, 1], got {p_u}")
    seed = model.meta.get("train", {}).get("seed", _seed_fallback())
    sets = collect_error_sets(model, train, np.random.default_rng([seed, 3]))
    model.threshold = compute_threshold(sets, p_u)
    checkpoint.save_checkpoint(model, args.out or args.model)


def cmd_eval(args):
    model = checkpoint.load_checkpoint(args.model)
    ds = _load_data(args)
    split = _split_for(model, ds)
    _, test_k, test_u = split_known_unknown(ds, split)
    o = _split_openness(split)
    auc = None
    if len(test_u):
        auc = auroc(min_errors(model, test_k.features), min_errors(model, test_u.features), higher="unknown")
    if args.protocol == "auroc":
        if auc is None:
            raise DataFormatError("AUROC needs unknown-class test samples; the split has none")
        if model.threshold is None:
            report = {"auroc": auc, "openness": o}
            _dump_json(report, args.report)
            return
    if model.threshold is None:
        raise ThresholdMissingError("threshold not fitted")
    X = np.vstack([test_k.features, test_u.features])
    gt = list(test_k.labels.tolist()) + [None] * len(test_u)
    preds = predict_with_tau(model, X, model.threshold.tau_star)
    report = build_report(preds, gt, model.k, o, auc).to_dict()
    report["tau"] = model.threshold.tau_star
    report["p_u"] = model.threshold.p_u
    report["protocol"] = args.protocol
    _dump_json(report, args.report)


def cmd_infer(args):
    model = checkpoint.load_checkpoint(args.model)
    if model.threshold is None:
        raise ThresholdMissingError("threshold not fitted")
    ds = read_csv(args.input, require_labels=False)
    for p in batch_inference(model, ds.features):
        sys.stdout.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def cmd_plot_hist(args):
    model = checkpoint.load_checkpoint(args.model)
    ds = _load_data(args)
    train, _, _ = split_known_unknown(ds, _split_for(model, ds))
    seed = model.meta.get("train", {}).get("seed", _seed_fallback())
    sets = collect_error_sets(model, train, np.random.default_rng([seed, 3]))
    edges, dm, dnm = error_histogram(sets.s_match, sets.s_nonmatch, bins=args.bins)
    ovl = overlap_coefficient(edges, dm, dnm)
    Path(args.out).write_text(histogram_svg(edges, dm, dnm, title=f"Match vs non-match errors (overlap {ovl:.3f})"))
    if args.csv:
        write_histogram_csv(args.csv, edges, dm, dnm)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="openset-cae", description="Class-conditioned auto-encoder open-set recognition.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def data_args(sp):
        sp.add_argument("--data", help="CSV dataset (x0..xD-1,label)")
        sp.add_argument("--images", help="IDX image file")
        sp.add_argument("--labels", help="IDX label file")

    g = sub.add_parser("gen-toy", help="write a 2-D toy dataset as CSV")
    g.add_argument("--kind", required=True, choices=["two-gauss", "four-gauss", "uni-gauss",
                                                     "two_gauss", "four_gauss", "uni_gauss"])
    g.add_argument("--n", type=int, required=True, help="samples per class")
    g.add_argument("--seed", type=int)
    g.add_argument("--sigma", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="run stage 1 and stage 2 training")
    t.add_argument("--config")
    data_args(t)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    t.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-evt", help="fit tail models and the operating threshold")
    f.add_argument("--model", required=True)
    data_args(f)
    f.add_argument("--pu", default="0.5", help="prior of unknowns, or 'openness' for 0.5 * openness")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit_evt)

    e = sub.add_parser("eval", help="evaluate on the held-out split")
    e.add_argument("--model", required=True)
    e.add_argument("--protocol", required=True, choices=["auroc", "fmeasure"])
    data_args(e)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="print one prediction per input row as JSON")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.set_defaults(func=cmd_infer)

    h = sub.add_parser("plot-hist", help="match / non-match error histograms")
    h.add_argument("--model", required=True)
    data_args(h)
    h.add_argument("--out", required=True)
    h.add_argument("--csv")
    h.add_argument("--bins", type=int, default=50)
    h.set_defaults(func=cmd_plot_hist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ThresholdMissingError, FitError, InsufficientDataError, NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, checkpoint.CheckpointFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
