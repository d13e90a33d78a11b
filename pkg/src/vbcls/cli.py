"""Command-line entry point: ``vbcls gen|train|eval|loo|ablate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from vbcls import shiftgen
from vbcls.errors import ConfigurationError, FileSystemError, VBCLSError
from vbcls.harness import (
    PRIOR_MODES,
    VARIANTS,
    emit_report,
    evaluate,
    load_config,
    load_domains,
    make_predictor,
    run_ablation,
    run_leave_one_out,
    variant_settings,
)
from vbcls.harness.report import HISTORY_COLUMNS
from vbcls.labelshift import (
    Calibration,
    LabelDistribution,
    estimate_from_counts,
    fit_calibration,
    pooled,
    refine_target_prior,
)
from vbcls.model import read_checkpoint, save_checkpoint, train


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FileSystemError(f"cannot create {out}: {exc.strerror}", path=str(out)) from exc
    return out


def cmd_gen(args) -> None:
    specs = shiftgen.make_benchmark(args.scenario, args.domains, args.classes, args.dim, args.n,
                                    args.severity, args.seed)
    out = _out_dir(args.out)
    for i, spec in enumerate(specs):
        shiftgen.write_feature_csv(shiftgen.generate_domain(spec, i), out / f"domain{i}.csv")
    print(f"wrote {len(specs)} domains to {out}")


def cmd_train(args) -> None:
    """Train one model on the configured source domains and save a checkpoint.

    Sources are every domain except ``holdout`` (restricted to
    ``source_domains`` when given). The held-out share of each source fits
    the calibration used by refined-prior evaluation.
    """
    config = load_config(args.config)
    domains, n_classes = load_domains(config)
    ids = range(len(domains)) if config.source_domains is None else config.source_domains
    ids = [i for i in ids if i != config.holdout]
    if not ids:
        raise ConfigurationError("no source domains left to train on")
    parts = [shiftgen.split(domains[i], config.train_fraction, config.data.seed + j)
             for j, i in enumerate(ids)]
    train_parts = [a for a, _ in parts]
    train_cfg, weights = variant_settings(config.variant, config.train, config.weights)
    params, history = train(train_parts, train_cfg, weights, n_classes=n_classes)

    predictor = make_predictor(config.variant, params)
    held_probs = np.concatenate([predictor.base_probs(b.features) for _, b in parts])
    cal = fit_calibration(held_probs, np.concatenate([b.labels for _, b in parts]))
    meta = {
        "variant": config.variant,
        "pooled_prior": pooled(train_parts, n_classes).tolist(),
        "calibration": {"temperature": cal.temperature, "bias": list(cal.bias)},
        "sources": [domains[i].name or str(i) for i in ids],
    }
    out = _out_dir(args.out)
    save_checkpoint(params, train_cfg, out / "model.ckpt", meta)
    try:
        with (out / "history.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for rec in history:
                w.writerow([rec.epoch, *rec.losses.values(), rec.train_acc])
    except OSError as exc:
        raise FileSystemError(f"cannot write history: {exc.strerror}", path=str(out)) from exc
    print(f"saved {out / 'model.ckpt'} after {len(history)} epochs")


def cmd_eval(args) -> None:
    ckpt = read_checkpoint(args.checkpoint)
    meta = ckpt.meta
    n_classes = ckpt.params.dims.classes
    data = shiftgen.load_feature_csv(args.data, n_classes=n_classes)
    predictor = make_predictor(meta.get("variant", "vbcls"), ckpt.params)
    p_pool = (LabelDistribution(meta["pooled_prior"]) if "pooled_prior" in meta
              else LabelDistribution.uniform(n_classes))
    if args.prior_mode == "pooled":
        p_dom = p_pool
    elif args.prior_mode == "oracle":
        p_dom = estimate_from_counts(data.labels, n_classes)
    else:
        base = predictor.base_probs(data.features)
        if "calibration" in meta:
            c = meta["calibration"]
            base = Calibration(c["temperature"], tuple(c["bias"]))(base)
        p_dom = refine_target_prior(base, p_pool, LabelDistribution.uniform(n_classes))
    result = evaluate(predictor, data, p_dom, p_pool)
    print(json.dumps({
        "accuracy": result.accuracy,
        "per_class_accuracy": result.per_class_accuracy,
        "confusion": result.confusion.tolist(),
        "target_prior": p_dom.tolist(),
        "n": len(data),
    }, indent=2))


def cmd_loo(args) -> None:
    report = run_leave_one_out(load_config(args.config))
    emit_report(report, args.out)
    for t in report.targets:
        shown = "failed" if t.mean is None else f"{t.mean:.4f} +/- {t.sd:.4f}"
        print(f"{t.target}: {shown}")


def cmd_ablate(args) -> None:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise ConfigurationError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    reports = run_ablation(load_config(args.config), variants)
    out = _out_dir(args.out)
    for variant, report in reports.items():
        emit_report(report, out / variant)
        means = [t.mean for t in report.targets if t.mean is not None]
        avg = f"{sum(means) / len(means):.4f}" if means else "failed"
        print(f"{variant}: {avg}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbcls", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic per-domain feature CSVs")
    p.add_argument("--scenario", required=True, choices=shiftgen.SCENARIOS)
    p.add_argument("--domains", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="samples per domain")
    p.add_argument("--severity", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a feature CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prior-mode", default="pooled", choices=PRIOR_MODES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loo", help="leave-one-domain-out run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("ablate", help="leave-one-domain-out run for several variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (VBCLSError, OSError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"vbcls: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
