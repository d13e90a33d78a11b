"""Leave-one-domain-out runs, ablation variants and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from vbcls import shiftgen
from vbcls.errors import ConfigurationError, DivergenceError, EmptyDatasetError
from vbcls.harness.config import ExperimentConfig
from vbcls.harness.report import RunReport, TargetResult, summarize
from vbcls.labelshift import (
    LabelDistribution,
    estimate_from_counts,
    fit_calibration,
    kl_divergence,
    pooled,
    refine_target_prior,
)
from vbcls.model import (
    LabelPriorPredictor,
    LossWeights,
    ModelParams,
    TrainConfig,
    VBCLSPredictor,
    train,
)

log = logging.getLogger(__name__)

UNUSED_BY_VARIANT = {
    "vbcls": (),
    "vbcls_no_pa": (),
    "vbcls_no_lyhat": ("theta",),
    "uniform_yhat": ("theta",),
    "erm": ("latent_dim", "alpha", "beta", "theta"),
}


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: list[float | None]
    confusion: np.ndarray


@dataclass
class SeedResult:
    seed: int
    accuracy: float | None
    history: list = field(default_factory=list)
    target_prior: list[float] | None = None
    error: str | None = None
    predictor: object = None
    pool: LabelDistribution | None = None


def evaluate(predictor, dataset, p_dom: LabelDistribution, p_pool: LabelDistribution) -> EvalResult:
    """Argmax accuracy on ``dataset``; ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    probs = predictor.predict_proba(dataset.features, p_dom, p_pool)
    k = probs.shape[1]
    pred = np.argmax(probs, axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    support = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(k)]
    return EvalResult(float(np.trace(confusion) / len(dataset)), per_class, confusion)


def load_domains(config: ExperimentConfig) -> tuple[list[shiftgen.DomainDataset], int]:
    """Materialize every domain of the experiment and the class count."""
    src = config.data
    if src.csv is not None:
        domains = [shiftgen.load_feature_csv(p, domain_id=i) for i, p in enumerate(src.csv)]
        n_classes = max(src.n_classes, 1 + max(int(d.labels.max()) for d in domains if len(d)))
        return domains, n_classes
    specs = shiftgen.make_benchmark(src.scenario, src.n_domains, src.n_classes, src.dim,
                                    src.n_per_domain, src.severity, src.seed, class_sep=src.class_sep)
    return [shiftgen.generate_domain(s, i) for i, s in enumerate(specs)], src.n_classes


def variant_settings(variant: str, train_cfg: TrainConfig,
                     weights: LossWeights) -> tuple[TrainConfig, LossWeights]:
    if variant == "vbcls":
        return train_cfg, weights
    if variant == "vbcls_no_pa":
        return replace(train_cfg, posterior_alignment=False), weights
    if variant == "vbcls_no_lyhat":
        return train_cfg, replace(weights, theta=0.0)
    if variant == "uniform_yhat":
        return replace(train_cfg, encoder_label_source="uniform"), weights
    if variant == "erm":
        return replace(train_cfg, label_prior_only=True), weights
    raise ConfigurationError(f"unknown variant {variant!r}")


def make_predictor(variant: str, params: ModelParams):
    if variant == "erm":
        return LabelPriorPredictor(params)
    label_input = "uniform" if variant == "uniform_yhat" else "pseudo"
    return VBCLSPredictor(params, label_input=label_input, align=variant != "vbcls_no_pa")


def target_prior(mode: str, predictor, target, p_pool: LabelDistribution, n_classes: int,
                 config: ExperimentConfig, held_out: Sequence = ()) -> LabelDistribution:
    """Prior used to align target predictions.

    In refined mode the classifier outputs are first recalibrated on the
    held-out source rows (when ``config.calibrate`` is set and any exist).
    """
    if mode == "pooled":
        return p_pool
    if mode == "oracle":
        return estimate_from_counts(target.labels, n_classes)
    base = predictor.base_probs(target.features)
    held_out = [d for d in held_out if len(d)]
    if config.calibrate and held_out:
        cal = fit_calibration(np.concatenate([predictor.base_probs(d.features) for d in held_out]),
                              np.concatenate([d.labels for d in held_out]))
        base = cal(base)
    return refine_target_prior(base, p_pool, LabelDistribution.uniform(n_classes),
                               config.refine_iters, config.refine_tol)


def run_variant(variant: str, sources: Sequence, target, config: ExperimentConfig,
                n_classes: int | None = None, fold_seed: int | None = None) -> list[SeedResult]:
    """Train ``variant`` on ``sources`` once per seed and score it on ``target``.

    Each source is split ``train_fraction``/rest with ``fold_seed`` and only
    the first part is trained on; the whole target is evaluated.
    """
    train_base, weights = variant_settings(variant, config.train, config.weights)
    if n_classes is None:
        n_classes = 1 + max(int(d.labels.max()) for d in [*sources, target])
    split_seed = config.data.seed if fold_seed is None else fold_seed
    parts = [shiftgen.split(s, config.train_fraction, split_seed + j) for j, s in enumerate(sources)]
    train_parts = [a for a, _ in parts]
    held_out = [b for _, b in parts]
    p_pool = pooled(train_parts, n_classes)

    results = []
    for seed in config.seeds:
        cfg = replace(train_base, seed=seed)
        try:
            params, history = train(train_parts, cfg, weights, n_classes=n_classes)
        except DivergenceError as exc:
            log.warning("variant %s seed %d diverged: %s", variant, seed, exc)
            results.append(SeedResult(seed, None, error=str(exc)))
            continue
        predictor = make_predictor(variant, params)
        p_dom = target_prior(config.target_prior_mode, predictor, target, p_pool, n_classes, config, held_out)
        acc = evaluate(predictor, target, p_dom, p_pool).accuracy
        results.append(SeedResult(seed, acc, history, p_dom.tolist(), predictor=predictor, pool=p_pool))
    return results


def unused_parameters(variant: str) -> tuple[str, ...]:
    """Config fields the variant ignores entirely."""
    if variant not in UNUSED_BY_VARIANT:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return UNUSED_BY_VARIANT[variant]


def _history_rows(history) -> list[dict]:
    rows = []
    for rec in history:
        row = {"epoch": rec.epoch}
        row.update(zip(rec.losses.CSV_HEADER, rec.losses.values()))
        row["train_acc"] = rec.train_acc
        rows.append(row)
    return rows


def run_leave_one_out(config: ExperimentConfig, domains=None, n_classes: int | None = None) -> RunReport:
    """Hold out each domain in turn, train on the rest, and aggregate over seeds."""
    started = time.perf_counter()
    if domains is None:
        domains, n_classes = load_domains(config)
    elif n_classes is None:
        n_classes = 1 + max(int(d.labels.max()) for d in domains)
    if len(domains) < 3:
        raise ConfigurationError(f"leave-one-domain-out needs at least 3 domains, got {len(domains)}")
    targets = range(len(domains)) if config.targets is None else config.targets
    priors = [estimate_from_counts(d.labels, n_classes) for d in domains]

    results, histories = [], {}
    for t in targets:
        if not 0 <= t < len(domains):
            raise ConfigurationError(f"target index {t} out of range")
        pool_ids = range(len(domains)) if config.source_domains is None else config.source_domains
        source_ids = [i for i in pool_ids if i != t]
        if len(source_ids) < 2:
            raise ConfigurationError(f"target {t} leaves fewer than 2 source domains")
        sources = [domains[i] for i in source_ids]
        seed_results = run_variant(config.variant, sources, domains[t], config, n_classes,
                                   fold_seed=config.data.seed + 1000 * (t + 1))
        name = domains[t].name or str(t)
        accs = [r.accuracy for r in seed_results if r.accuracy is not None]
        mean, sd = summarize(accs) if accs else (None, None)
        p_pool_all = pooled(sources, n_classes)
        results.append(TargetResult(
            target=name,
            target_index=t,
            sources=[domains[i].name or str(i) for i in source_ids],
            seeds=[r.seed for r in seed_results],
            accuracies=accs,
            mean=mean,
            sd=sd,
            target_priors=[r.target_prior for r in seed_results if r.target_prior is not None],
            kl_pooled_to_target=kl_divergence(p_pool_all, priors[t]),
            failures=[{"seed": r.seed, "error": r.error} for r in seed_results if r.error],
        ))
        for r in seed_results:
            if r.error is None:
                histories[f"{name}_{r.seed}"] = _history_rows(r.history)

    pair_kl = {f"{domains[i].name or i}|{domains[j].name or j}": kl_divergence(priors[i], priors[j])
               for i in range(len(domains)) for j in range(len(domains)) if i != j}
    return RunReport(variant=config.variant, targets=results, histories=histories,
                     label_shift_kl=pair_kl, config=config.to_dict(),
                     duration_s=time.perf_counter() - started)


def run_ablation(config: ExperimentConfig, variants: Sequence[str]) -> dict[str, RunReport]:
    domains, n_classes = load_domains(config)
    return {v: run_leave_one_out(config.with_variant(v), domains, n_classes) for v in variants}
