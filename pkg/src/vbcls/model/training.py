from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from vbcls import autodiff as ad
from vbcls.distributions import KL_FORMULAS
from vbcls.errors import ConfigurationError, DivergenceError, NumericInstabilityError
from vbcls.labelshift import LabelDistribution, estimate_from_counts, pooled
from vbcls.model.losses import LABEL_SOURCES, Batch, LossBreakdown, LossWeights, forward_terms
from vbcls.model.networks import Dims, ModelParams, group_of, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 0.1
    classifier_lr_multiplier: float = 10.0
    label_smoothing: float = 0.1
    latent_dim: int = 8
    hidden: int = 32
    seed: int = 0
    encoder_label_source: str = "ground_truth"
    kl_formula: str = "standard"
    posterior_alignment: bool = True
    label_prior_only: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not 0 < self.lr_drop_fraction <= 1:
            raise ConfigurationError("lr_drop_fraction must lie in (0, 1]")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        if self.encoder_label_source not in LABEL_SOURCES:
            raise ConfigurationError(f"encoder_label_source must be one of {LABEL_SOURCES}")
        if self.kl_formula not in KL_FORMULAS:
            raise ConfigurationError(f"kl_formula must be one of {KL_FORMULAS}")
        if self.latent_dim < 1 or self.hidden < 1:
            raise ConfigurationError("latent_dim and hidden must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_options(self) -> dict:
        return dict(label_source=self.encoder_label_source, smoothing=self.label_smoothing,
                    kl_formula=self.kl_formula, align=self.posterior_alignment,
                    label_prior_only=self.label_prior_only)

    def drop_epoch(self) -> int:
        """First (0-based) epoch trained at the reduced learning rate."""
        return int(math.floor(self.lr_drop_fraction * self.epochs + 1e-9))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    train_acc: float


def check_datasets(datasets: Sequence) -> tuple[int, int]:
    """Return (D, K) shared by the source datasets."""
    if len(datasets) < 2:
        raise ConfigurationError(f"training needs at least 2 source domains, got {len(datasets)}")
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise ConfigurationError(f"source domains disagree on feature dimension: {sorted(dims)}")
    if any(len(d) == 0 for d in datasets):
        raise ConfigurationError("every source domain needs at least one sample")
    n_classes = 1 + max(int(d.labels.max()) for d in datasets)
    return dims.pop(), n_classes


def train(datasets: Sequence, config: TrainConfig, weights: LossWeights | None = None,
          n_classes: int | None = None) -> tuple[ModelParams, list[EpochRecord]]:
    """Fit all four networks on the source ``datasets``.

    Domain ``i`` of the model is ``datasets[i]`` regardless of each dataset's
    own ``domain_id``. Initialization, shuffling and reparameterization noise
    all draw from one generator seeded by ``config.seed``.
    """
    weights = weights or LossWeights()
    D, K = check_datasets(datasets)
    K = max(K, n_classes or 0)
    dims = Dims(D, K, len(datasets), config.latent_dim, config.hidden)
    rng = np.random.default_rng(config.seed)
    params = init_params(dims, rng)

    priors = [estimate_from_counts(d.labels, K) for d in datasets]
    pool = pooled(datasets, K)
    x_all = np.concatenate([d.features for d in datasets])
    y_all = np.concatenate([d.labels for d in datasets])
    d_all = np.concatenate([np.full(len(d), i, dtype=np.int64) for i, d in enumerate(datasets)])

    trainable = params.group("label_prior") if config.label_prior_only else params.tensors
    multipliers = {n: config.classifier_lr_multiplier for n in trainable
                   if group_of(n) in ("label_prior", "classifier")}
    state = ad.init_state(trainable, config.lr, config.momentum, config.weight_decay, multipliers)
    opts = config.loss_options()

    n = y_all.size
    history = []
    for epoch in range(config.epochs):
        state.lr = config.lr * (config.lr_drop_factor if epoch >= config.drop_epoch() else 1.0)
        order = rng.permutation(n)
        totals = np.zeros(6)
        correct = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = Batch(x_all[idx], y_all[idx], d_all[idx])
            noise = rng.standard_normal((idx.size, dims.latent))
            ad.reset_tape()
            try:
                with np.errstate(over="raise", invalid="raise"):
                    terms = forward_terms(batch, params, weights, priors, pool, noise, **opts)
            except (NumericInstabilityError, FloatingPointError) as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}",
                                      epoch=epoch, batch=b) from exc
            values = np.array(terms.breakdown().values())
            if not np.all(np.isfinite(values)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}",
                                      epoch=epoch, batch=b)
            ad.backward(terms.objective, trainable.values())
            ad.sgd_step(trainable, None, state)
            totals += values * idx.size
            correct += terms.train_correct
        record = EpochRecord(epoch, LossBreakdown(*(totals / n)), correct / n)
        history.append(record)
        log.debug("epoch %d: total_f=%.4f train_acc=%.3f", epoch, record.losses.total_f, record.train_acc)
    return params, history


def source_priors(datasets: Sequence, n_classes: int) -> tuple[list[LabelDistribution], LabelDistribution]:
    return [estimate_from_counts(d.labels, n_classes) for d in datasets], pooled(datasets, n_classes)
