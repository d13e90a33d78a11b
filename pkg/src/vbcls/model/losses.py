"""Composite training loss and its per-network gradient routing.

Each network is updated from its own objective:

* encoder: ``L1 + alpha*L2 + beta*L_CE2 + theta*L_yhat``
* decoders: ``L2``
* label prior: ``L_CE1``
* classifier: ``L_CE2``

All of this comes out of one backward pass. The latent code reaches the
decoders through ``scale_grad(z, alpha)`` and the classifier through
``scale_grad(z, beta)``. Both losses then enter the objective unweighted,
so the decoder and classifier see their raw gradients while the encoder
sees them scaled. Pseudo-labels fed to the encoder are constants, so no
term except L_CE1 reaches the label prior.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from vbcls import autodiff as ad
from vbcls.distributions import DiagGaussian, kl_from_differences, kl_to_prior
from vbcls.errors import ConfigurationError, InvalidShapeError, UnknownDomainError
from vbcls.labelshift import POOL_FLOOR, LabelDistribution
from vbcls.model.networks import ModelParams, decoder_out, encoder_contrast, encoder_heads, mlp

LABEL_SOURCES = ("ground_truth", "pseudo", "uniform")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    theta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    l_ce1: float
    l_ce2: float
    l_yhat: float
    total_f: float

    CSV_HEADER = ("L1", "L2", "L_CE1", "L_CE2", "L_yhat", "total_f")

    def values(self) -> tuple[float, ...]:
        return (self.l1, self.l2, self.l_ce1, self.l_ce2, self.l_yhat, self.total_f)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values())))


@dataclass
class Batch:
    """Row-stacked samples from several domains."""

    x: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        n = self.x.shape[0]
        if self.labels.shape != (n,) or self.domains.shape != (n,):
            raise InvalidShapeError("labels and domains need one entry per row of x")

    def __len__(self):
        return self.x.shape[0]

    def counts(self, n_domains: int) -> np.ndarray:
        """Per-domain sample counts M_i."""
        return np.bincount(self.domains, minlength=n_domains)

    def one_hot(self, n_classes: int) -> np.ndarray:
        y = np.zeros((len(self), n_classes))
        y[np.arange(len(self)), self.labels] = 1.0
        return y


@dataclass
class LossTerms:
    """Recorded loss tensors for one batch plus the routed training objective."""

    l1: ad.Tensor
    l2: ad.Tensor
    l_ce1: ad.Tensor
    l_ce2: ad.Tensor
    l_yhat: ad.Tensor
    total_f: ad.Tensor
    objective: ad.Tensor
    train_correct: int

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(*(t.item() for t in (self.l1, self.l2, self.l_ce1, self.l_ce2,
                                                  self.l_yhat, self.total_f)))


def _zero() -> ad.Tensor:
    return ad.Tensor(0.0)


def log_alignment(domains: np.ndarray, priors: Sequence[LabelDistribution],
                  pool: LabelDistribution) -> np.ndarray:
    """Row-wise log(p_dom / p_pool); adding it to logits performs posterior alignment."""
    present = np.unique(domains)
    if present.size and present.max() >= len(priors):
        raise ConfigurationError(f"no label prior supplied for domain {int(present.max())}")
    table = np.stack([np.log(np.maximum(p.probs, POOL_FLOOR)) for p in priors])
    return table[domains] - np.log(np.maximum(pool.probs, POOL_FLOOR))


def forward_terms(batch: Batch, params: ModelParams, weights: LossWeights,
                  priors: Sequence[LabelDistribution] | None, pool: LabelDistribution | None,
                  noise: np.ndarray, *, label_source: str = "ground_truth",
                  smoothing: float = 0.0, kl_formula: str = "standard",
                  align: bool = True, label_prior_only: bool = False,
                  route: bool = True) -> LossTerms:
    """Record every loss term for ``batch`` on the active tape.

    ``route=False`` drops the gradient routing (no scaling, pseudo-labels stay
    differentiable); the individual terms are then plain functions of all
    parameters, which is what the finite-difference checks need.
    """
    dims = params.dims
    if label_source not in LABEL_SOURCES:
        raise ConfigurationError(f"unknown encoder label source {label_source!r}")
    if batch.x.shape[1] != dims.features:
        raise InvalidShapeError(f"batch has {batch.x.shape[1]} features, model expects {dims.features}")
    if np.any(batch.domains < 0) or np.any(batch.domains >= dims.domains):
        raise UnknownDomainError(f"batch domain ids must lie in [0, {dims.domains})")
    n = len(batch)
    x = ad.Tensor(batch.x)
    labels = batch.labels

    lp_logits = mlp(x, params, "label_prior")
    l_ce1 = ad.softmax_cross_entropy(lp_logits, labels, smoothing)
    if label_prior_only:
        correct = int(np.sum(lp_logits.data.argmax(axis=1) == labels))
        zero = _zero()
        return LossTerms(zero, zero, l_ce1, zero, zero, zero, l_ce1, correct)

    if priors is None or pool is None:
        raise ConfigurationError("per-domain and pooled label priors are required")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (n, dims.latent):
        raise InvalidShapeError(f"noise must have shape {(n, dims.latent)}, got {noise.shape}")

    one_hot = ad.Tensor(batch.one_hot(dims.classes))
    if route:
        y_hat = ad.Tensor(ad.softmax(lp_logits))
    else:
        y_hat = ad.exp(ad.log_softmax(lp_logits))
    uniform = ad.Tensor(np.full((n, dims.classes), 1.0 / dims.classes))
    y_enc = {"ground_truth": one_hot, "pseudo": y_hat, "uniform": uniform}[label_source]

    mean, log_var = encoder_heads(x, y_enc, params)
    q = DiagGaussian(mean, log_var)
    l1 = ad.mean(kl_to_prior(q, formula=kl_formula))
    z = ad.add(mean, ad.mul(ad.exp(ad.mul(log_var, 0.5)), noise))

    z_dec = ad.scale_grad(z, weights.alpha) if route else z
    parts, index_sets = [], []
    for d in range(dims.domains):
        idx = np.flatnonzero(batch.domains == d)
        if idx.size == 0:
            continue
        recon = decoder_out(ad.take_rows(z_dec, idx), ad.take_rows(y_enc, idx), d, params)
        parts.append(ad.sum_(ad.square(ad.sub(recon, batch.x[idx]))))
        index_sets.append(idx)
    l2 = parts[0]
    for p in parts[1:]:
        l2 = ad.add(l2, p)
    l2 = ad.mul(l2, 1.0 / n)

    if label_source == "uniform":
        l_yhat = _zero()
    else:
        l_yhat = ad.mean(kl_from_differences(*encoder_contrast(x, one_hot, y_hat, params)))

    z_cls = ad.scale_grad(z, weights.beta) if route else z
    cls_logits = mlp(z_cls, params, "classifier")
    if align:
        cls_logits = ad.add(cls_logits, log_alignment(batch.domains, priors, pool))
    l_ce2 = ad.softmax_cross_entropy(cls_logits, labels, smoothing)
    correct = int(np.sum(cls_logits.data.argmax(axis=1) == labels))

    total_f = ad.add(ad.add(l1, ad.mul(l2, weights.alpha)),
                     ad.add(ad.mul(l_ce2, weights.beta), ad.mul(l_yhat, weights.theta)))
    if route:
        objective = ad.add(ad.add(ad.add(l1, l2), ad.add(l_ce2, ad.mul(l_yhat, weights.theta))), l_ce1)
    else:
        objective = ad.add(total_f, l_ce1)
    return LossTerms(l1, l2, l_ce1, l_ce2, l_yhat, total_f, objective, correct)


def compute_losses(batch: Batch, params: ModelParams, weights: LossWeights,
                   priors: Sequence[LabelDistribution], pool: LabelDistribution,
                   noise: np.ndarray, config=None) -> LossBreakdown:
    """Loss values for one batch under ``config`` (a TrainConfig, or defaults)."""
    opts = {} if config is None else config.loss_options()
    with ad.no_grad():
        terms = forward_terms(batch, params, weights, priors, pool, noise, **opts)
    return terms.breakdown()
