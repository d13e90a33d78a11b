"""Diagonal Gaussians: reparameterization, closed-form KL and a Monte-Carlo KL estimate.

The KL functions accept either plain arrays (returning floats, or one value
per row for batched input) or :class:`~vbcls.autodiff.Tensor` fields, in
which case they return a recorded tensor that can be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from vbcls import autodiff as ad
from vbcls.errors import ConfigurationError, InvalidShapeError, NumericInstabilityError

KL_FORMULAS = ("standard", "verbatim")


@dataclass
class DiagGaussian:
    """Mean and log-variance of a diagonal Gaussian; rows are independent samples."""

    mean: np.ndarray | ad.Tensor
    log_var: np.ndarray | ad.Tensor

    def __post_init__(self):
        if not isinstance(self.mean, ad.Tensor):
            self.mean = np.asarray(self.mean, dtype=np.float64)
        if not isinstance(self.log_var, ad.Tensor):
            self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if _data(self.mean).shape != _data(self.log_var).shape:
            raise InvalidShapeError(
                f"mean {_data(self.mean).shape} and log_var {_data(self.log_var).shape} differ")

    @classmethod
    def from_std(cls, mean, std) -> DiagGaussian:
        std = np.asarray(std, dtype=np.float64)
        return cls(mean, 2.0 * np.log(std))

    @property
    def std(self) -> np.ndarray:
        return np.exp(_data(self.log_var) / 2.0)

    @property
    def dim(self) -> int:
        return _data(self.mean).shape[-1]


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior N(mean, diag(std**2)); ``None`` fields mean 0 and 1."""

    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.std is not None and np.any(np.asarray(self.std) <= 0):
            raise ConfigurationError("prior std entries must be strictly positive")

    def arrays(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        mu = np.zeros(dim) if self.mean is None else np.broadcast_to(np.asarray(self.mean, float), (dim,))
        sd = np.ones(dim) if self.std is None else np.broadcast_to(np.asarray(self.std, float), (dim,))
        return mu, sd


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else x


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, ad.Tensor) for x in xs)


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(_data(x))):
            raise NumericInstabilityError("Gaussian parameters contain non-finite values")


def _finish(value: ad.Tensor, tensor_mode: bool):
    if tensor_mode:
        return value
    out = value.data
    return float(out) if out.ndim == 0 else out


def reparameterize(q: DiagGaussian, epsilon):
    """``z = mean + exp(log_var / 2) * epsilon``, differentiable in ``q``."""
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.shape != _data(q.mean).shape:
        raise InvalidShapeError(f"epsilon shape {eps.shape} does not match latent shape {_data(q.mean).shape}")
    z = ad.add(q.mean, ad.mul(ad.exp(ad.mul(q.log_var, 0.5)), eps))
    return _finish(z, _is_tensor(q.mean, q.log_var))


def kl_to_prior(q: DiagGaussian, prior: PriorSpec | None = None, formula: str = "standard"):
    """KL(q || prior) summed over latent dimensions.

    ``formula="verbatim"`` evaluates the variant with the two variances
    exchanged in the quadratic term. It is kept for comparison only and is
    not a divergence (it goes negative once the posterior is wider than the
    prior).
    """
    if formula not in KL_FORMULAS:
        raise ConfigurationError(f"unknown KL formula {formula!r}")
    prior = prior or PriorSpec()
    _check_finite(q.mean, q.log_var)
    mu_p, sd_p = prior.arrays(q.dim)
    mean, log_var = ad.as_tensor(q.mean), ad.as_tensor(q.log_var)
    diff_sq = ad.square(ad.sub(mean, mu_p))
    if formula == "standard":
        per_dim = _gaussian_kl_terms(ad.sub(log_var, 2.0 * np.log(sd_p)), ad.div(diff_sq, sd_p ** 2))
    else:
        var = ad.exp(log_var)
        # log(sd_p / sd) = log sd_p - log_var / 2
        log_ratio = ad.sub(np.log(sd_p), ad.mul(log_var, 0.5))
        quad = ad.div(ad.add(sd_p ** 2, diff_sq), ad.mul(var, 2.0))
        per_dim = ad.sub(ad.add(log_ratio, quad), 0.5)
    return _finish(ad.sum_(per_dim, axis=-1), _is_tensor(q.mean, q.log_var))


def _gaussian_kl_terms(log_ratio, scaled_diff_sq):
    """Per-dimension ``(r - 1 - log r + diff^2 / var2) / 2`` with ``log r = log_ratio``.

    ``expm1`` keeps the value and its finite differences accurate when the
    two variances nearly agree, where the textbook form cancels O(1) terms.
    """
    return ad.mul(ad.add(ad.sub(ad.expm1(log_ratio), log_ratio), scaled_diff_sq), 0.5)


def kl_diag(q1: DiagGaussian, q2: DiagGaussian):
    """Closed-form KL(q1 || q2) for diagonal Gaussians, summed over dimensions."""
    if _data(q1.mean).shape[-1] != _data(q2.mean).shape[-1]:
        raise InvalidShapeError(f"dimension mismatch: {q1.dim} vs {q2.dim}")
    _check_finite(q1.mean, q1.log_var, q2.mean, q2.log_var)
    m1, lv1 = ad.as_tensor(q1.mean), ad.as_tensor(q1.log_var)
    m2, lv2 = ad.as_tensor(q2.mean), ad.as_tensor(q2.log_var)
    kl = kl_from_differences(ad.sub(m1, m2), ad.sub(lv1, lv2), lv2)
    return _finish(kl, _is_tensor(q1.mean, q1.log_var, q2.mean, q2.log_var))


def kl_from_differences(mean_diff, log_var_diff, log_var2) -> ad.Tensor:
    """KL(q1 || q2) summed over the last axis, given m1 - m2, lv1 - lv2 and lv2.

    Callers that can form the differences directly (for instance two encoder
    passes sharing an output layer) avoid cancelling the shared offsets.
    """
    mean_diff, log_var_diff = ad.as_tensor(mean_diff), ad.as_tensor(log_var_diff)
    scaled = ad.mul(ad.square(mean_diff), ad.exp(ad.mul(ad.as_tensor(log_var2), -1.0)))
    return ad.sum_(_gaussian_kl_terms(log_var_diff, scaled), axis=-1)


def log_density(q: DiagGaussian, z: np.ndarray) -> np.ndarray:
    mu, lv = _data(q.mean), _data(q.log_var)
    return -0.5 * np.sum(math.log(2 * math.pi) + lv + (z - mu) ** 2 / np.exp(lv), axis=-1)


def mc_kl(q1: DiagGaussian, q2: DiagGaussian, n_samples: int, seed=0,
          stratified: bool = False) -> float:
    """Monte-Carlo estimate of KL(q1 || q2) from samples of q1.

    With ``stratified=True`` each coordinate's standard-normal draws are one
    per equal-probability stratum (Latin hypercube), which removes most of the
    variance of the additive log-ratio. The estimator itself is unchanged.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    mu1, lv1 = np.asarray(_data(q1.mean), float), np.asarray(_data(q1.log_var), float)
    if mu1.ndim != 1:
        raise InvalidShapeError("mc_kl works on a single distribution, not a batch")
    rng = np.random.default_rng(seed)
    dim = mu1.size
    if stratified:
        u = (np.arange(n_samples)[:, None] + rng.random((n_samples, dim))) / n_samples
        for j in range(dim):
            u[:, j] = u[rng.permutation(n_samples), j]
        eps = ndtri(u)
    else:
        eps = rng.standard_normal((n_samples, dim))
    z = mu1 + np.exp(lv1 / 2) * eps
    diff = log_density(q1, z) - log_density(q2, z)
    if not np.all(np.isfinite(diff)):
        raise NumericInstabilityError("non-finite log-density ratio in Monte-Carlo KL")
    return float(np.mean(diff))
