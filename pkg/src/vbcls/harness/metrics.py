"""Latent-space alignment diagnostics."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from vbcls.distributions import DiagGaussian, kl_diag
from vbcls.errors import ConfigurationError
from vbcls.model import ModelParams, encode


def fitted_code_gaussian(params: ModelParams, x: np.ndarray, label: int) -> DiagGaussian:
    """Diagonal Gaussian fitted to the encoder means of ``x`` conditioned on ``label``."""
    y = np.zeros((x.shape[0], params.dims.classes))
    y[:, label] = 1.0
    codes = encode(x, y, params).mean
    return DiagGaussian(codes.mean(axis=0), np.log(codes.var(axis=0) + 1e-12))


def aggregate_posterior_gaussian(params: ModelParams, x: np.ndarray, label: int) -> DiagGaussian:
    """Moment-matched diagonal Gaussian of the mixture of q(z | x_j, label) over rows of ``x``."""
    y = np.zeros((x.shape[0], params.dims.classes))
    y[:, label] = 1.0
    q = encode(x, y, params)
    mean = q.mean.mean(axis=0)
    var = q.mean.var(axis=0) + np.exp(q.log_var).mean(axis=0)
    return DiagGaussian(mean, np.log(var))


CODE_FITS = {"aggregate": aggregate_posterior_gaussian, "means": fitted_code_gaussian}


def cross_domain_code_divergence(params: ModelParams, datasets: Sequence, n_classes: int,
                                 fit: str = "aggregate") -> np.ndarray:
    """Per-class average pairwise symmetric KL between domains' fitted code Gaussians.

    ``fit`` picks the per-domain Gaussian: ``aggregate`` moment-matches the
    mixture of posteriors, ``means`` fits the encoder means only. Classes
    with fewer than two samples in a domain skip that domain.
    """
    if fit not in CODE_FITS:
        raise ConfigurationError(f"unknown fit {fit!r}; choose from {', '.join(CODE_FITS)}")
    fitter = CODE_FITS[fit]
    out = np.zeros(n_classes)
    for k in range(n_classes):
        fits = [fitter(params, d.features[d.labels == k], k)
                for d in datasets if np.sum(d.labels == k) >= 2]
        pairs = list(combinations(fits, 2))
        if pairs:
            out[k] = np.mean([kl_diag(a, b) + kl_diag(b, a) for a, b in pairs])
    return out
