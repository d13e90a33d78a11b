from __future__ import annotations

import numpy as np

from vbcls.errors import ConfigurationError
from vbcls.labelshift import LabelDistribution, posterior_align
from vbcls.model.networks import ModelParams, classify, encode, label_prior


def _check_prior(p: LabelDistribution, n_classes: int, what: str) -> None:
    if len(p) != n_classes:
        raise ConfigurationError(f"{what} has {len(p)} classes, model has {n_classes}")


def base_probs(x, params: ModelParams, label_input: str = "pseudo") -> np.ndarray:
    """Unaligned class probabilities: encode with the pseudo-label, classify the mean code.

    Only the encoder, label prior and classifier are touched; the decoders
    play no part in prediction.
    """
    x = np.asarray(x, dtype=np.float64)
    if label_input == "pseudo":
        y_vec = label_prior(x, params)
    elif label_input == "uniform":
        y_vec = np.full(x.shape[:-1] + (params.dims.classes,), 1.0 / params.dims.classes)
    else:
        raise ConfigurationError(f"unknown label input {label_input!r}")
    return classify(encode(x, y_vec, params).mean, params)


def predict(x, params: ModelParams, domain_prior: LabelDistribution, pooled: LabelDistribution,
            label_input: str = "pseudo") -> np.ndarray:
    """Posterior-aligned class probabilities for one sample or a batch."""
    _check_prior(domain_prior, params.dims.classes, "domain prior")
    _check_prior(pooled, params.dims.classes, "pooled prior")
    return posterior_align(base_probs(x, params, label_input), domain_prior, pooled)


class VBCLSPredictor:
    """Bundles trained parameters with how the encoder receives its label input."""

    def __init__(self, params: ModelParams, label_input: str = "pseudo", align: bool = True):
        self.params = params
        self.label_input = label_input
        self.align = align
        self.n_classes = params.dims.classes

    def base_probs(self, x) -> np.ndarray:
        return base_probs(x, self.params, self.label_input)

    def predict_proba(self, x, p_dom: LabelDistribution, p_pool: LabelDistribution) -> np.ndarray:
        if not self.align:
            p_dom = p_pool
        return predict(x, self.params, p_dom, p_pool, self.label_input)


class LabelPriorPredictor:
    """Predicts with the label-prior network alone (the ERM baseline)."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.n_classes = params.dims.classes

    def base_probs(self, x) -> np.ndarray:
        return label_prior(np.asarray(x, dtype=np.float64), self.params)

    def predict_proba(self, x, p_dom, p_pool) -> np.ndarray:
        return self.base_probs(x)
