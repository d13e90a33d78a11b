"""Class-prior estimation, posterior alignment and target-prior refinement."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax

from vbcls.errors import (
    ConfigurationError,
    DegenerateAlignmentError,
    EmptyDatasetError,
    InvalidLabelError,
    InvalidShapeError,
)

POOL_FLOOR = 1e-12
KL_FLOOR = 1e-12


class LabelDistribution:
    """A probability vector over K classes."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.array(probs, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ConfigurationError("a label distribution needs at least one class")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ConfigurationError(f"label probabilities must be finite and nonnegative: {p.tolist()}")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"label probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def uniform(cls, n_classes: int) -> LabelDistribution:
        return cls(np.full(n_classes, 1.0 / n_classes))

    @classmethod
    def normalized(cls, weights) -> LabelDistribution:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def n_classes(self) -> int:
        return self.probs.size

    def tolist(self) -> list[float]:
        return self.probs.tolist()

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"LabelDistribution({self.probs.tolist()})"


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, LabelDistribution) else np.asarray(p, dtype=np.float64)


def _validated_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyDatasetError("cannot estimate a label distribution from no labels")
    if labels.dtype.kind not in "iu":
        if labels.dtype.kind == "f" and np.all(labels == np.round(labels)):
            labels = labels.astype(np.int64)
        else:
            raise InvalidLabelError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidLabelError(f"labels must lie in [0, {n_classes}), found range "
                                f"[{labels.min()}, {labels.max()}]")
    return labels


def class_proportions(labels, n_classes: int) -> list[Fraction]:
    """Exact rational class proportions ``count_k / n``."""
    labels = _validated_labels(labels, n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    return [Fraction(int(c), labels.size) for c in counts]


def estimate_from_counts(labels, n_classes: int) -> LabelDistribution:
    # float(Fraction) is the correctly rounded value of each proportion
    return LabelDistribution([float(f) for f in class_proportions(labels, n_classes)])


def pooled(datasets: Sequence, n_classes: int) -> LabelDistribution:
    """Label proportions of all datasets concatenated (sample-weighted)."""
    parts = [np.asarray(d.labels) for d in datasets]
    if not parts or sum(p.size for p in parts) == 0:
        raise EmptyDatasetError("no labels to pool")
    return estimate_from_counts(np.concatenate(parts), n_classes)


def alignment_weights(p_dom, p_pool) -> np.ndarray:
    """Per-class ratio ``p_dom / p_pool`` with zero pool entries floored."""
    dom, pool = _probs(p_dom), _probs(p_pool)
    if dom.shape != pool.shape:
        raise InvalidShapeError(f"prior sizes differ: {dom.size} vs {pool.size}")
    return dom / np.maximum(pool, POOL_FLOOR)


def posterior_align(base, p_dom, p_pool) -> np.ndarray:
    """Reweight classifier probabilities by ``p_dom / p_pool`` and renormalize.

    ``base`` is one probability vector or a matrix with one per row.
    """
    base = np.asarray(base, dtype=np.float64)
    w = alignment_weights(p_dom, p_pool)
    if base.shape[-1] != w.size:
        raise InvalidShapeError(f"{base.shape[-1]} class probabilities for {w.size} prior entries")
    weighted = base * w
    total = weighted.sum(axis=-1, keepdims=True)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise DegenerateAlignmentError("every class received zero weight after alignment")
    return weighted / total


def iter_target_prior(target_base_probs, p_pool, p_init) -> Iterator[np.ndarray]:
    """Yield successive EM re-estimates of the target class prior (unbounded)."""
    base = np.asarray(target_base_probs, dtype=np.float64)
    if base.ndim != 2 or base.shape[0] == 0:
        raise InvalidShapeError("target outputs must be a nonempty n x K matrix")
    p = _probs(p_init).copy()
    while True:
        p = posterior_align(base, p, p_pool).mean(axis=0)
        p = p / p.sum()
        yield p


def refine_target_prior(target_base_probs, p_pool, p_init, max_iters: int = 10,
                        tol: float = 1e-6) -> LabelDistribution:
    """Fixed-point estimate of the target prior from unaligned classifier outputs.

    Each step aligns every row with the current estimate and averages the
    aligned posteriors; iteration stops when the L1 change drops below
    ``tol`` or after ``max_iters`` steps.
    """
    if max_iters < 1:
        raise ConfigurationError("max_iters must be at least 1")
    prev = _probs(p_init)
    p = prev
    for step, p in enumerate(iter_target_prior(target_base_probs, p_pool, p_init), start=1):
        if np.abs(p - prev).sum() < tol or step >= max_iters:
            break
        prev = p
    return LabelDistribution(p)


@dataclass(frozen=True)
class Calibration:
    """Bias-corrected temperature scaling of classifier probabilities.

    Calibrated log-probabilities are ``log(p) / temperature + bias``,
    renormalized; ``bias[0]`` is fixed at zero.
    """

    temperature: float = 1.0
    bias: tuple[float, ...] | None = None

    def __call__(self, probs) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        logits = np.log(np.maximum(probs, 1e-300)) / self.temperature
        if self.bias is not None:
            if len(self.bias) != probs.shape[-1]:
                raise InvalidShapeError(f"{len(self.bias)} biases for {probs.shape[-1]} classes")
            logits = logits + np.asarray(self.bias)
        return np.exp(log_softmax(logits, axis=-1))


def fit_calibration(probs, labels) -> Calibration:
    """Fit temperature and class biases by minimizing held-out negative log-likelihood.

    Recalibrating source outputs before refinement matters because the
    fixed-point estimate inherits any over- or under-confidence in them.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise InvalidShapeError("calibration needs a nonempty n x K probability matrix")
    k = probs.shape[1]
    y = _validated_labels(labels, k)
    if y.size != probs.shape[0]:
        raise InvalidShapeError(f"{y.size} labels for {probs.shape[0]} rows")
    logp = np.log(np.maximum(probs, 1e-300))
    rows = np.arange(y.size)

    def nll(w):
        z = log_softmax(logp / np.exp(w[0]) + np.r_[0.0, w[1:]], axis=1)
        return -z[rows, y].mean()

    w = minimize(nll, np.zeros(k), method="L-BFGS-B", bounds=[(-5.0, 5.0)] * k).x
    return Calibration(float(np.exp(w[0])), (0.0, *map(float, w[1:])))


def kl_divergence(p, q) -> float:
    """KL(p || q) with ``q`` floored at 1e-12 and 0 log 0 taken as 0."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise InvalidShapeError(f"distribution sizes differ: {p.size} vs {q.size}")
    mask = p > 0
    value = float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], KL_FLOOR))))
    # rounding can leave a -1e-17 residue for near-identical inputs
    return max(value, 0.0)
