"""Synthetic multi-domain Gaussian benchmarks and feature-CSV I/O.

Each domain draws isotropic Gaussian class-conditionals; domains differ in
their class priors (label shift), their class means (conditional shift), or
a global translation (covariate shift).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from vbcls.errors import (
    ConfigurationError,
    FileSystemError,
    FormatError,
    InvalidLabelError,
    ParseError,
)
from vbcls.labelshift import LabelDistribution

SCENARIOS = ("covariate_only", "conditional_shift", "label_shift", "conditional_and_label")


@dataclass
class DomainSpec:
    name: str
    class_priors: LabelDistribution
    class_means: np.ndarray
    class_scales: np.ndarray
    n_samples: int
    seed: int

    def __post_init__(self):
        if not isinstance(self.class_priors, LabelDistribution):
            self.class_priors = LabelDistribution(self.class_priors)
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.class_scales = np.asarray(self.class_scales, dtype=np.float64)
        k = self.class_priors.n_classes
        if self.class_means.ndim != 2 or self.class_means.shape[0] != k:
            raise ConfigurationError(f"expected {k} class means, got array of shape {self.class_means.shape}")
        if self.class_scales.shape != (k,) or np.any(self.class_scales <= 0):
            raise ConfigurationError("need one strictly positive scale per class")
        if self.n_samples < 0:
            raise ConfigurationError("n_samples must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.class_priors.n_classes

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_id: int = 0
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"{self.labels.shape[0]} labels for feature matrix of shape {self.features.shape}")
        if np.any(self.labels < 0):
            raise InvalidLabelError("labels must be nonnegative class indices")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("feature rows must be finite")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> DomainDataset:
        return DomainDataset(self.features[index], self.labels[index], self.domain_id, self.name)


def largest_remainder_counts(n: int, probs) -> np.ndarray:
    """Hamilton apportionment of ``n`` items; ties go to the lower class index."""
    quotas = n * np.asarray(probs, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    remainder = n - int(counts.sum())
    if remainder > 0:
        order = np.lexsort((np.arange(quotas.size), -(quotas - counts)))
        counts[order[:remainder]] += 1
    return counts


def generate_domain(spec: DomainSpec, domain_id: int = 0) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    counts = largest_remainder_counts(spec.n_samples, spec.class_priors.probs)
    feats, labels = [], []
    for k, c in enumerate(counts):
        g = rng.standard_normal((int(c), spec.dim))
        feats.append(spec.class_means[k] + spec.class_scales[k] * g)
        labels.append(np.full(int(c), k, dtype=np.int64))
    x = np.concatenate(feats) if feats else np.zeros((0, spec.dim))
    y = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    order = rng.permutation(y.size)
    return DomainDataset(x[order], y[order], domain_id, spec.name)


def _unit(rng, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def skewed_prior(domain_index: int, n_classes: int, severity: float) -> np.ndarray:
    p = np.full(n_classes, 1.0 / n_classes)
    p[domain_index % n_classes] += severity
    return p / p.sum()


def make_benchmark(scenario: str, n_domains: int, n_classes: int, dim: int, n_per_domain: int,
                   severity: float, seed: int, *, class_sep: float = 1.5,
                   scale: float = 1.0) -> list[DomainSpec]:
    """Domain specs realizing one shift scenario.

    Shared class means have coordinates drawn from N(0, class_sep**2 / dim),
    so their norms are near ``class_sep``. ``severity`` is the length of each
    per-domain mean perturbation and the strength of each prior skew.
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    if n_domains < 2 or n_classes < 2:
        raise ConfigurationError("need at least 2 domains and 2 classes")
    if severity < 0:
        raise ConfigurationError(f"severity must be nonnegative, got {severity}")
    if dim < 1 or n_per_domain < 0:
        raise ConfigurationError("dim must be positive and n_per_domain nonnegative")

    rng = np.random.default_rng(seed)
    base_means = rng.standard_normal((n_classes, dim)) * (class_sep / math.sqrt(dim))
    domain_seeds = rng.integers(0, 2**31 - 1, size=n_domains)
    shifts = [[_unit(rng, dim) for _ in range(n_classes)] for _ in range(n_domains)]
    translations = [_unit(rng, dim) for _ in range(n_domains)]

    conditional = scenario in ("conditional_shift", "conditional_and_label")
    label = scenario in ("label_shift", "conditional_and_label")
    specs = []
    for i in range(n_domains):
        means = base_means.copy()
        if scenario == "covariate_only":
            means = means + severity * translations[i]
        if conditional:
            means = means + severity * np.stack(shifts[i])
        priors = skewed_prior(i, n_classes, severity) if label else np.full(n_classes, 1.0 / n_classes)
        specs.append(DomainSpec(
            name=f"domain{i}",
            class_priors=LabelDistribution(priors),
            class_means=means,
            class_scales=np.full(n_classes, float(scale)),
            n_samples=int(n_per_domain),
            seed=int(domain_seeds[i]),
        ))
    return specs


def bayes_posteriors(spec: DomainSpec, x: np.ndarray) -> np.ndarray:
    """Exact class posteriors of a domain's generative model at rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    sq = ((x[:, None, :] - spec.class_means[None]) ** 2).sum(axis=-1)
    s2 = spec.class_scales ** 2
    with np.errstate(divide="ignore"):
        log_joint = (np.log(spec.class_priors.probs) - 0.5 * spec.dim * np.log(2 * np.pi * s2)
                     - sq / (2 * s2))
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


def bayes_accuracy(spec: DomainSpec, n_samples: int = 200_000, seed: int = 0) -> float:
    """Accuracy of the Bayes-optimal classifier, estimated on fresh draws."""
    probe = DomainSpec(spec.name, spec.class_priors, spec.class_means, spec.class_scales, n_samples, seed)
    data = generate_domain(probe)
    return float(np.mean(bayes_posteriors(spec, data.features).argmax(axis=1) == data.labels))


def split(dataset: DomainDataset, train_fraction: float, seed) -> tuple[DomainDataset, DomainDataset]:
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = math.floor(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ConfigurationError(f"splitting {n} rows at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


# -- CSV --------------------------------------------------------------------

def write_feature_csv(dataset: DomainDataset, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "label"] + [f"f{j}" for j in range(dataset.dim)])
            name = dataset.name or str(dataset.domain_id)
            for row, label in zip(dataset.features, dataset.labels):
                w.writerow([name, int(label)] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise FileSystemError(f"cannot write {path}: {exc.strerror}", path=str(path)) from exc


def load_feature_csv(path, n_classes: int | None = None, domain_id: int | None = None) -> DomainDataset:
    """Read ``domain,label,f0,...`` rows; the file must hold a single domain.

    The domain column becomes the dataset name. ``domain_id`` defaults to
    that value when it is an integer, otherwise to 0.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FileSystemError(f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if (header is None or len(header) < 3 or header[0] != "domain" or header[1] != "label"
                or header[2:] != [f"f{j}" for j in range(len(header) - 2)]):
            raise FormatError(f"{path}: missing or malformed header; expected domain,label,f0,...")
        dim = len(header) - 2
        domains, labels, rows = set(), [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 2:
                raise ParseError(f"{path}: row {lineno} has {len(rec)} fields, expected {dim + 2}", row=lineno)
            domains.add(rec[0])
            try:
                label = int(rec[1])
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: label {rec[1]!r} is not an integer", row=lineno) from None
            if label < 0 or (n_classes is not None and label >= n_classes):
                bound = f"[0, {n_classes})" if n_classes is not None else "nonnegative"
                raise InvalidLabelError(f"{path}: row {lineno}: label {label} outside {bound}")
            try:
                values = [float(v) for v in rec[2:]]
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: non-numeric feature value", row=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(f"{path}: row {lineno}: non-finite feature value", row=lineno)
            labels.append(label)
            rows.append(values)
    if len(domains) > 1:
        raise FormatError(f"{path}: mixed domain values {sorted(domains)}; one domain per file")
    name = domains.pop() if domains else path.stem
    if domain_id is None:
        domain_id = int(name) if name.lstrip("-").isdigit() else 0
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return DomainDataset(features, np.array(labels, dtype=np.int64), domain_id, name)
