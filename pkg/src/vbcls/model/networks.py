"""The four networks: encoder, per-domain decoders, label prior and classifier.

Every network is a two-layer perceptron ``in -> hidden (relu) -> out``.
Parameters live in one flat, ordered name -> Tensor mapping so the optimizer,
the gradient checker and the checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vbcls import autodiff as ad
from vbcls.distributions import DiagGaussian
from vbcls.errors import ConfigurationError, InvalidShapeError, UnknownDomainError

GROUPS = ("encoder", "decoder", "label_prior", "classifier")


@dataclass(frozen=True)
class Dims:
    features: int   # D
    classes: int    # K
    domains: int    # N
    latent: int     # Z
    hidden: int     # H

    def __post_init__(self):
        for name in ("features", "classes", "domains", "latent", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} dimension must be positive")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        D, K, N, Z, H = self.features, self.classes, self.domains, self.latent, self.hidden
        nets = {"encoder": (D + K, 2 * Z)}
        for i in range(N):
            nets[f"decoder{i}"] = (Z + K, D)
        nets["label_prior"] = (D, K)
        nets["classifier"] = (Z, K)
        shapes = {}
        for net, (fan_in, fan_out) in nets.items():
            shapes[f"{net}.W1"] = (fan_in, H)
            shapes[f"{net}.b1"] = (H,)
            shapes[f"{net}.W2"] = (H, fan_out)
            shapes[f"{net}.b2"] = (fan_out,)
        return shapes


def group_of(name: str) -> str:
    net = name.split(".", 1)[0]
    return "decoder" if net.startswith("decoder") else net


@dataclass
class ModelParams:
    dims: Dims
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def group(self, group: str) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.tensors.items() if group_of(n) == group}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams(self.dims, {n: ad.Tensor(t.data.copy(), requires_grad=True, name=n)
                                       for n, t in self.tensors.items()})

    def validate(self) -> None:
        expected = self.dims.layer_shapes()
        if list(expected) != list(self.tensors):
            raise InvalidShapeError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise InvalidShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")


def init_params(dims: Dims, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    tensors = {}
    for name, shape in dims.layer_shapes().items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
    return ModelParams(dims, tensors)


def hidden(x: ad.Tensor, params: ModelParams, net: str) -> ad.Tensor:
    return ad.relu(ad.affine(x, params[f"{net}.W1"], params[f"{net}.b1"]))


def mlp(x: ad.Tensor, params: ModelParams, net: str) -> ad.Tensor:
    return ad.affine(hidden(x, params, net), params[f"{net}.W2"], params[f"{net}.b2"])


# -- tensor-level pieces used by the losses ---------------------------------

def encoder_heads(x, y_vec, params: ModelParams) -> tuple[ad.Tensor, ad.Tensor]:
    out = mlp(ad.concat(x, y_vec), params, "encoder")
    Z = params.dims.latent
    return ad.columns(out, 0, Z), ad.columns(out, Z, 2 * Z)


def encoder_contrast(x, y1, y2, params: ModelParams) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Head differences between encoding with ``y1`` and ``y2``, plus the second log-variance.

    The differences go through the output layer once, so its bias drops out
    exactly instead of cancelling in floating point.
    """
    h1 = hidden(ad.concat(x, y1), params, "encoder")
    h2 = hidden(ad.concat(x, y2), params, "encoder")
    diff = ad.matmul(ad.sub(h1, h2), params["encoder.W2"])
    out2 = ad.affine(h2, params["encoder.W2"], params["encoder.b2"])
    Z = params.dims.latent
    return ad.columns(diff, 0, Z), ad.columns(diff, Z, 2 * Z), ad.columns(out2, Z, 2 * Z)


def decoder_out(z, y_vec, domain: int, params: ModelParams) -> ad.Tensor:
    if not 0 <= domain < params.dims.domains:
        raise UnknownDomainError(f"domain {domain} outside [0, {params.dims.domains})")
    return mlp(ad.concat(z, y_vec), params, f"decoder{domain}")


# -- public array-level forward passes ---------------------------------------

def _rows(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    a = a.reshape(1, -1) if single else a
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidShapeError(f"{what} must have {width} columns, got shape {np.shape(x)}")
    return a, single


def encode(x, y_vec, params: ModelParams) -> DiagGaussian:
    """Parameters of q(z | x, y) for one sample or a row-stacked batch."""
    xs, single = _rows(x, params.dims.features, "x")
    ys, _ = _rows(y_vec, params.dims.classes, "y_vec")
    if ys.shape[0] != xs.shape[0]:
        raise InvalidShapeError(f"{ys.shape[0]} label vectors for {xs.shape[0]} samples")
    with ad.no_grad():
        mean, log_var = encoder_heads(ad.Tensor(xs), ad.Tensor(ys), params)
    if single:
        return DiagGaussian(mean.data[0], log_var.data[0])
    return DiagGaussian(mean.data, log_var.data)


def decode(z, y_vec, domain: int, params: ModelParams) -> np.ndarray:
    zs, single = _rows(z, params.dims.latent, "z")
    ys, _ = _rows(y_vec, params.dims.classes, "y_vec")
    with ad.no_grad():
        out = decoder_out(ad.Tensor(zs), ad.Tensor(ys), domain, params).data
    return out[0] if single else out


def label_prior(x, params: ModelParams) -> np.ndarray:
    """Softmax pseudo-label probabilities from features."""
    xs, single = _rows(x, params.dims.features, "x")
    with ad.no_grad():
        p = ad.softmax(mlp(ad.Tensor(xs), params, "label_prior"))
    return p[0] if single else p


def classify(z, params: ModelParams) -> np.ndarray:
    """Unaligned classifier probabilities from latent codes."""
    zs, single = _rows(z, params.dims.latent, "z")
    with ad.no_grad():
        p = ad.softmax(mlp(ad.Tensor(zs), params, "classifier"))
    return p[0] if single else p
