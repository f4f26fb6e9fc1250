"""Parameter network: a tanh MLP mapping natural parameters to flow parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from efn import autodiff as ad
from efn.autodiff import NumericalError, ParamVector


@dataclass
class InputScaler:
    """Per-coordinate standardization (eta - mean) / scale."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, etas, min_scale=1e-8):
        etas = np.asarray(etas, dtype=np.float64)
        mean = etas.mean(axis=0)
        std = etas.std(axis=0)
        # constant coordinates (e.g. a fixed prior block) pass through centred only
        scale = np.where(std > min_scale, std, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, etas):
        return (np.asarray(etas, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


@dataclass
class ParamNetSpec:
    input_dim: int
    output_dim: int
    layer_sizes: list
    nonlinearity: str = "tanh"
    scaler: InputScaler = None

    def __post_init__(self):
        if not self.layer_sizes or len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes must list at least the input and output widths")
        if self.layer_sizes[0] != self.input_dim or self.layer_sizes[-1] != self.output_dim:
            raise ValueError("layer_sizes must start at input_dim and end at output_dim")
        if self.nonlinearity != "tanh":
            raise ValueError("only tanh hidden units are supported")

    @property
    def depth(self):
        return len(self.layer_sizes)

    @property
    def layout(self):
        out = []
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            out.append((f"W{i}", (n_in, n_out)))
            out.append((f"b{i}", (n_out,)))
        return out

    @property
    def n_weights(self):
        return sum(int(np.prod(s)) for _, s in self.layout)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layer_sizes": list(self.layer_sizes),
            "nonlinearity": self.nonlinearity,
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sc = d.pop("scaler", None)
        scaler = None if sc is None else InputScaler(np.asarray(sc["mean"], float), np.asarray(sc["scale"], float))
        return cls(scaler=scaler, **d)


def default_depth(dim):
    return max(4, int(round(math.sqrt(dim))))


def layer_widths(input_dim, output_dim, depth):
    """Widths interpolated linearly from input to output, rounded to integers."""
    return [int(round(w)) for w in np.linspace(input_dim, output_dim, depth)]


def build_spec(family, net, depth=None, scaler=True, rng=None, scaler_draws=10_000):
    """Parameter-network spec for ``family`` feeding density network ``net``.

    With ``scaler`` on, coordinate means/scales come from ``scaler_draws``
    draws of p(eta).
    """
    if net.n_params == 0:
        raise ValueError("density network has no parameters to produce")
    if depth is None:
        depth = default_depth(family.D)
    sizes = layer_widths(family.eta_dim, net.n_params, depth)
    input_scaler = None
    if scaler:
        if rng is None:
            rng = np.random.default_rng(0)
        input_scaler = InputScaler.fit(family.eta_sample(rng, scaler_draws))
    return ParamNetSpec(family.eta_dim, net.n_params, sizes, scaler=input_scaler)


def init_weights(spec: ParamNetSpec, rng, output_gain=1.0):
    """Glorot-uniform weights, zero biases.

    Args:
        output_gain: multiplies the last weight matrix, shrinking the initial
            spread of theta.  Deep flows on targets with exponential terms
            start more stably with small initial flow parameters.
    """
    pv = ParamVector.from_layout(spec.layout)
    last = f"W{spec.depth - 2}"
    for name, shape in spec.layout:
        if name.startswith("W"):
            fan_in, fan_out = shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            if name == last:
                lim *= output_gain
            pv[name][...] = rng.uniform(-lim, lim, size=shape)
    return pv


def forward(spec: ParamNetSpec, weights, eta):
    """theta = f_phi(eta) for a (K, input_dim) batch.

    ``weights`` is either a ParamVector (plain evaluation) or a dict of
    tracked tensors keyed by segment name (inside a recorded program).
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
    if eta.shape[-1] != spec.input_dim:
        raise ValueError(f"eta has {eta.shape[-1]} entries, parameter network expects {spec.input_dim}")
    if spec.scaler is not None:
        eta = spec.scaler.transform(eta)
    if isinstance(weights, ParamVector):
        weights = {name: ad.Tensor(weights[name]) for name, _ in spec.layout}
    h = ad.Tensor(eta)
    n_maps = spec.depth - 1
    for i in range(n_maps):
        h = h @ weights[f"W{i}"] + weights[f"b{i}"]
        if i < n_maps - 1:
            h = ad.tanh(h)
    if not np.isfinite(h.value).all():
        raise NumericalError("parameter network produced non-finite theta", op="param_net")
    return h
