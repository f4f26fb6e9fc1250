"""Density networks: bijective flow layers pushed through a support map.

Every layer operates on a batch of parameter sets at once.  Parameters
arrive as tensors with a leading axis of size K (one row per parameter
set) and samples as ``(K, M, d)`` arrays, so a single tape covers all K
distributions drawn in an optimization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from efn import _kernels
from efn import autodiff as ad
from efn.autodiff import NumericalError, ParamVector, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class InverseUnavailableError(RuntimeError):
    pass


def _rows(t):
    """Insert the sample axis: (K, ...) -> (K, 1, ...)."""
    shape = t.shape
    return ad.reshape(t, (shape[0], 1) + tuple(shape[1:]))


class FlowLayer:
    kind = None

    def __init__(self, dim):
        self.dim = int(dim)

    def param_shapes(self):
        raise NotImplementedError

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def forward(self, params, z):
        """Map ``z`` (K, M, d) forward.

        Returns:
            (z_out, log_det) with log_det of shape (K, M).
        """
        raise NotImplementedError

    def inverse(self, params, z):
        raise InverseUnavailableError(
            f"{self.kind} layers have no closed-form inverse; density is only available at sampled points"
        )

    def spec(self):
        return {"kind": self.kind, "dim": self.dim}

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class AffineLayer(FlowLayer):
    """z -> L z + b with L lower triangular and log-parameterized diagonal."""

    kind = "affine"

    def __init__(self, dim):
        super().__init__(dim)
        d = self.dim
        rows, cols = np.tril_indices(d, -1)
        self._lower_idx = (rows, cols)
        n_low = rows.size
        # constant 0/1 maps scattering raw entries into the flattened d x d matrix
        self._scatter_lower = np.zeros((n_low, d * d))
        self._scatter_lower[np.arange(n_low), rows * d + cols] = 1.0
        self._scatter_diag = np.zeros((d, d * d))
        self._scatter_diag[np.arange(d), np.arange(d) * (d + 1)] = 1.0

    def param_shapes(self):
        d = self.dim
        return [("lower", (d * (d - 1) // 2,)), ("log_diag", (d,)), ("shift", (d,))]

    def matrix(self, params):
        k = params["log_diag"].shape[0]
        flat = ad.exp(params["log_diag"]) @ self._scatter_diag
        if self.dim > 1:
            flat = flat + params["lower"] @ self._scatter_lower
        return ad.reshape(flat, (k, self.dim, self.dim))

    def forward(self, params, z):
        lmat = self.matrix(params)
        z_out = z @ lmat.T + _rows(params["shift"])
        log_det = ad.tsum(params["log_diag"], axis=-1, keepdims=True)
        m = z.shape[1]
        return z_out, log_det + np.zeros((1, m))

    def inverse(self, params, z):
        lmat = self.matrix(params).value
        rhs = np.swapaxes(np.asarray(z) - params["shift"].value[:, None, :], -1, -2)
        w = np.linalg.solve(lmat, rhs)
        log_det = np.broadcast_to(params["log_diag"].value.sum(-1)[:, None], (w.shape[0], w.shape[-1]))
        return np.swapaxes(w, -1, -2), log_det


_W_EPS = 1e-12


def _planar_fused(u, w, b, z):
    """Planar layer as one tape node; returns (K, M, d + 1) = [z_out, log_det]."""
    uv, wv, bv, zv = u.value, w.value, b.value, z.value
    a = (uv * wv).sum(-1, keepdims=True)
    m = np.logaddexp(0.0, a) - 1.0
    n = (wv * wv).sum(-1, keepdims=True) + _W_EPS
    kappa = (m - a) / n
    u_hat = uv + kappa * wv
    value, h, det = _kernels.planar_forward(u_hat, wv, bv[:, 0].copy(), zv)
    if np.any(det <= 0):
        raise NumericalError("planar layer lost invertibility: 1 + u_hat.psi(z) <= 0", op="planar")
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))

    def vjp(g):
        g_uhat, grad_w, g_b, grad_z = _kernels.planar_backward(
            g, u_hat, wv, zv, h, det
        )
        # back through u_hat = u + kappa(w.u, |w|^2) w
        gw_dot = (g_uhat * wv).sum(-1, keepdims=True)
        dkappa_da = (sig - 1.0) / n
        grad_u = g_uhat + gw_dot * dkappa_da * wv
        grad_w = grad_w + kappa * g_uhat + gw_dot * (dkappa_da * uv - 2.0 * (m - a) / (n * n) * wv)
        return grad_u, grad_w, g_b[:, None], grad_z

    return ad.record("planar", value, (u, w, b, z), vjp)


class PlanarLayer(FlowLayer):
    """z -> z + u_hat tanh(w.z + b), with u_hat keeping w.u_hat >= -1.

    ``forward`` uses a fused tape node; ``forward_reference`` composes the
    same map from elementary primitives and serves as its gradient oracle.
    """

    kind = "planar"

    def param_shapes(self):
        d = self.dim
        return [("u", (d,)), ("w", (d,)), ("b", (1,))]

    def u_hat(self, params):
        u, w = params["u"], params["w"]
        wu = ad.tsum(u * w, axis=-1, keepdims=True)
        m = ad.softplus(wu) - 1.0
        w_sq = ad.tsum(ad.square(w), axis=-1, keepdims=True) + _W_EPS
        return u + (m - wu) * w / w_sq

    def forward(self, params, z):
        z = ad.as_tensor(z)
        out = _planar_fused(ad.as_tensor(params["u"]), ad.as_tensor(params["w"]), ad.as_tensor(params["b"]), z)
        return out[..., :-1], out[..., -1]

    def forward_reference(self, params, z):
        u_hat = self.u_hat(params)
        w = params["w"]
        k, m_count = z.shape[0], z.shape[1]
        act = z @ ad.reshape(w, (k, self.dim, 1)) + _rows(params["b"])
        h = ad.tanh(act)
        z_out = z + h * _rows(u_hat)
        wu = ad.reshape(ad.tsum(w * u_hat, axis=-1, keepdims=True), (k, 1, 1))
        det = 1.0 + (1.0 - ad.square(h)) * wu
        if np.any(det.value <= 0):
            raise NumericalError("planar layer lost invertibility: 1 + u_hat.psi(z) <= 0", op="planar")
        log_det = ad.reshape(ad.log(det), (k, m_count))
        return z_out, log_det


class RadialLayer(FlowLayer):
    """z -> z + beta_hat (z - z0) / (alpha + |z - z0|)."""

    kind = "radial"

    def param_shapes(self):
        return [("z0", (self.dim,)), ("log_alpha", (1,)), ("beta", (1,))]

    def forward(self, params, z):
        k, m_count = z.shape[0], z.shape[1]
        alpha = ad.exp(params["log_alpha"])
        beta_hat = ad.softplus(params["beta"]) - alpha
        diff = z - _rows(params["z0"])
        r = ad.sqrt(ad.tsum(ad.square(diff), axis=-1, keepdims=True))
        alpha_r = _rows(alpha)
        beta_r = _rows(beta_hat)
        h = ad.reciprocal(alpha_r + r)
        bh = beta_r * h
        z_out = z + bh * diff
        term2 = 1.0 + beta_r * alpha_r * ad.square(h)
        log_det = (self.dim - 1) * ad.log(1.0 + bh) + ad.log(term2)
        return z_out, ad.reshape(log_det, (k, m_count))


LAYER_KINDS = {"affine": AffineLayer, "planar": PlanarLayer, "radial": RadialLayer}


def make_layer(kind, dim):
    try:
        return LAYER_KINDS[kind](dim)
    except KeyError:
        raise ValueError(f"unknown flow layer kind {kind!r}; expected one of {sorted(LAYER_KINDS)}") from None


# --------------------------------------------------------------------------
# support transforms


@dataclass(frozen=True)
class SupportTransform:
    """Fixed bijection from the latent space onto the family's support.

    ``loc``/``scale`` apply an elementwise affine standardization before the
    support map; they carry no trainable parameters.
    """

    kind: str = "identity"
    latent_dim: int = 1
    loc: tuple = None
    scale: tuple = None

    def __post_init__(self):
        if self.kind not in ("identity", "exponential", "simplex"):
            raise ValueError(f"unknown support transform {self.kind!r}")

    @property
    def support_dim(self):
        return self.latent_dim + 1 if self.kind == "simplex" else self.latent_dim

    def _standardize(self, y):
        log_det = 0.0
        if self.scale is not None:
            scale = np.asarray(self.scale, dtype=np.float64)
            y = y * scale
            log_det = float(np.log(scale).sum())
        if self.loc is not None:
            y = y + np.asarray(self.loc, dtype=np.float64)
        return y, log_det

    def forward(self, y):
        """Return (z, log_z or None, log_det) where log_det has y's batch shape."""
        y = ad.as_tensor(y)
        y, ld0 = self._standardize(y)
        if self.kind == "identity":
            return y, None, Tensor(np.full(y.shape[:-1], ld0))
        if self.kind == "exponential":
            return ad.exp(y), y, ld0 + ad.tsum(y, axis=-1)
        zeros = np.zeros(y.shape[:-1] + (1,))
        y_ext = ad.concat([y, zeros], axis=-1)
        log_z = y_ext - ad.logsumexp(y_ext, axis=-1, keepdims=True)
        return ad.exp(log_z), log_z, ld0 + ad.tsum(log_z, axis=-1)

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            y = z
            log_det = np.zeros(z.shape[:-1])
        elif self.kind == "exponential":
            y = np.log(z)
            log_det = y.sum(-1)
        else:
            log_z = np.log(z)
            y = log_z[..., :-1] - log_z[..., -1:]
            log_det = log_z.sum(-1)
        if self.loc is not None:
            y = y - np.asarray(self.loc)
        if self.scale is not None:
            y = y / np.asarray(self.scale)
            log_det = log_det + float(np.log(np.asarray(self.scale)).sum())
        return y, log_det

    def spec(self):
        return {
            "kind": self.kind,
            "latent_dim": self.latent_dim,
            "loc": None if self.loc is None else list(self.loc),
            "scale": None if self.scale is None else list(self.scale),
        }


def support_forward(t: SupportTransform, y):
    z, _, log_det = t.forward(y)
    return z, log_det


# --------------------------------------------------------------------------
# the density network


@dataclass
class FlowOutput:
    z: Tensor
    log_z: Tensor | None
    log_q: Tensor
    log_base: Tensor
    layer_log_dets: list
    support_log_det: Tensor
    preimages: list = field(default_factory=list)


class DensityNetwork:
    """Standard-normal base pushed through ``layers`` then ``support``.

    Parameters theta are laid out layer by layer as ``"{i}.{name}"``
    segments.  ``theta`` may be attached with :meth:`with_theta` for the
    single-distribution convenience methods (``sample``/``log_density``).
    """

    def __init__(self, layers, support, theta=None):
        self.layers = list(layers)
        self.support = support
        dims = {layer.dim for layer in self.layers}
        if dims and dims != {support.latent_dim}:
            raise ValueError(f"layer dims {dims} inconsistent with latent dim {support.latent_dim}")
        self.layout = [
            (f"{i}.{name}", shape)
            for i, layer in enumerate(self.layers)
            for name, shape in layer.param_shapes()
        ]
        self.n_params = sum(int(np.prod(s)) for _, s in self.layout)
        self.theta = None
        if theta is not None:
            self.theta = self._as_param_vector(theta)

    @classmethod
    def build(cls, kinds, support):
        return cls([make_layer(k, support.latent_dim) for k in kinds], support)

    @property
    def latent_dim(self):
        return self.support.latent_dim

    @property
    def support_dim(self):
        return self.support.support_dim

    def spec(self):
        return {"layers": [l.kind for l in self.layers], "support": self.support.spec()}

    def _as_param_vector(self, theta):
        if isinstance(theta, ParamVector):
            data = theta.data
        else:
            data = np.asarray(theta, dtype=np.float64).ravel()
        if data.size != self.n_params:
            raise ValueError(f"theta has {data.size} values, network expects {self.n_params}")
        return ParamVector.from_layout(self.layout, data.copy())

    def with_theta(self, theta):
        return DensityNetwork(self.layers, self.support, theta)

    def split(self, theta):
        """Slice a (K, P) tensor into per-layer parameter dicts of (K, ...) tensors."""
        theta = ad.as_tensor(theta)
        k = theta.shape[0]
        parts = []
        offset = 0
        for layer in self.layers:
            params = {}
            for name, shape in layer.param_shapes():
                size = int(np.prod(shape))
                params[name] = ad.reshape(theta[:, offset:offset + size], (k,) + tuple(shape))
                offset += size
            parts.append(params)
        return parts

    def push_forward(self, theta, w, keep_preimages=False):
        """Transform base draws ``w`` (K, M, d) under parameter rows ``theta`` (K, P).

        log_q carries the sampled-point density: log q0(w) minus every
        layer's log-det and the support map's log-det.
        """
        w = ad.as_tensor(w)
        if w.ndim != 3 or w.shape[-1] != self.latent_dim:
            raise ValueError(f"base draws must have shape (K, M, {self.latent_dim}), got {w.shape}")
        log_base = -0.5 * ad.tsum(ad.square(w), axis=-1) - 0.5 * self.latent_dim * LOG_2PI
        parts = self.split(theta)
        z = w
        log_dets = []
        pre = []
        for i, (layer, params) in enumerate(zip(self.layers, parts)):
            if keep_preimages:
                pre.append(z.value)
            z, ld = layer.forward(params, z)
            if not np.isfinite(z.value).all() or not np.isfinite(ld.value).all():
                raise NumericalError(f"non-finite output from flow layer {i} ({layer.kind})", op=f"layer{i}")
            log_dets.append(ld)
        if keep_preimages:
            pre.append(z.value)
        x, log_x, sld = self.support.forward(z)
        log_q = log_base
        for ld in log_dets:
            log_q = log_q - ld
        log_q = log_q - sld
        return FlowOutput(x, log_x, log_q, log_base, log_dets, sld, pre)

    # -- single-distribution conveniences (numpy in, numpy out) -------------

    def _theta_row(self, theta):
        if theta is None:
            if self.theta is None:
                raise ValueError("network has no parameters attached")
            theta = self.theta
        if isinstance(theta, ParamVector):
            theta = theta.data
        return np.asarray(theta, dtype=np.float64).reshape(1, -1)

    def sample(self, n, rng, theta=None, return_preimages=False):
        """Draw n samples and their exact log densities."""
        if n < 1:
            raise ValueError("n must be >= 1")
        w = rng.standard_normal((1, n, self.latent_dim))
        out = self.push_forward(self._theta_row(theta), w, keep_preimages=return_preimages)
        z, log_q = out.z.value[0], out.log_q.value[0]
        if return_preimages:
            return z, log_q, [p[0] for p in out.preimages]
        return z, log_q

    def log_density(self, z, theta=None):
        """Exact log q(z); requires every layer to be analytically invertible."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        theta = self._theta_row(theta)
        for layer in self.layers:
            if layer.kind != "affine":
                raise InverseUnavailableError(
                    "log_density at arbitrary points needs an affine-only network; "
                    "use the log densities returned by sample() instead"
                )
        y, log_det = self.support.inverse(z)
        parts = self.split(theta)
        cur = y[None]
        for layer, params in reversed(list(zip(self.layers, parts))):
            cur, ld = layer.inverse(params, cur)
            log_det = log_det + ld[0]
        w = cur[0]
        log_base = -0.5 * (w**2).sum(-1) - 0.5 * self.latent_dim * LOG_2PI
        return log_base - log_det

    def inverse_latent(self, z, theta=None):
        """Pre-image in base space for affine-only networks."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        theta = self._theta_row(theta)
        y, _ = self.support.inverse(z)
        parts = self.split(theta)
        cur = y[None]
        for layer, params in reversed(list(zip(self.layers, parts))):
            cur, _ = layer.inverse(params, cur)
        return cur[0]


def layer_forward(layer: FlowLayer, params, z):
    """Forward one layer for a single parameter set and a (M, d) batch.

    ``params`` maps names to unbatched arrays; returns numpy (z_out, log_det).
    """
    batched = {k: ad.as_tensor(np.asarray(v, dtype=np.float64)[None]) for k, v in params.items()}
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_out, log_det = layer.forward(batched, ad.as_tensor(z[None]))
    return z_out.value[0], log_det.value[0]


def default_flow_kinds(dim, kind="planar", n_layers=None, affine=True):
    """Layer list: ``n_layers`` layers of ``kind``, then an optional affine layer.

    Without an explicit count, D layers are used when D >= 20, else 20.
    """
    if n_layers is None:
        n_layers = dim if dim >= 20 else 20
    kinds = [kind] * int(n_layers)
    if affine:
        kinds = kinds + ["affine"]
    return kinds
