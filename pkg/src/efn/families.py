"""Target exponential families p(z; eta) ∝ exp(eta . t(z)).

Symmetric matrix blocks of eta are packed as the row-major upper triangle
with off-diagonal entries doubled, and the matching statistic block is the
plain upper triangle of z z^T, so eta . t(z) is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from efn import autodiff as ad
from efn.data import GPPriorSpec, SpikeDataset, simulate_dataset
from efn.flows import SupportTransform
from efn.special import (
    NotPositiveDefiniteError,
    cholesky,
    inverse_wishart_sample,
    lgamma_array,
    log_multivariate_beta,
)

LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


class IntractableFamilyError(TypeError):
    pass


# --------------------------------------------------------------------------
# packing helpers


def uppervec(m):
    """Row-major upper triangle (diagonal included) over the last two axes."""
    m = np.asarray(m)
    d = m.shape[-1]
    rows, cols = np.triu_indices(d)
    return m[..., rows, cols]


def pack_symmetric(a):
    """Natural-parameter packing of a symmetric matrix: off-diagonals doubled."""
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[-1]
    rows, cols = np.triu_indices(d)
    weights = np.where(rows == cols, 1.0, 2.0)
    return a[..., rows, cols] * weights


def unpack_symmetric(v, d):
    """Inverse of :func:`pack_symmetric`."""
    v = np.asarray(v, dtype=np.float64)
    rows, cols = np.triu_indices(d)
    if v.shape[-1] != rows.size:
        raise ValueError(f"packed block has {v.shape[-1]} entries, expected {rows.size}")
    weights = np.where(rows == cols, 1.0, 0.5)
    out = np.zeros(v.shape[:-1] + (d, d))
    out[..., rows, cols] = v * weights
    out[..., cols, rows] = v * weights
    return out


def posterior_natural_params(prior_eta, sum_t, n):
    """Stack the prior natural block, summed data statistics and -N."""
    if n < 0:
        raise ValueError("N must be >= 0")
    prior_eta = np.atleast_1d(np.asarray(prior_eta, dtype=np.float64))
    sum_t = np.atleast_1d(np.asarray(sum_t, dtype=np.float64))
    if prior_eta.ndim != 1 or sum_t.ndim != 1:
        raise ValueError("prior block and data summary must be vectors")
    return np.concatenate([prior_eta, sum_t, [-float(n)]])


def _quad_target(eta_lin, eta_mat, z):
    """z . h + z^T A z over a (K, M, d) tape tensor, A symmetric (K, d, d)."""
    lin = ad.tsum(z * eta_lin[:, None, :], axis=-1)
    quad = ad.tsum((z @ eta_mat) * z, axis=-1)
    return lin + quad


# --------------------------------------------------------------------------
# families


class Family:
    """Common interface; subclasses fill in the family-specific pieces."""

    name = None
    tractable = False

    @property
    def eta_dim(self):
        raise NotImplementedError

    @property
    def latent_dim(self):
        return self.D

    support_kind = "identity"

    def support_transform(self):
        return SupportTransform(self.support_kind, self.latent_dim)

    def check_support(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.D:
            raise DomainError(f"{self.name} points must have {self.D} coordinates, got {z.shape[-1]}")
        return z

    def suff_stats(self, z):
        raise NotImplementedError

    def check_eta(self, eta):
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape[-1] != self.eta_dim:
            raise ValueError(f"{self.name} eta must have {self.eta_dim} entries, got {eta.shape[-1]}")
        return eta

    def unnormalized_log_target(self, eta, z):
        """eta . t(z)."""
        eta = self.check_eta(eta)
        return self.suff_stats(z) @ eta if eta.ndim == 1 else np.einsum("...i,...i->...", self.suff_stats(z), eta)

    def log_target(self, eta, out):
        """eta_k . t(z_km) on the tape for a :class:`efn.flows.FlowOutput`.

        Args:
            eta: (K, eta_dim) numpy array.
            out: flow output with z of shape (K, M, D).
        """
        raise NotImplementedError

    def eta_sample(self, rng, n=1):
        """Draw n natural parameters from p(eta); returns (n, eta_dim)."""
        raise NotImplementedError

    def exact_log_density(self, eta, z):
        raise IntractableFamilyError(f"{self.name} has no tractable log density")

    def log_partition(self, eta):
        raise IntractableFamilyError(f"{self.name} has no tractable log partition")

    def exact_sample(self, eta, n, rng):
        raise IntractableFamilyError(f"{self.name} has no exact sampler")

    def spec(self):
        raise NotImplementedError

    def spec_hash(self):
        blob = json.dumps(self.spec(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def __repr__(self):
        return f"{type(self).__name__}({self.spec()})"


@dataclass(repr=False)
class Dirichlet(Family):
    """Dirichlet on the D-simplex; eta = alpha - 1, t(z) = log z."""

    D: int
    alpha_low: float = 0.5
    alpha_high: float = 5.0

    name = "dirichlet"
    tractable = True
    support_kind = "simplex"

    @property
    def eta_dim(self):
        return self.D

    @property
    def latent_dim(self):
        return self.D - 1

    def check_support(self, z):
        z = super().check_support(z)
        if np.any(z <= 0):
            raise DomainError("Dirichlet sufficient statistics are undefined on the simplex boundary")
        return z

    def suff_stats(self, z):
        return np.log(self.check_support(z))

    def log_target(self, eta, out):
        return ad.tsum(out.log_z * eta[:, None, :], axis=-1)

    def eta_sample(self, rng, n=1):
        alpha = rng.uniform(self.alpha_low, self.alpha_high, size=(n, self.D))
        return alpha - 1.0

    def log_partition(self, eta):
        return log_multivariate_beta(self.check_eta(eta) + 1.0)

    def exact_log_density(self, eta, z):
        eta = self.check_eta(eta)
        return self.unnormalized_log_target(eta, z) - self.log_partition(eta)

    def exact_sample(self, eta, n, rng):
        return rng.dirichlet(self.check_eta(eta) + 1.0, size=n)

    def spec(self):
        return {"name": self.name, "D": self.D, "alpha_low": self.alpha_low, "alpha_high": self.alpha_high}


@dataclass(repr=False)
class MultivariateNormal(Family):
    """Gaussian; eta = [Sigma^-1 mu; pack(-Sigma^-1 / 2)], t = [z; uppervec(z z^T)].

    The prior draws mu_i ~ N(0, mean_std^2) and Sigma ~ IW(df, df * D * I);
    df defaults to D + 2 so that the inverse-Wishart is proper for every D.
    """

    D: int
    mean_std: float = 0.1
    iw_df: float = None
    iw_scale: float = None
    max_redraws: int = 10

    name = "mvn"
    tractable = True

    def __post_init__(self):
        if self.iw_df is None:
            self.iw_df = self.D + 2
        if self.iw_scale is None:
            self.iw_scale = float(self.iw_df * self.D)
        if self.iw_df <= self.D - 1:
            raise ValueError(f"inverse-Wishart df must exceed D - 1 = {self.D - 1}")

    @property
    def eta_dim(self):
        return self.D + self.D * (self.D + 1) // 2

    def suff_stats(self, z):
        z = self.check_support(z)
        return np.concatenate([z, uppervec(z[..., :, None] * z[..., None, :])], axis=-1)

    def natural_params(self, mu, sigma):
        prec = np.linalg.inv(sigma)
        return np.concatenate([prec @ mu, pack_symmetric(-0.5 * prec)])

    def mean_params(self, eta):
        eta = self.check_eta(eta)
        prec = -2.0 * unpack_symmetric(eta[self.D:], self.D)
        sigma = np.linalg.inv(prec)
        return sigma @ eta[: self.D], 0.5 * (sigma + sigma.T)

    def split_eta(self, eta):
        eta = np.atleast_2d(eta)
        return eta[:, : self.D], unpack_symmetric(eta[:, self.D:], self.D)

    def log_target(self, eta, out):
        h, a = self.split_eta(eta)
        return _quad_target(h, a, out.z)

    def eta_sample(self, rng, n=1):
        etas = []
        for _ in range(n):
            mu = rng.normal(0.0, self.mean_std, size=self.D)
            for attempt in range(self.max_redraws):
                sigma = inverse_wishart_sample(self.iw_df, self.iw_scale * np.eye(self.D), rng)
                try:
                    cholesky(sigma)
                    break
                except NotPositiveDefiniteError:
                    continue
            else:
                raise NotPositiveDefiniteError("inverse-Wishart draws kept failing the PD check")
            etas.append(self.natural_params(mu, sigma))
        return np.array(etas)

    def log_partition(self, eta):
        mu, sigma = self.mean_params(eta)
        chol = cholesky(sigma)
        prec_mu = np.linalg.solve(sigma, mu)
        return 0.5 * mu @ prec_mu + np.log(np.diag(chol)).sum() + 0.5 * self.D * LOG_2PI

    def exact_log_density(self, eta, z):
        mu, sigma = self.mean_params(eta)
        z = self.check_support(z)
        chol = cholesky(sigma)
        sol = np.linalg.solve(chol, (z - mu).T if z.ndim > 1 else z - mu)
        maha = (sol**2).sum(axis=0)
        return -0.5 * maha - np.log(np.diag(chol)).sum() - 0.5 * self.D * LOG_2PI

    def exact_sample(self, eta, n, rng):
        mu, sigma = self.mean_params(eta)
        return rng.multivariate_normal(mu, sigma, size=n)

    def spec(self):
        return {
            "name": self.name, "D": self.D, "mean_std": self.mean_std,
            "iw_df": self.iw_df, "iw_scale": self.iw_scale,
        }


@dataclass(repr=False)
class HierarchicalDirichlet(Family):
    """Posterior of z ~ Dir(alpha) given x_i | z ~ Dir(beta z), i = 1..N.

    eta = [alpha - 1; sum_i log x_i; -N], t(z) = [log z; beta z; log B(beta z)].
    """

    D: int
    beta: float = 2.0
    alpha_low: float = 0.5
    alpha_high: float = 5.0
    n_obs_min: int = 1
    n_obs_max: int = 20

    name = "hier_dirichlet"
    support_kind = "simplex"

    @property
    def eta_dim(self):
        return 2 * self.D + 1

    @property
    def latent_dim(self):
        return self.D - 1

    def check_support(self, z):
        z = super().check_support(z)
        if np.any(z <= 0):
            raise DomainError("log z is undefined on the simplex boundary")
        return z

    def suff_stats(self, z):
        z = self.check_support(z)
        bz = self.beta * z
        return np.concatenate([np.log(z), bz, log_multivariate_beta(bz)[..., None]], axis=-1)

    def natural_params(self, alpha, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sum_log_x = np.log(x).sum(axis=0) if x.size else np.zeros(self.D)
        return posterior_natural_params(np.asarray(alpha) - 1.0, sum_log_x, x.shape[0] if x.size else 0)

    def log_target(self, eta, out):
        d = self.D
        e_logz, e_x, e_n = eta[:, None, :d], eta[:, None, d:2 * d], eta[:, None, 2 * d]
        bz = out.z * self.beta
        log_b = ad.tsum(ad.lgamma(bz), axis=-1) - ad.lgamma(ad.tsum(bz, axis=-1))
        return (
            ad.tsum(out.log_z * e_logz, axis=-1)
            + ad.tsum(bz * e_x, axis=-1)
            + log_b * e_n
        )

    def eta_sample(self, rng, n=1):
        etas = []
        for _ in range(n):
            alpha = rng.uniform(self.alpha_low, self.alpha_high, size=self.D)
            z = rng.dirichlet(alpha)
            n_obs = int(rng.integers(self.n_obs_min, self.n_obs_max + 1))
            x = rng.dirichlet(self.beta * z, size=n_obs)
            x = np.clip(x, 1e-300, None)
            etas.append(self.natural_params(alpha, x))
        return np.array(etas)

    def spec(self):
        return {
            "name": self.name, "D": self.D, "beta": self.beta,
            "alpha_low": self.alpha_low, "alpha_high": self.alpha_high,
            "n_obs_min": self.n_obs_min, "n_obs_max": self.n_obs_max,
        }


@dataclass(repr=False)
class LogGaussianPoisson(Family):
    """Posterior over log intensities z under a GP prior and Poisson counts.

    eta = [K^-1 mu; pack(-K^-1 / 2); sum of counts per bin; -N] and
    t(z) = [z; uppervec(z z^T); z; bin_width * sum_t exp(z_t)].
    """

    gp: GPPriorSpec = field(default_factory=GPPriorSpec)
    n_trials_min: int = 20
    n_trials_max: int = 20

    name = "lgp_posterior"

    def __post_init__(self):
        if isinstance(self.gp, dict):
            self.gp = GPPriorSpec.from_dict(self.gp)
        chol = cholesky(self.gp.kernel())
        self._kinv = np.linalg.inv(self.gp.kernel())
        self._kinv = 0.5 * (self._kinv + self._kinv.T)
        self._chol = chol
        self._prior_eta = np.concatenate([self._kinv @ self.gp.mean_vector(), pack_symmetric(-0.5 * self._kinv)])

    @property
    def D(self):
        return self.gp.n_bins

    @property
    def eta_dim(self):
        d = self.D
        return d + d * (d + 1) // 2 + d + 1

    @property
    def prior_eta(self):
        return self._prior_eta.copy()

    def support_transform(self):
        sd = math.sqrt(self.gp.variance)
        return SupportTransform(
            "identity", self.D, loc=tuple(float(m) for m in self.gp.mean_vector()), scale=(sd,) * self.D
        )

    def suff_stats(self, z):
        z = self.check_support(z)
        return np.concatenate(
            [
                z,
                uppervec(z[..., :, None] * z[..., None, :]),
                z,
                (self.gp.bin_width * np.exp(z).sum(axis=-1))[..., None],
            ],
            axis=-1,
        )

    def natural_params(self, dataset: SpikeDataset):
        if dataset.n_bins != self.D:
            raise ValueError(f"dataset has {dataset.n_bins} bins, family expects {self.D}")
        if not math.isclose(dataset.delta, self.gp.bin_width, rel_tol=1e-9):
            raise ValueError(f"dataset bin width {dataset.delta} differs from {self.gp.bin_width}")
        sums, n = dataset.summary()
        return posterior_natural_params(self._prior_eta, sums, n)

    def log_target(self, eta, out):
        d = self.D
        n_quad = d * (d + 1) // 2
        h = eta[:, :d] + eta[:, d + n_quad: 2 * d + n_quad]
        a = unpack_symmetric(eta[:, d: d + n_quad], d)
        quad = _quad_target(h, a, out.z)
        exp_term = ad.tsum(ad.exp(out.z), axis=-1) * (self.gp.bin_width * eta[:, None, -1])
        return quad + exp_term

    def eta_sample(self, rng, n=1):
        etas = []
        for _ in range(n):
            n_trials = int(rng.integers(self.n_trials_min, self.n_trials_max + 1))
            ds, _ = simulate_dataset(self.gp, n_trials, rng)
            etas.append(self.natural_params(ds))
        return np.array(etas)

    def spec(self):
        return {
            "name": self.name, "gp": self.gp.to_dict(),
            "n_trials_min": self.n_trials_min, "n_trials_max": self.n_trials_max,
        }


@dataclass(repr=False)
class GaussianConjugate(Family):
    """Test-only posterior family: N(mu0, S0) prior, x_i | z ~ N(z, Sx).

    eta = [prior natural block; sum_i x_i; -N],
    t(z) = [z; uppervec(z z^T); Sx^-1 z; z^T Sx^-1 z / 2].
    """

    D: int
    prior_mean: tuple = None
    prior_cov: tuple = None
    noise_cov: tuple = None

    name = "gaussian_conjugate"
    tractable = True

    def __post_init__(self):
        d = self.D
        self._mu0 = np.zeros(d) if self.prior_mean is None else np.asarray(self.prior_mean, float)
        self._s0 = np.eye(d) if self.prior_cov is None else np.asarray(self.prior_cov, float)
        self._sx = np.eye(d) if self.noise_cov is None else np.asarray(self.noise_cov, float)
        self._sx_inv = np.linalg.inv(self._sx)
        p0 = np.linalg.inv(self._s0)
        self._prior_eta = np.concatenate([p0 @ self._mu0, pack_symmetric(-0.5 * p0)])

    @property
    def eta_dim(self):
        d = self.D
        return d + d * (d + 1) // 2 + d + 1

    def suff_stats(self, z):
        z = self.check_support(z)
        sz = z @ self._sx_inv
        return np.concatenate(
            [z, uppervec(z[..., :, None] * z[..., None, :]), sz, 0.5 * (sz * z).sum(-1, keepdims=True)],
            axis=-1,
        )

    def natural_params(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return posterior_natural_params(self._prior_eta, x.sum(axis=0), x.shape[0])

    def closed_form_posterior(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        prec = np.linalg.inv(self._s0) + x.shape[0] * self._sx_inv
        cov = np.linalg.inv(prec)
        mean = cov @ (np.linalg.solve(self._s0, self._mu0) + self._sx_inv @ x.sum(axis=0))
        return mean, cov

    def to_mvn_eta(self, eta):
        """Collapse a posterior eta into the plain Gaussian packing."""
        eta = self.check_eta(eta)
        d = self.D
        nq = d * (d + 1) // 2
        lin = eta[:d] + self._sx_inv @ eta[d + nq: 2 * d + nq]
        mat = unpack_symmetric(eta[d: d + nq], d) + 0.5 * eta[-1] * self._sx_inv
        return np.concatenate([lin, pack_symmetric(mat)])

    def log_target(self, eta, out):
        d = self.D
        nq = d * (d + 1) // 2
        h = eta[:, :d] + eta[:, d + nq: 2 * d + nq] @ self._sx_inv
        a = unpack_symmetric(eta[:, d: d + nq], d) + 0.5 * eta[:, -1, None, None] * self._sx_inv
        return _quad_target(h, a, out.z)

    def eta_sample(self, rng, n=1):
        etas = []
        for _ in range(n):
            z = rng.multivariate_normal(self._mu0, self._s0)
            x = rng.multivariate_normal(z, self._sx, size=int(rng.integers(1, 10)))
            etas.append(self.natural_params(x))
        return np.array(etas)

    def exact_log_density(self, eta, z):
        return MultivariateNormal(self.D).exact_log_density(self.to_mvn_eta(eta), z)

    def log_partition(self, eta):
        return MultivariateNormal(self.D).log_partition(self.to_mvn_eta(eta))

    def spec(self):
        return {"name": self.name, "D": self.D}


FAMILIES = {
    "dirichlet": Dirichlet,
    "mvn": MultivariateNormal,
    "hier_dirichlet": HierarchicalDirichlet,
    "lgp_posterior": LogGaussianPoisson,
}


def family_from_spec(spec):
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}")
    cls = FAMILIES[name]
    if cls is LogGaussianPoisson and isinstance(spec.get("gp"), dict):
        spec["gp"] = GPPriorSpec.from_dict(spec["gp"])
    return cls(**spec)


def suff_stats(family: Family, z):
    return family.suff_stats(z)


def eta_sample(family: Family, rng):
    return family.eta_sample(rng, 1)[0]


def exact_log_density(family: Family, eta, z):
    return family.exact_log_density(eta, z)


def unnormalized_log_target(family: Family, eta, z):
    return family.unnormalized_log_target(eta, z)
