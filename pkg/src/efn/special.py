"""Special functions and matrix helpers used by the exponential families."""

import math

import numpy as np

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def _lanczos_parts(x):
    z = x - 1.0
    idx = np.arange(1, 9, dtype=np.float64)
    denom = z[..., None] + idx
    series = _LANCZOS_COEF[0] + (_LANCZOS_COEF[1:] / denom).sum(axis=-1)
    dseries = -(_LANCZOS_COEF[1:] / denom**2).sum(axis=-1)
    t = z + _LANCZOS_G + 0.5
    return z, t, series, dseries


def lgamma_array(x):
    """Elementwise log Gamma for positive ``x`` (reflection below 0.5)."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    xs = np.where(small, 1.0 - x, x)
    z, t, series, _ = _lanczos_parts(xs)
    out = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)
    if np.any(small):
        # lgamma(x) = log(pi / sin(pi x)) - lgamma(1 - x), valid for 0 < x < 0.5
        refl = np.log(np.pi / np.abs(np.sin(np.pi * x))) - out
        out = np.where(small, refl, out)
    return out


def digamma_array(x):
    """Derivative of :func:`lgamma_array`."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    xs = np.where(small, 1.0 - x, x)
    z, t, series, dseries = _lanczos_parts(xs)
    out = np.log(t) + (z + 0.5) / t - 1.0 + dseries / series
    if np.any(small):
        refl = out - np.pi / np.tan(np.pi * x)
        out = np.where(small, refl, out)
    return out


def lgamma(x):
    if x <= 0:
        raise ValueError("lgamma requires x > 0")
    return float(lgamma_array(np.float64(x)))


def log_multivariate_beta(a, axis=-1):
    """log B(a) = sum lgamma(a_i) - lgamma(sum a_i)."""
    a = np.asarray(a, dtype=np.float64)
    return lgamma_array(a).sum(axis=axis) - lgamma_array(a.sum(axis=axis))


def cholesky(a):
    """Lower-triangular L with a = L L^T.

    Raises:
        NotPositiveDefiniteError: if ``a`` is not symmetric positive definite.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("cholesky expects a square matrix")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None


def wishart_sample(df, scale, rng):
    """Bartlett-decomposition draw from Wishart(df, scale)."""
    scale = np.asarray(scale, dtype=np.float64)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError(f"Wishart degrees of freedom must exceed {p - 1}, got {df}")
    chol = cholesky(scale)
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    rows, cols = np.tril_indices(p, -1)
    a[rows, cols] = rng.standard_normal(rows.size)
    la = chol @ a
    return la @ la.T


def inverse_wishart_sample(df, scale, rng):
    """Draw from the inverse-Wishart IW(df, scale); its mean is scale / (df - p - 1)."""
    scale = np.asarray(scale, dtype=np.float64)
    w = wishart_sample(df, np.linalg.inv(scale), rng)
    sigma = np.linalg.inv(w)
    return 0.5 * (sigma + sigma.T)
