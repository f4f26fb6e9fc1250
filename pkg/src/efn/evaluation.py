"""Fit statistics, two-sample testing and the EFN-vs-NF decision boundary."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


# --------------------------------------------------------------------------
# distribution-regression fit


def r2_log_density(log_q, targets):
    """OLS of log q on eta.t(z) with free slope and intercept.

    The intercept estimates -log A(eta) when q matches the target.

    Returns:
        (r2, intercept)
    """
    y = np.asarray(log_q, dtype=np.float64).ravel()
    x = np.asarray(targets, dtype=np.float64).ravel()
    if y.size != x.size:
        raise ValueError("log_q and targets must have the same length")
    if y.size < 10:
        raise ValueError("r2 needs at least 10 samples")
    x_c = x - x.mean()
    y_c = y - y.mean()
    sxx = float(x_c @ x_c) / x.size
    syy = float(y_c @ y_c) / y.size
    if sxx < 1e-12:
        return (1.0 if syy < 1e-10 else 0.0), float(y.mean() - x.mean())
    slope = float(x_c @ y_c) / x.size / sxx
    intercept = float(y.mean() - slope * x.mean())
    if syy == 0.0:
        return 1.0, intercept
    resid = y_c - slope * x_c
    r2 = 1.0 - float(resid @ resid) / y.size / syy
    return r2, intercept


def batch_r2(log_q, targets):
    """Row-wise r2 for (K, M) arrays."""
    return np.array([r2_log_density(lq, t)[0] for lq, t in zip(log_q, targets)])


# --------------------------------------------------------------------------
# Monte-Carlo divergences


def _mean_se(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def kl_mc(log_q, log_p):
    """KL(q || p) from samples of q with their log densities under q and p.

    Returns:
        (kl, standard_error)
    """
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_q.size < 100:
        raise ValueError("kl_mc needs at least 100 samples")
    return _mean_se(log_q - np.asarray(log_p, dtype=np.float64))


def elbo_mc(log_q, targets):
    """E_q[eta.t(z) - log q(z)] with its standard error."""
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_q.size < 100:
        raise ValueError("elbo needs at least 100 samples")
    return _mean_se(np.asarray(targets, dtype=np.float64) - log_q)


def kl_divergence(model, family, eta, n=10_000, rng=None):
    """Monte-Carlo KL(q || p) for a fitted model at a tractable family member."""
    if not family.tractable:
        from efn.families import IntractableFamilyError

        raise IntractableFamilyError(f"{family.name} has no exact density to compare against")
    rng = np.random.default_rng() if rng is None else rng
    z, log_q = model.sample(eta, n, rng)
    return kl_mc(log_q, family.exact_log_density(eta, z))


def elbo(model, family, eta, n=10_000, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    z, log_q = model.sample(eta, n, rng)
    return elbo_mc(log_q, family.unnormalized_log_target(eta, z))


# --------------------------------------------------------------------------
# MMD two-sample test


@dataclass
class MMDResult:
    mmd2_unbiased: float
    p_value: float
    n_permutations: int
    bandwidth: float


def _sq_dists(x):
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    return np.maximum(d, 0.0)


def _mmd2_from_kernel(kmat, idx_x, idx_y):
    kxx = kmat[np.ix_(idx_x, idx_x)]
    kyy = kmat[np.ix_(idx_y, idx_y)]
    kxy = kmat[np.ix_(idx_x, idx_y)]
    n, m = idx_x.size, idx_y.size
    term_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return term_xx + term_yy - 2.0 * kxy.mean()


def mmd_test(x, y, n_permutations=500, rng=None):
    """Unbiased MMD^2 with a Gaussian kernel and a permutation p-value.

    The bandwidth is the median pairwise distance of the pooled sample, and
    p = (1 + #{permuted >= observed}) / (1 + n_permutations).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 20 or y.shape[0] < 20:
        raise ValueError("mmd_test needs at least 20 samples per side")
    if x.shape[1] != y.shape[1]:
        raise ValueError("samples must share a dimension")
    rng = np.random.default_rng() if rng is None else rng
    pooled = np.vstack([x, y])
    d2 = _sq_dists(pooled)
    iu = np.triu_indices(pooled.shape[0], 1)
    bandwidth = float(np.median(np.sqrt(d2[iu])))
    if bandwidth <= 0.0:
        raise ValueError("median pairwise distance is zero; samples are degenerate")
    kmat = np.exp(-d2 / (2.0 * bandwidth**2))
    n = x.shape[0]
    total = pooled.shape[0]
    idx = np.arange(total)
    observed = _mmd2_from_kernel(kmat, idx[:n], idx[n:])
    exceed = 0
    for _ in range(n_permutations):
        perm = rng.permutation(total)
        if _mmd2_from_kernel(kmat, perm[:n], perm[n:]) >= observed:
            exceed += 1
    p_value = (1 + exceed) / (1 + n_permutations)
    return MMDResult(float(observed), float(p_value), int(n_permutations), bandwidth)


def ks_uniform_distance(p_values):
    """Kolmogorov-Smirnov distance between p-values and U[0, 1]."""
    p = np.sort(np.asarray(p_values, dtype=np.float64))
    n = p.size
    upper = np.arange(1, n + 1) / n - p
    lower = p - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


# --------------------------------------------------------------------------
# per-eta metric records


@dataclass
class MetricRecord:
    eta_id: int
    r2: float = float("nan")
    intercept: float = float("nan")
    kl: float = float("nan")
    kl_se: float = float("nan")
    elbo: float = float("nan")
    elbo_se: float = float("nan")
    mmd_p: float = float("nan")


METRIC_FIELDS = ["eta_id", "r2", "intercept", "kl", "kl_se", "elbo", "elbo_se", "mmd_p"]


def evaluate_member(model, family, eta, eta_id=0, n=10_000, rng=None, mmd=False, mmd_n=100, mmd_permutations=500):
    """All applicable metrics for one natural parameter."""
    rng = np.random.default_rng() if rng is None else rng
    z, log_q = model.sample(eta, n, rng)
    targets = family.unnormalized_log_target(eta, z)
    rec = MetricRecord(eta_id)
    rec.r2, rec.intercept = r2_log_density(log_q, targets)
    rec.elbo, rec.elbo_se = elbo_mc(log_q, targets)
    if family.tractable:
        rec.kl, rec.kl_se = kl_mc(log_q, family.exact_log_density(eta, z))
        if mmd:
            zq, _ = model.sample(eta, mmd_n, rng)
            zp = family.exact_sample(eta, mmd_n, rng)
            rec.mmd_p = mmd_test(zq, zp, mmd_permutations, rng).p_value
    return rec


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in records:
            writer.writerow([r.eta_id] + [_fmt(getattr(r, f)) for f in METRIC_FIELDS[1:]])


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


# --------------------------------------------------------------------------
# decision boundary


@dataclass
class DecisionBoundaryResult:
    targets: np.ndarray
    t_efn: np.ndarray
    t_nf_mean: np.ndarray
    nf_reach_frac: np.ndarray
    n_star: list = field(default_factory=list)

    def rows(self):
        for i, target in enumerate(self.targets):
            yield {
                "target": float(target),
                "T_efn_s": float(self.t_efn[i]),
                "t_nf_mean_s": float(self.t_nf_mean[i]),
                "nf_reach_frac": float(self.nf_reach_frac[i]),
                "n_star": self.n_star[i],
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "T_efn_s", "t_nf_mean_s", "nf_reach_frac", "n_star"])
            for row in self.rows():
                writer.writerow([
                    repr(row["target"]),
                    _fmt_time(row["T_efn_s"]),
                    _fmt_time(row["t_nf_mean_s"]),
                    repr(row["nf_reach_frac"]),
                    "undefined" if row["n_star"] is None else row["n_star"],
                ])


def _fmt_time(t):
    return "inf" if math.isinf(t) else repr(t)


def median_filter5(values):
    """5-point running median with edge values repeated at the ends."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    padded = np.concatenate([np.repeat(v[:1], 2), v, np.repeat(v[-1:], 2)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 5)
    return np.median(windows, axis=1)


def first_crossing(wall_s, elbos, target, smooth=True):
    """First wall-clock time at which the (smoothed) ELBO reaches target."""
    e = median_filter5(elbos) if smooth else np.asarray(elbos, dtype=np.float64)
    hits = np.nonzero(e >= target)[0]
    if hits.size == 0:
        return math.inf
    return float(np.asarray(wall_s, dtype=np.float64)[hits[0]])


def decision_boundary(efn_log, nf_logs, targets, smooth=True):
    """Break-even dataset counts for a grid of ELBO targets.

    Args:
        efn_log: records with ``wall_s`` and ``elbo_mean`` (held-out mean ELBO).
        nf_logs: one record list per NF run.
        targets: ELBO target grid.

    NF runs that never reach a target are left out of the mean time and
    reported through ``nf_reach_frac``.  n_star is ceil(T_efn / t_nf) when
    both are finite, 1 when only the EFN reaches the target, and None when
    the EFN never does (or when the NF reaches it at zero wall-clock while
    the EFN does not).
    """
    targets = np.sort(np.asarray(targets, dtype=np.float64))
    efn_t = [r["wall_s"] for r in efn_log]
    efn_e = [r["elbo_mean"] for r in efn_log]
    t_efn, t_nf, frac, n_star = [], [], [], []
    for target in targets:
        te = first_crossing(efn_t, efn_e, target, smooth)
        times = [
            first_crossing([r["wall_s"] for r in log], [r["elbo_mean"] for r in log], target, smooth)
            for log in nf_logs
        ]
        reached = [t for t in times if math.isfinite(t)]
        tn = float(np.mean(reached)) if reached else math.inf
        t_efn.append(te)
        t_nf.append(tn)
        frac.append(len(reached) / len(times) if times else 0.0)
        if math.isinf(te):
            n_star.append(None)
        elif math.isinf(tn) or te <= 0.0:
            n_star.append(1)
        elif tn <= 0.0:
            # NF costs nothing: no dataset count amortizes the EFN
            n_star.append(None)
        else:
            n_star.append(max(1, math.ceil(te / tn)))
    return DecisionBoundaryResult(targets, np.array(t_efn), np.array(t_nf), np.array(frac), n_star)


def default_targets(efn_log, nf_logs, n=5):
    """Evenly spaced targets spanning the ELBO range both methods visit."""
    best = [max(median_filter5([r["elbo_mean"] for r in efn_log]))]
    best += [max(median_filter5([r["elbo_mean"] for r in log])) for log in nf_logs if log]
    start = [median_filter5([r["elbo_mean"] for r in efn_log])[0]]
    start += [median_filter5([r["elbo_mean"] for r in log])[0] for log in nf_logs if log]
    lo, hi = max(start), max(best)
    return np.linspace(lo, hi, n + 1)[1:]


def relative_elbo_logs(efn_log, nf_logs, smooth=True):
    """Re-express ELBO logs as gaps to each dataset's best NF ELBO.

    ELBOs of different datasets differ by their log partition, so a single
    absolute target grid is meaningless across datasets.  NF run i is shifted
    by its own best (smoothed) ELBO r_i; the EFN log, whose ``elbo_mean`` must
    average over the same datasets as ``nf_logs``, is shifted by mean(r_i).

    Returns:
        (efn_log, nf_logs, refs) with shifted copies of the records.
    """
    if not nf_logs:
        raise ValueError("at least one NF log is needed as a reference")
    refs = []
    for log in nf_logs:
        e = [r["elbo_mean"] for r in log]
        refs.append(float(np.max(median_filter5(e) if smooth else e)))
    shift = float(np.mean(refs))

    def shifted(log, by):
        return [dict(r, elbo_mean=r["elbo_mean"] - by, elbo_median=r["elbo_median"] - by) for r in log]

    return shifted(efn_log, shift), [shifted(log, r) for log, r in zip(nf_logs, refs)], refs
