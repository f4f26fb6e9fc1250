"""Synthetic log-Gaussian Cox-process spike trains and dataset files."""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "efn-spike-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GPPriorSpec:
    """Squared-exponential GP prior over D log-intensity bins.

    ``mean`` defaults to log(base_rate) plus a sinusoid at ``drive_hz``
    evaluated at the bin centres.
    """

    n_bins: int = 20
    bin_width: float = 0.02
    window_start: float = 0.28
    length_scale: float = 0.025
    variance: float = 1.0
    mean: tuple = None
    base_rate: float = 10.0
    drive_hz: float = 6.25
    drive_amplitude: float = 0.5
    jitter: float = 1e-6

    @property
    def times(self):
        return self.window_start + self.bin_width * (np.arange(self.n_bins) + 0.5)

    @property
    def bin_edges(self):
        return np.linspace(self.window_start, self.window_start + self.n_bins * self.bin_width, self.n_bins + 1)

    def mean_vector(self):
        if self.mean is not None:
            mu = np.asarray(self.mean, dtype=np.float64)
            if mu.shape != (self.n_bins,):
                raise ValueError(f"GP mean must have {self.n_bins} entries")
            return mu
        t = self.times
        return math.log(self.base_rate) + self.drive_amplitude * np.sin(2 * np.pi * self.drive_hz * t)

    def kernel(self):
        return gp_kernel(self, self.times)

    def to_dict(self):
        d = asdict(self)
        d["mean"] = None if self.mean is None else [float(m) for m in self.mean]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("mean") is not None:
            d["mean"] = tuple(float(m) for m in d["mean"])
        return cls(**d)


def gp_kernel(spec: GPPriorSpec, times):
    """K_ij = s2 exp(-(t_i - t_j)^2 / (2 l^2)) + jitter * s2 * delta_ij."""
    t = np.asarray(times, dtype=np.float64)
    diff = t[:, None] - t[None, :]
    k = spec.variance * np.exp(-(diff**2) / (2.0 * spec.length_scale**2))
    return k + spec.jitter * spec.variance * np.eye(t.size)


@dataclass
class CoxProcessDraw:
    z: np.ndarray
    intensity: np.ndarray


@dataclass
class SpikeDataset:
    counts: np.ndarray
    bin_edges: np.ndarray
    delta: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim == 1:
            self.counts = self.counts.reshape(0 if self.counts.size == 0 else 1, -1)
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        validate_dataset(self)

    @property
    def n_trials(self):
        return self.counts.shape[0]

    @property
    def n_bins(self):
        return self.bin_edges.size - 1

    def summary(self):
        """Sufficient data summary: per-bin count totals and trial count."""
        return self.counts.sum(axis=0).astype(np.float64), self.n_trials

    def __eq__(self, other):
        if not isinstance(other, SpikeDataset):
            return NotImplemented
        return (
            np.array_equal(self.counts, other.counts)
            and np.array_equal(self.bin_edges, other.bin_edges)
            and self.delta == other.delta
            and self.meta == other.meta
        )


def validate_dataset(ds: SpikeDataset):
    edges = ds.bin_edges
    if edges.ndim != 1 or edges.size < 2:
        raise DatasetFormatError("bin_edges must list at least two edges")
    widths = np.diff(edges)
    if np.any(widths <= 0):
        raise DatasetFormatError("bin_edges must be strictly increasing")
    if not np.allclose(widths, ds.delta, rtol=1e-9, atol=1e-12):
        raise DatasetFormatError(f"bin widths {widths} differ from delta={ds.delta}")
    if ds.counts.ndim != 2:
        raise DatasetFormatError("counts must be a trials x bins matrix")
    if ds.counts.shape[0] and ds.counts.shape[1] != edges.size - 1:
        raise DatasetFormatError(
            f"counts have {ds.counts.shape[1]} bins but header declares {edges.size - 1}"
        )
    if np.any(ds.counts < 0):
        raise DatasetFormatError("counts must be non-negative")


@functools.lru_cache(maxsize=16)
def _kernel_cholesky(spec: GPPriorSpec):
    return np.linalg.cholesky(spec.kernel())


def simulate_dataset(spec: GPPriorSpec, n_trials, rng, z=None):
    """Draw log intensities z ~ N(mu, K) once, then Poisson counts per trial."""
    if n_trials < 0:
        raise ValueError("n_trials must be >= 0")
    if z is None:
        chol = _kernel_cholesky(spec)
        z = spec.mean_vector() + chol @ rng.standard_normal(spec.n_bins)
    z = np.asarray(z, dtype=np.float64)
    intensity = spec.bin_width * np.exp(z)
    counts = rng.poisson(intensity, size=(n_trials, spec.n_bins))
    ds = SpikeDataset(
        counts,
        spec.bin_edges,
        spec.bin_width,
        meta={"synthetic": True, "gp_prior": spec.to_dict()},
    )
    return ds, CoxProcessDraw(z, intensity)


def bin_spikes(spike_times, window=(0.28, 0.68), delta=0.02):
    """Count spikes per trial in half-open bins [edge_k, edge_k+1)."""
    start, stop = window
    n_bins = int(round((stop - start) / delta))
    if not math.isclose(n_bins * delta, stop - start, rel_tol=1e-9):
        raise ValueError("delta must divide the window length")
    counts = np.zeros((len(spike_times), n_bins), dtype=np.int64)
    for i, trial in enumerate(spike_times):
        t = np.asarray(trial, dtype=np.float64)
        # rounding the bin coordinate keeps spikes on a nominal edge out of the bin below it
        idx = np.floor(np.round((t - start) / delta, 9)).astype(np.int64)
        idx = idx[(idx >= 0) & (idx < n_bins)]
        np.add.at(counts[i], idx, 1)
    return counts


def dataset_save(ds: SpikeDataset, path):
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "n_trials": ds.n_trials,
        "n_bins": ds.n_bins,
        "delta": ds.delta,
        "bin_edges": [float(e) for e in ds.bin_edges],
        "meta": ds.meta,
        "counts": [[int(c) for c in row] for row in ds.counts],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def dataset_load(path):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: not valid JSON (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DatasetFormatError(f"{path}: missing or wrong 'format' field")
    if payload.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {payload.get('version')!r}")
    for key in ("n_trials", "n_bins", "delta", "bin_edges", "counts"):
        if key not in payload:
            raise DatasetFormatError(f"{path}: missing field {key!r}")
    rows = payload["counts"]
    n_bins = payload["n_bins"]
    if len(payload["bin_edges"]) != n_bins + 1:
        raise DatasetFormatError(f"{path}: field 'bin_edges' has {len(payload['bin_edges'])} edges, expected {n_bins + 1}")
    if len(rows) != payload["n_trials"]:
        raise DatasetFormatError(f"{path}: field 'counts' has {len(rows)} rows, header says {payload['n_trials']}")
    for i, row in enumerate(rows):
        if len(row) != n_bins:
            raise DatasetFormatError(f"{path}: counts row {i} has {len(row)} bins, header says {n_bins}")
        for j, c in enumerate(row):
            if not isinstance(c, int) or c < 0:
                raise DatasetFormatError(f"{path}: counts[{i}][{j}] = {c!r} is not a non-negative integer")
    counts = np.array(rows, dtype=np.int64).reshape(len(rows), n_bins)
    try:
        return SpikeDataset(counts, payload["bin_edges"], float(payload["delta"]), payload.get("meta", {}))
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


def simulate_corpus(spec: GPPriorSpec, n_datasets, n_trials, rng):
    return [simulate_dataset(spec, n_trials, rng) for _ in range(n_datasets)]
