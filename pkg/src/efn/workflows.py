"""The train / lookup / compare / decide / simulate workflows behind the CLI.

Each function takes a validated :class:`~efn.config.RunConfig`, writes its
artifacts under the run's output directory and returns a small summary.
Configuration problems raise :class:`~efn.config.ConfigError`.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from efn import config as cfgmod
from efn import data as dmod
from efn.config import ConfigError, RunConfig
from efn.families import LogGaussianPoisson
from efn.evaluation import (
    METRIC_FIELDS,
    decision_boundary,
    default_targets,
    evaluate_member,
    relative_elbo_logs,
    write_metrics_csv,
)
from efn.training import (
    CheckpointError,
    _seed_rng,
    checkpoint_load,
    init_efn,
    init_nf,
    read_log,
    train,
)

log = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.yaml"


def _prepare_out(cfg: RunConfig):
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / EFFECTIVE_CONFIG)
    return out


def _dataset_eta(family, path):
    if not isinstance(family, LogGaussianPoisson):
        raise ConfigError(f"family {family.name!r} cannot build eta from a spike dataset")
    try:
        return family.natural_params(dmod.dataset_load(path))
    except dmod.DatasetFormatError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def read_eta_input(family, path):
    """Natural parameter from a spike-dataset file or a raw eta JSON file.

    A raw file holds either a JSON list or an object with an ``eta`` list.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON (line {exc.lineno}): {exc.msg}") from None
    if isinstance(payload, dict) and payload.get("format") == dmod.FORMAT:
        return _dataset_eta(family, path)
    if isinstance(payload, dict):
        payload = payload.get("eta")
    try:
        eta = np.asarray(payload, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: eta must be a list of numbers") from None
    if eta.ndim != 1 or eta.size != family.eta_dim:
        raise ConfigError(f"{path}: eta has shape {eta.shape}, family {family.name!r} expects ({family.eta_dim},)")
    if not np.isfinite(eta).all():
        raise ConfigError(f"{path}: eta has non-finite entries")
    return eta


def nf_target_eta(cfg: RunConfig, family):
    """The single eta an nf-mode run fits: explicit, from a dataset, or drawn."""
    nf = cfg.nf
    if nf.eta is not None and nf.dataset is not None:
        raise ConfigError("nf: give either 'eta' or 'dataset', not both")
    if nf.eta is not None:
        eta = np.asarray(nf.eta, dtype=np.float64)
        if eta.shape != (family.eta_dim,):
            raise ConfigError(f"nf.eta has {eta.size} entries, family expects {family.eta_dim}")
        return eta
    if nf.dataset is not None:
        return _dataset_eta(family, nf.dataset)
    return family.eta_sample(np.random.default_rng([int(nf.eta_seed), 7]), 1)[0]


def held_out_etas(cfg: RunConfig, family):
    paths = cfg.eval.held_out_datasets
    if not paths:
        return None
    return np.array([read_eta_input(family, p) for p in paths])


# --------------------------------------------------------------------------
# train


def run_train(cfg: RunConfig, resume=False):
    """Train an EFN or an NF; writes checkpoint, JSONL log and effective config."""
    out = _prepare_out(cfg)
    family = cfg.build_family()
    net = cfg.build_net(family)
    tc = cfg.train
    resume_ck = None
    if resume:
        if not cfg.checkpoint_path.exists():
            raise ConfigError(f"cannot resume: no checkpoint at {cfg.checkpoint_path}")
        try:
            resume_ck = checkpoint_load(cfg.checkpoint_path, family)
        except CheckpointError as exc:
            raise ConfigError(f"cannot resume: {exc}") from None
    if tc.mode == "efn":
        model = init_efn(
            tc, family, net,
            depth=cfg.paramnet.depth,
            scaler=cfg.paramnet.scaler,
            scaler_draws=cfg.paramnet.scaler_draws,
            output_gain=cfg.paramnet.output_gain,
        )
        eval_etas = held_out_etas(cfg, family)
    else:
        model = init_nf(tc, family, net, nf_target_eta(cfg, family))
        eval_etas = None
    return train(
        tc, model,
        log_path=out / cfg.paths.log,
        checkpoint_path=out / cfg.paths.checkpoint,
        resume=resume_ck,
        raw_config=cfg.to_dict(),
        eval_etas=eval_etas,
    )


# --------------------------------------------------------------------------
# lookup


@dataclass
class LookupResult:
    samples: np.ndarray
    log_q: np.ndarray
    eta: np.ndarray
    path: Path
    seconds: float


def _load_checkpoint(path):
    if path is None:
        raise ConfigError("no checkpoint path given")
    try:
        return checkpoint_load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def run_lookup(cfg: RunConfig):
    """Posterior samples by a single parameter-network evaluation."""
    lk = cfg.lookup
    ck = _load_checkpoint(lk.checkpoint or cfg.checkpoint_path)
    if ck.mode != "efn":
        raise ConfigError("lookup needs an EFN checkpoint")
    if lk.input is None:
        raise ConfigError("lookup.input is required")
    if lk.n_samples < 1:
        raise ConfigError("lookup.n_samples must be >= 1")
    model = ck.model()
    eta = read_eta_input(model.family, lk.input)
    out = _prepare_out(cfg)
    t0 = time.monotonic()
    z, log_q = model.sample(eta, lk.n_samples, _seed_rng(cfg.seed, 5))
    seconds = time.monotonic() - t0
    path = out / "lookup_samples.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(z.shape[1])] + ["log_q"])
        for row, lq in zip(z, log_q):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(lq))])
    return LookupResult(z, log_q, eta, path, seconds)


# --------------------------------------------------------------------------
# compare


@dataclass
class CompareResult:
    metrics_path: Path
    summary_path: Path
    efn_records: list
    nf_records: list
    efn_log: list
    nf_logs: list
    nf_seconds: list


def _metric_kwargs(cfg):
    return dict(n=cfg.eval.mc_samples, mmd=cfg.eval.mmd, mmd_n=cfg.eval.mmd_samples,
                mmd_permutations=cfg.eval.mmd_permutations)


def run_compare(cfg: RunConfig):
    """EFN lookup vs. one NF per eta, evaluated with the same metrics.

    Every ``*.yaml`` file in ``compare.nf_dir`` is an nf-mode run config; runs
    with an existing checkpoint are loaded, the rest are trained.
    """
    cp = cfg.compare
    efn_ck = _load_checkpoint(cp.efn_checkpoint or cfg.checkpoint_path)
    if efn_ck.mode != "efn":
        raise ConfigError("compare.efn_checkpoint must be an EFN checkpoint")
    if cp.nf_dir is None:
        raise ConfigError("compare.nf_dir is required")
    nf_dir = Path(cp.nf_dir)
    nf_paths = sorted(nf_dir.glob("*.yaml")) if nf_dir.is_dir() else []
    if not nf_paths:
        raise ConfigError(f"no NF configs (*.yaml) found in {nf_dir}")
    efn = efn_ck.model()
    nf_cfgs = [cfgmod.load(p) for p in nf_paths]
    for p, c in zip(nf_paths, nf_cfgs):
        if c.train.mode != "nf":
            raise ConfigError(f"{p}: train.mode must be 'nf'")
        if c.build_family().spec_hash() != efn.family.spec_hash():
            raise ConfigError(f"{p}: family differs from the EFN checkpoint's family")
    out = _prepare_out(cfg)
    rng = _seed_rng(cfg.seed, 6)
    efn_records, nf_records, nf_logs, nf_seconds = [], [], [], []
    for i, c in enumerate(nf_cfgs):
        if c.checkpoint_path.exists():
            nf_model = _load_checkpoint(c.checkpoint_path).model()
            nf_log = read_log(c.log_path) if c.log_path.exists() else []
            seconds = nf_log[-1]["wall_s"] if nf_log else float("nan")
        else:
            result = run_train(c)
            nf_model = result.model
            nf_log = [vars(r) for r in result.log]
            seconds = nf_log[-1]["wall_s"] if nf_log else float("nan")
        eta = nf_model.eta
        efn_records.append(evaluate_member(efn, efn.family, eta, i, rng=rng, **_metric_kwargs(cfg)))
        nf_records.append(evaluate_member(nf_model, efn.family, eta, i, rng=rng, **_metric_kwargs(cfg)))
        nf_logs.append(nf_log)
        nf_seconds.append(seconds)
    metrics_path = out / "compare_metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + METRIC_FIELDS)
        for method, recs in (("efn", efn_records), ("nf", nf_records)):
            for r in recs:
                writer.writerow([method] + [_cell(getattr(r, f)) for f in METRIC_FIELDS])
    summary_path = out / "compare_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n", "r2_median", "kl_median", "elbo_median"])
        for method, recs in (("efn", efn_records), ("nf", nf_records)):
            writer.writerow([method, len(recs)] + [
                _cell(_nanmedian([getattr(r, f) for r in recs])) for f in ("r2", "kl", "elbo")
            ])
    write_metrics_csv(efn_records, out / "efn_metrics.csv")
    write_metrics_csv(nf_records, out / "nf_metrics.csv")
    efn_log_path = Path(efn_ck.config.get("paths", {}).get("out_dir", "")) / efn_ck.config.get("paths", {}).get("log", "")
    efn_log = read_log(efn_log_path) if efn_log_path.is_file() else []
    if cp.normalize and efn_log and all(nf_logs):
        rel_efn, rel_nf, _ = relative_elbo_logs(efn_log, nf_logs)
        _write_log(rel_efn, out / "efn_relative_log.jsonl")
        for i, lg in enumerate(rel_nf):
            _write_log(lg, out / f"nf_relative_log_{i:03d}.jsonl")
    return CompareResult(metrics_path, summary_path, efn_records, nf_records, efn_log, nf_logs, nf_seconds)


def _nanmedian(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(np.median(v)) if v.size else float("nan")


def _cell(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _write_log(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# --------------------------------------------------------------------------
# decide


def run_decide(cfg: RunConfig):
    """Decision-boundary table from one EFN log and several NF logs."""
    dc = cfg.decide
    if dc.efn_log is None or not dc.nf_logs:
        raise ConfigError("decide.efn_log and decide.nf_logs are required")
    try:
        efn_log = read_log(dc.efn_log)
        nf_logs = [read_log(p) for p in dc.nf_logs]
    except OSError as exc:
        raise ConfigError(f"cannot read log: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not efn_log:
        raise ConfigError(f"{dc.efn_log}: log is empty")
    targets = dc.targets if dc.targets is not None else default_targets(efn_log, nf_logs, dc.n_targets)
    result = decision_boundary(efn_log, nf_logs, targets, smooth=dc.smooth)
    out = _prepare_out(cfg)
    result.to_csv(out / "decision_boundary.csv")
    return result


def format_decision_table(result):
    lines = [f"{'target':>12} {'T_efn_s':>10} {'t_nf_mean_s':>12} {'nf_reach':>9} {'n_star':>10}"]
    for row in result.rows():
        n_star = "undefined" if row["n_star"] is None else str(row["n_star"])
        lines.append(
            f"{row['target']:>12.4g} {row['T_efn_s']:>10.4g} {row['t_nf_mean_s']:>12.4g} "
            f"{row['nf_reach_frac']:>9.2f} {n_star:>10}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# simulate


def run_simulate(cfg: RunConfig):
    """Write a synthetic spike-train corpus; returns the dataset paths."""
    sim = cfg.simulate
    if sim.n_datasets < 1 or sim.n_trials < 0:
        raise ConfigError("simulate: n_datasets must be >= 1 and n_trials >= 0")
    if sim.gp is not None:
        gp = cfgmod.parse_block(dmod.GPPriorSpec, sim.gp, "simulate.gp")
    elif cfg.family.get("name") == "lgp_posterior":
        gp = cfg.build_family().gp
    else:
        gp = dmod.GPPriorSpec()
    out = _prepare_out(cfg)
    rng = _seed_rng(cfg.seed, 8)
    paths = []
    for i in range(sim.n_datasets):
        ds, draw = dmod.simulate_dataset(gp, sim.n_trials, rng)
        ds.meta["seed"] = cfg.seed
        ds.meta["index"] = i
        ds.meta["z"] = [float(v) for v in draw.z]
        path = out / f"{sim.prefix}_{i:03d}.json"
        dmod.dataset_save(ds, path)
        paths.append(path)
    return paths
