"""Stochastic KL objective, Adam, the EFN/NF training loop and checkpoints."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from efn import autodiff as ad
from efn import param_net as pn
from efn.autodiff import NumericalError, ParamVector
from efn.evaluation import batch_r2
from efn.families import Family, family_from_spec
from efn.flows import DensityNetwork, SupportTransform, make_layer

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EFNCKPT1"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("iter", "wall_s", "loss", "elbo_mean", "elbo_median", "r2_median")


class TrainingFailure(RuntimeError):
    def __init__(self, message, checkpoint_path=None, cause=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.cause = cause


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "efn"
    K: int = 100
    M: int = 1000
    lr: float = 1e-3
    max_iters: int = 100_000
    min_iters: int = 50_000
    plateau_eps: float = 1e-3
    plateau_window: int = 1000
    seed: int = 0
    eval_every: int = 100
    held_out_etas: int = 100
    eval_M: int = 1000
    nf_init_std: float = 0.1

    def __post_init__(self):
        if self.mode not in ("efn", "nf"):
            raise ValueError(f"mode must be 'efn' or 'nf', got {self.mode!r}")
        if self.mode == "nf" and self.K != 1:
            log.warning("nf mode trains a single distribution; K=%d coerced to 1", self.K)
            self.K = 1
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.eval_M < 10:
            raise ValueError("eval_M must be >= 10")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 1e-5 <= self.lr <= 1e-3:
            log.info("learning rate %g is outside the usual [1e-5, 1e-3] range", self.lr)
        if self.max_iters < 1 or self.min_iters < 0 or self.eval_every < 1:
            raise ValueError("iteration counts must be positive")
        if self.held_out_etas < 1:
            raise ValueError("held_out_etas must be >= 1")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params, grad, lr):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# --------------------------------------------------------------------------
# models


class EFNModel:
    """Parameter network + density network: theta = f_phi(eta)."""

    mode = "efn"

    def __init__(self, family: Family, net: DensityNetwork, spec: pn.ParamNetSpec, phi: ParamVector):
        self.family = family
        self.net = net
        self.spec = spec
        self.phi = phi

    @property
    def params(self):
        return self.phi

    def theta(self, etas, weights=None):
        return pn.forward(self.spec, self.phi if weights is None else weights, etas)

    def sample(self, eta, n, rng):
        """Lookup: n samples and log densities from q(z; eta)."""
        eta = self.family.check_eta(eta)
        theta = self.theta(eta[None]).value
        return self.net.sample(n, rng, theta=theta[0])

    def sample_batch(self, etas, w):
        return self.net.push_forward(self.theta(etas), w)


class NFModel:
    """A density network optimized directly for one natural parameter."""

    mode = "nf"

    def __init__(self, family: Family, net: DensityNetwork, eta, theta: ParamVector):
        self.family = family
        self.net = net
        self.eta = family.check_eta(np.asarray(eta, dtype=np.float64))
        self.theta_vec = theta

    @property
    def params(self):
        return self.theta_vec

    def sample(self, eta, n, rng):
        if eta is not None and not np.allclose(eta, self.eta):
            raise ValueError("an NF model only represents the eta it was trained on")
        return self.net.sample(n, rng, theta=self.theta_vec.data)

    def sample_batch(self, etas, w):
        return self.net.push_forward(self.theta_vec.data[None], w)


# --------------------------------------------------------------------------
# objective


def draw_base(rng, k, m, d):
    return rng.standard_normal((k, m, d))


def objective_from_theta(family, net, theta, etas, w):
    """Mean over (k, m) of log q(z) - eta_k . t(z): the Monte-Carlo KL up to log A."""
    out = net.push_forward(theta, w)
    per_sample = out.log_q - family.log_target(etas, out)
    return ad.mean(per_sample), per_sample


def _locate_failure(family, net, theta_rows, etas, w):
    """Index of the first eta whose forward pass is non-finite."""
    for k in range(etas.shape[0]):
        try:
            theta_k = theta_rows[k:k + 1]
            out = net.push_forward(theta_k, w[k:k + 1])
            val = out.log_q.value - family.log_target(etas[k:k + 1], out).value
            if not np.isfinite(val).all():
                return k
        except (NumericalError, FloatingPointError, ValueError):
            return k
    return None


def efn_loss(model: EFNModel, phi: ParamVector, etas, rng=None, w=None):
    """Stochastic KL loss over K etas and M base draws each.

    Returns:
        (loss, tape) with the tape ready for :func:`efn.autodiff.backward`.
    """
    etas = np.atleast_2d(etas)
    if w is None:
        w = draw_base(rng, etas.shape[0], 1000, model.net.latent_dim)

    def program(weights):
        theta = pn.forward(model.spec, weights, etas)
        loss, _ = objective_from_theta(model.family, model.net, theta, etas, w)
        return loss

    try:
        return ad.forward_record(program, phi)
    except NumericalError as exc:
        with np.errstate(all="ignore"):
            theta_rows = pn.forward(model.spec, phi, etas).value
            k = _locate_failure(model.family, model.net, theta_rows, etas, w)
        err = NumericalError(f"{exc} (eta index {k})", exc.node_id, exc.op)
        err.eta_index = k
        raise err from exc


def nf_loss(model: NFModel, theta: ParamVector, rng=None, w=None, M=1000):
    eta = model.eta[None]
    if w is None:
        w = draw_base(rng, 1, M, model.net.latent_dim)

    def program(params):
        row = ad.reshape(params["theta"], (1, -1))
        loss, _ = objective_from_theta(model.family, model.net, row, eta, w)
        return loss

    return ad.forward_record(program, ParamVector.from_arrays({"theta": theta.data}))


def loss_and_grad(model, params, etas, w):
    if model.mode == "efn":
        out, tape = efn_loss(model, params, etas, w=w)
        return float(out.value), ad.backward(tape, out).data
    out, tape = nf_loss(model, params, w=w)
    return float(out.value), ad.backward(tape, out).data


# --------------------------------------------------------------------------
# logs


@dataclass
class TrainLogRecord:
    iter: int
    wall_s: float
    loss: float
    elbo_mean: float
    elbo_median: float
    r2_median: float = None

    def to_json(self):
        d = {k: getattr(self, k) for k in LOG_FIELDS}
        return json.dumps(d)


def read_log(path):
    """Parse a JSON-lines train log.

    Raises:
        ValueError: with the 1-based line number of the first malformed line.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or set(rec) != set(LOG_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected fields {list(LOG_FIELDS)}")
            for key in ("wall_s", "elbo_mean"):
                if not isinstance(rec[key], (int, float)):
                    raise ValueError(f"{path}:{lineno}: field {key!r} is not numeric")
            records.append(rec)
    return records


# --------------------------------------------------------------------------
# checkpoints


def _enc(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _dec(s):
    return np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8").copy()


def config_hash(config_dict):
    return hashlib.sha256(json.dumps(config_dict, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    """Everything needed to resume or reuse a run.

    No wall-clock values are stored, so identical runs write identical bytes.
    """

    mode: str
    family: dict
    net: dict
    params: np.ndarray
    param_layout: list
    adam: AdamState
    rng_state: dict
    iteration: int
    config: dict = field(default_factory=dict)
    param_net: dict = None
    eta: np.ndarray = None
    version: int = CHECKPOINT_VERSION

    @property
    def family_hash(self):
        return hashlib.sha256(json.dumps(self.family, sort_keys=True).encode()).hexdigest()

    @property
    def config_hash(self):
        return config_hash(self.config)

    def to_bytes(self):
        payload = {
            "version": self.version,
            "mode": self.mode,
            "config": self.config,
            "config_hash": self.config_hash,
            "family": self.family,
            "family_hash": self.family_hash,
            "net": self.net,
            "param_net": self.param_net,
            "param_layout": [[n, list(s)] for n, s in self.param_layout],
            "params": _enc(self.params),
            "adam": {
                "m": _enc(self.adam.m), "v": _enc(self.adam.v), "t": self.adam.t,
                "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps,
            },
            "rng_state": self.rng_state,
            "iteration": self.iteration,
            "eta": None if self.eta is None else _enc(self.eta),
        }
        return CHECKPOINT_MAGIC + json.dumps(payload, sort_keys=True).encode("utf-8")

    @classmethod
    def from_bytes(cls, blob):
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("not an EFN checkpoint (bad magic header)")
        try:
            p = json.loads(blob[len(CHECKPOINT_MAGIC):].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint body: {exc}") from None
        if p.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {p.get('version')!r}")
        try:
            a = p["adam"]
            ck = cls(
                mode=p["mode"],
                family=p["family"],
                net=p["net"],
                params=_dec(p["params"]),
                param_layout=[(n, tuple(s)) for n, s in p["param_layout"]],
                adam=AdamState(_dec(a["m"]), _dec(a["v"]), a["t"], a["beta1"], a["beta2"], a["eps"]),
                rng_state=p["rng_state"],
                iteration=p["iteration"],
                config=p["config"],
                param_net=p["param_net"],
                eta=None if p["eta"] is None else _dec(p["eta"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc!r}") from None
        if ck.family_hash != p.get("family_hash") or ck.config_hash != p.get("config_hash"):
            raise CheckpointError("checkpoint hash mismatch; file is corrupt")
        return ck

    def model(self):
        family = family_from_spec(self.family)
        net = net_from_spec(self.net)
        params = ParamVector.from_layout(self.param_layout, self.params.copy())
        if self.mode == "efn":
            return EFNModel(family, net, pn.ParamNetSpec.from_dict(self.param_net), params)
        return NFModel(family, net, self.eta, params)

    def rng(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def net_from_spec(spec):
    sup = dict(spec["support"])
    for key in ("loc", "scale"):
        if sup.get(key) is not None:
            sup[key] = tuple(sup[key])
    support = SupportTransform(**sup)
    return DensityNetwork([make_layer(k, support.latent_dim) for k in spec["layers"]], support)


def checkpoint_save(ck: Checkpoint, path):
    """Write atomically: a failed write never clobbers an existing file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ck.to_bytes())
    os.replace(tmp, path)


def checkpoint_load(path, family=None):
    """Read a checkpoint; reject it when ``family`` is given and differs."""
    ck = Checkpoint.from_bytes(Path(path).read_bytes())
    if family is not None:
        expected = family.spec_hash() if isinstance(family, Family) else str(family)
        if ck.family_hash != expected:
            raise CheckpointError("checkpoint was trained on a different family")
    return ck


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    log: list
    checkpoint: Checkpoint
    stopped: str


def _seed_rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def init_efn(config: TrainConfig, family, net, depth=None, scaler=True, scaler_draws=10_000, output_gain=1.0):
    spec = pn.build_spec(family, net, depth=depth, scaler=scaler, rng=_seed_rng(config.seed, 1), scaler_draws=scaler_draws)
    phi = pn.init_weights(spec, _seed_rng(config.seed, 2), output_gain=output_gain)
    return EFNModel(family, net, spec, phi)


def init_nf(config: TrainConfig, family, net, eta):
    theta = ParamVector.from_layout([("theta", (net.n_params,))])
    theta.data[:] = config.nf_init_std * _seed_rng(config.seed, 2).standard_normal(net.n_params)
    return NFModel(family, net, eta, theta)


class Evaluator:
    """Held-out ELBO / r2 summaries on fixed etas and fixed base draws."""

    def __init__(self, model, config: TrainConfig, etas=None):
        self.model = model
        self.family = model.family
        if etas is not None:
            self.etas = np.atleast_2d(self.family.check_eta(etas))
        elif model.mode == "efn":
            self.etas = self.family.eta_sample(_seed_rng(config.seed, 3), config.held_out_etas)
        else:
            self.etas = model.eta[None]
        self.w = _seed_rng(config.seed, 4).standard_normal((self.etas.shape[0], config.eval_M, model.net.latent_dim))

    def __call__(self):
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.model.sample_batch(self.etas, self.w)
            log_q = out.log_q.value
            target = self.family.log_target(self.etas, out).value
        elbos = (target - log_q).mean(axis=1)
        r2 = float(np.median(batch_r2(log_q, target))) if self.family.tractable else None
        return elbos, r2


def _last_wall(log_path):
    """Wall-clock reached by a previous run, so resumed logs stay monotone."""
    if log_path is None or not Path(log_path).exists():
        return 0.0
    records = read_log(log_path)
    return float(records[-1]["wall_s"]) if records else 0.0


def _plateaued(records, window, eps):
    if len(records) < 2 * window:
        return False
    recent = np.mean([r.elbo_mean for r in records[-window:]])
    before = np.mean([r.elbo_mean for r in records[-2 * window:-window]])
    return recent - before < eps


def train(
    config: TrainConfig,
    model,
    log_path=None,
    checkpoint_path=None,
    resume: Checkpoint = None,
    max_iters=None,
    raw_config=None,
    eval_etas=None,
):
    """Optimize an EFN (phi) or an NF (theta) with Adam.

    Runs at least ``min_iters`` iterations, then stops once the mean held-out
    ELBO of the latest ``plateau_window`` evaluations improves on the window
    before it by less than ``plateau_eps``, or at ``max_iters``.
    """
    family, net = model.family, model.net
    limit = config.max_iters if max_iters is None else max_iters
    params = model.params
    if resume is not None:
        params = params.with_data(resume.params)
        adam = AdamState(resume.adam.m.copy(), resume.adam.v.copy(), resume.adam.t,
                         resume.adam.beta1, resume.adam.beta2, resume.adam.eps)
        rng = resume.rng()
        start = resume.iteration
        wall_offset = _last_wall(log_path)
    else:
        adam = AdamState.zeros(len(params))
        rng = _seed_rng(config.seed, 0)
        start = 0
        wall_offset = 0.0
    _set_params(model, params)
    evaluator = Evaluator(model, config, eval_etas)
    records = []
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    t0 = time.monotonic()
    it = start
    stopped = "max_iters"
    last_loss = float("nan")
    cfg_dict = raw_config if raw_config is not None else {"train": config.to_dict()}

    def snapshot(iteration):
        return Checkpoint(
            mode=model.mode,
            family=family.spec(),
            net=net.spec(),
            params=params.data.copy(),
            param_layout=params.layout,
            adam=adam,
            rng_state=rng.bit_generator.state,
            iteration=iteration,
            config=cfg_dict,
            param_net=model.spec.to_dict() if model.mode == "efn" else None,
            eta=None if model.mode == "efn" else model.eta.copy(),
        )

    try:
        while it < limit:
            if model.mode == "efn":
                etas = family.eta_sample(rng, config.K)
            else:
                etas = model.eta[None]
            w = draw_base(rng, etas.shape[0], config.M, net.latent_dim)
            try:
                last_loss, grad = loss_and_grad(model, params, etas, w)
            except NumericalError as exc:
                path = None
                if checkpoint_path is not None:
                    checkpoint_save(snapshot(it), checkpoint_path)
                    path = str(checkpoint_path)
                raise TrainingFailure(f"numeric failure at iteration {it}: {exc}", path, exc) from exc
            new_data, adam = adam_step(adam, params.data, grad, config.lr)
            params = params.with_data(new_data)
            _set_params(model, params)
            it += 1
            if it % config.eval_every == 0 or it == limit:
                elbos, r2 = evaluator()
                rec = TrainLogRecord(
                    it, wall_offset + time.monotonic() - t0, last_loss,
                    float(np.mean(elbos)), float(np.median(elbos)), r2,
                )
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                    log_fh.flush()
                if it >= config.min_iters and _plateaued(records, config.plateau_window, config.plateau_eps):
                    stopped = "plateau"
                    break
    finally:
        if log_fh:
            log_fh.close()
    ck = snapshot(it)
    if checkpoint_path is not None:
        checkpoint_save(ck, checkpoint_path)
    return TrainResult(model, records, ck, stopped)


def _set_params(model, params):
    if model.mode == "efn":
        model.phi = params
    else:
        model.theta_vec = params
