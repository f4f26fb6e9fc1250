import json
import math

import numpy as np
import pytest

from efn import autodiff as ad
from efn import param_net as pn
from efn.families import Dirichlet, MultivariateNormal
from efn.flows import DensityNetwork, SupportTransform, default_flow_kinds
from efn.training import (
    CHECKPOINT_MAGIC,
    AdamState,
    Checkpoint,
    CheckpointError,
    EFNModel,
    NFModel,
    TrainConfig,
    TrainingFailure,
    adam_step,
    checkpoint_load,
    checkpoint_save,
    efn_loss,
    init_efn,
    init_nf,
    nf_loss,
    read_log,
    train,
)

LOG_2PI = math.log(2 * math.pi)


def _mvn_net(d=2, n_planar=1):
    return DensityNetwork.build(["planar"] * n_planar + ["affine"], SupportTransform("identity", d))


def _small_cfg(**kw):
    base = dict(K=4, M=20, lr=1e-3, max_iters=30, min_iters=30, eval_every=10, held_out_etas=3, eval_M=20, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def _small_efn(cfg, fam=None):
    fam = fam or Dirichlet(3)
    net = DensityNetwork.build(default_flow_kinds(fam.latent_dim, n_layers=2), fam.support_transform())
    return init_efn(cfg, fam, net, scaler_draws=200)


# --------------------------------------------------------------------------
# objective


def test_single_term_identity_flow_gives_base_log_density():
    fam = MultivariateNormal(2)
    net = DensityNetwork.build(["affine"], SupportTransform("identity", 2))
    theta = ad.ParamVector.from_layout([("theta", (net.n_params,))])
    model = NFModel(fam, net, np.zeros(fam.eta_dim), theta)
    w = np.array([[[0.3, -1.1]]])
    loss, _ = nf_loss(model, theta, w=w)
    assert float(loss.value) == pytest.approx(-0.5 * (0.09 + 1.21) - LOG_2PI, abs=1e-15)


def _planar_oracle(row, z):
    u, w, b = row[:2], row[2:4], row[4]
    wu = w @ u
    u_hat = u + (math.log1p(math.exp(wu)) - 1.0 - wu) * w / (w @ w + 1e-12)
    a = w @ z + b
    out = z + u_hat * math.tanh(a)
    det = 1.0 + (1.0 - math.tanh(a) ** 2) * (w @ u_hat)
    return out, math.log(abs(det))


def _affine_oracle(row, z):
    lower, log_diag, shift = row[0], row[1:3], row[3:5]
    mat = np.array([[math.exp(log_diag[0]), 0.0], [lower, math.exp(log_diag[1])]])
    return mat @ z + shift, log_diag.sum()


def test_loss_matches_per_sample_brute_force_sum():
    fam = MultivariateNormal(2)
    net = _mvn_net()
    rng = np.random.default_rng(0)
    k, m = 2, 3
    theta = rng.normal(size=(k, net.n_params)) * 0.5
    etas = fam.eta_sample(rng, k)
    w = rng.normal(size=(k, m, 2))
    out = net.push_forward(theta, w)
    per = out.log_q.value - fam.log_target(etas, out).value

    total = 0.0
    for i in range(k):
        for j in range(m):
            z = w[i, j]
            log_q = -0.5 * z @ z - LOG_2PI
            z, ld = _planar_oracle(theta[i, :5], z)
            log_q -= ld
            z, ld = _affine_oracle(theta[i, 5:], z)
            log_q -= ld
            t = np.array([z[0], z[1], z[0] * z[0], z[0] * z[1], z[1] * z[1]])
            term = log_q - etas[i] @ t
            assert per[i, j] == pytest.approx(term, abs=1e-12)
            total += term
    assert float(np.mean(per)) == pytest.approx(total / (k * m), abs=1e-12)


def test_efn_with_direct_theta_equals_nf_exactly():
    fam = MultivariateNormal(2)
    net = _mvn_net()
    rng = np.random.default_rng(1)
    theta_row = rng.normal(size=net.n_params) * 0.3
    eta = fam.eta_sample(rng, 1)[0]
    # zero weights turn the parameter network into a constant theta table
    spec = pn.ParamNetSpec(fam.eta_dim, net.n_params, pn.layer_widths(fam.eta_dim, net.n_params, 4))
    phi = ad.ParamVector.from_layout(spec.layout)
    phi["b2"][...] = theta_row
    efn = EFNModel(fam, net, spec, phi)
    nf = NFModel(fam, net, eta, ad.ParamVector.from_arrays({"theta": theta_row}))
    w = np.random.default_rng(2).standard_normal((1, 50, 2))
    a, _ = efn_loss(efn, phi, eta[None], w=w)
    b, _ = nf_loss(nf, nf.theta_vec, w=w)
    assert float(a.value) == float(b.value)


def test_non_finite_loss_reports_eta_index():
    cfg = _small_cfg()
    fam = MultivariateNormal(2)
    net = _mvn_net()
    model = init_efn(cfg, fam, net, scaler=False)
    etas = fam.eta_sample(np.random.default_rng(3), 3)
    etas[2, 2:] = -1e308
    with pytest.raises(ad.NumericalError) as info:
        efn_loss(model, model.phi, etas, w=np.ones((3, 5, 2)))
    assert info.value.eta_index == 2
    assert "eta index 2" in str(info.value)


# --------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params_unchanged():
    p = np.array([1.0, -2.0, 3.0])
    new, state = adam_step(AdamState.zeros(3), p, np.zeros(3), 1e-3)
    np.testing.assert_array_equal(new, p)
    assert state.t == 1


def test_adam_first_step_is_lr_times_sign():
    p = np.zeros(4)
    g = np.array([2.0, -0.5, 1e-3, -7.0])
    new, _ = adam_step(AdamState.zeros(4), p, g, 0.01)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=(10, 5))
    p = rng.normal(size=5)
    lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8

    ref = p.copy()
    m = [0.0] * 5
    v = [0.0] * 5
    for t in range(1, 11):
        for i in range(5):
            g = grads[t - 1, i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            ref[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)

    state = AdamState.zeros(5)
    cur = p.copy()
    for g in grads:
        cur, state = adam_step(state, cur, g, lr)
    np.testing.assert_allclose(cur, ref, rtol=0, atol=1e-12)
    assert (state.v >= 0).all()


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(3), np.zeros(2), 1e-3)


# --------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="gd")
    with pytest.raises(ValueError):
        TrainConfig(M=1)
    with pytest.raises(ValueError):
        TrainConfig(K=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_nf_mode_forces_single_eta():
    assert TrainConfig(mode="nf", K=50).K == 1


# --------------------------------------------------------------------------
# training loop


def test_same_seed_gives_identical_runs(tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = _small_cfg()
        res = train(cfg, _small_efn(cfg), log_path=tmp_path / f"{name}.jsonl", checkpoint_path=tmp_path / f"{name}.ck")
        runs.append(res)
    assert [r.loss for r in runs[0].log] == [r.loss for r in runs[1].log]
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_log_records_have_the_documented_fields(tmp_path):
    cfg = _small_cfg()
    train(cfg, _small_efn(cfg), log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    walls = []
    for line in lines:
        rec = json.loads(line)
        assert list(rec) == ["iter", "wall_s", "loss", "elbo_mean", "elbo_median", "r2_median"]
        walls.append(rec["wall_s"])
    assert walls == sorted(walls)
    assert [r["iter"] for r in read_log(tmp_path / "log.jsonl")] == [10, 20, 30]


def test_intractable_family_logs_null_r2(tmp_path):
    from efn.families import HierarchicalDirichlet

    cfg = _small_cfg(max_iters=10, min_iters=10)
    train(cfg, _small_efn(cfg, HierarchicalDirichlet(3)), log_path=tmp_path / "log.jsonl")
    assert read_log(tmp_path / "log.jsonl")[0]["r2_median"] is None


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = _small_cfg(max_iters=20, min_iters=20)
    full = train(cfg, _small_efn(cfg), log_path=tmp_path / "full.jsonl")

    part_cfg = _small_cfg(max_iters=20, min_iters=20)
    ck_path = tmp_path / "part.ck"
    train(part_cfg, _small_efn(part_cfg), log_path=tmp_path / "part.jsonl", checkpoint_path=ck_path, max_iters=10)
    ck = checkpoint_load(ck_path, Dirichlet(3))
    assert ck.iteration == 10
    resumed = train(part_cfg, ck.model(), log_path=tmp_path / "part.jsonl", resume=ck)

    assert resumed.checkpoint.params.tobytes() == full.checkpoint.params.tobytes()
    part_losses = [r["loss"] for r in read_log(tmp_path / "part.jsonl")]
    assert part_losses == [r.loss for r in full.log]
    walls = [r["wall_s"] for r in read_log(tmp_path / "part.jsonl")]
    assert walls == sorted(walls)


def test_plateau_rule_stops_early():
    cfg = _small_cfg(max_iters=200, min_iters=0, eval_every=1, plateau_window=2, plateau_eps=1e6)
    res = train(cfg, _small_efn(cfg))
    assert res.stopped == "plateau"
    assert res.checkpoint.iteration == 4


def test_min_iters_is_respected():
    cfg = _small_cfg(max_iters=50, min_iters=20, eval_every=1, plateau_window=2, plateau_eps=1e6)
    res = train(cfg, _small_efn(cfg))
    assert res.checkpoint.iteration == 20


def test_nf_on_gaussian_with_affine_flow_reaches_tiny_kl():
    fam = MultivariateNormal(2)
    eta = fam.natural_params(np.array([0.5, -1.0]), np.array([[2.0, 0.6], [0.6, 1.0]]))
    net = DensityNetwork.build(["affine"], SupportTransform("identity", 2))
    cfg = TrainConfig(mode="nf", M=200, lr=1e-2, max_iters=1500, min_iters=1500, eval_every=500, eval_M=50, seed=0)
    res = train(cfg, init_nf(cfg, fam, net, eta))
    theta = ad.ParamVector.from_layout(net.layout, res.model.theta_vec.data)
    split = net.split(theta.data[None])
    lmat = net.layers[0].matrix(split[0]).value[0]
    q_mean, q_cov = split[0]["shift"].value[0], lmat @ lmat.T
    p_mean, p_cov = fam.mean_params(eta)
    p_inv = np.linalg.inv(p_cov)
    diff = p_mean - q_mean
    kl = 0.5 * (np.trace(p_inv @ q_cov) + diff @ p_inv @ diff - 2 + np.log(np.linalg.det(p_cov) / np.linalg.det(q_cov)))
    assert kl <= 1e-2


def test_loss_decreases_over_training():
    cfg = _small_cfg(max_iters=300, min_iters=300, eval_every=3, lr=1e-3, K=5, M=50)
    res = train(cfg, _small_efn(cfg))
    losses = [r.loss for r in res.log]
    n = len(losses) // 10
    assert np.median(losses[-n:]) < np.median(losses[:n])


def test_numeric_failure_checkpoints_last_good_state(tmp_path):
    cfg = _small_cfg()
    model = _small_efn(cfg)
    model.phi.data[:] = 1e300
    with pytest.raises(TrainingFailure) as info:
        train(cfg, model, checkpoint_path=tmp_path / "ck")
    assert info.value.checkpoint_path == str(tmp_path / "ck")
    assert checkpoint_load(tmp_path / "ck").iteration == 0


# --------------------------------------------------------------------------
# checkpoints


def _checkpoint(tmp_path):
    cfg = _small_cfg(max_iters=5, min_iters=5)
    res = train(cfg, _small_efn(cfg), checkpoint_path=tmp_path / "ck")
    return res, tmp_path / "ck"


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    _, path = _checkpoint(tmp_path)
    blob = path.read_bytes()
    assert blob.startswith(CHECKPOINT_MAGIC)
    ck = checkpoint_load(path)
    checkpoint_save(ck, tmp_path / "again")
    assert (tmp_path / "again").read_bytes() == blob


def test_checkpoint_restores_model_and_rng(tmp_path):
    res, path = _checkpoint(tmp_path)
    ck = checkpoint_load(path)
    model = ck.model()
    assert model.phi.data.tobytes() == res.model.phi.data.tobytes()
    assert model.spec.to_dict() == res.model.spec.to_dict()
    assert ck.rng().random() == res.checkpoint.rng().random()


def test_checkpoint_rejects_other_family(tmp_path):
    _, path = _checkpoint(tmp_path)
    with pytest.raises(CheckpointError, match="different family"):
        checkpoint_load(path, Dirichlet(4))


def test_truncated_checkpoint_is_rejected_and_original_untouched(tmp_path):
    _, path = _checkpoint(tmp_path)
    blob = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        checkpoint_load(bad)
    assert path.read_bytes() == blob


def test_failed_save_leaves_existing_checkpoint(tmp_path, monkeypatch):
    res, path = _checkpoint(tmp_path)
    blob = path.read_bytes()

    def boom(self):
        raise OSError("disk full")

    monkeypatch.setattr(Checkpoint, "to_bytes", boom)
    with pytest.raises(OSError):
        checkpoint_save(res.checkpoint, path)
    assert path.read_bytes() == blob


def test_checkpoint_rejects_bad_magic_version_and_hash(tmp_path):
    _, path = _checkpoint(tmp_path)
    blob = path.read_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + blob[8:])
    body = json.loads(blob[8:])
    body["version"] = 99
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(CHECKPOINT_MAGIC + json.dumps(body).encode())
    body = json.loads(blob[8:])
    body["family"]["D"] = 9
    with pytest.raises(CheckpointError, match="hash"):
        Checkpoint.from_bytes(CHECKPOINT_MAGIC + json.dumps(body).encode())


def test_read_log_reports_line_numbers(tmp_path):
    good = json.dumps({"iter": 1, "wall_s": 0.1, "loss": 1.0, "elbo_mean": -1.0, "elbo_median": -1.0, "r2_median": None})
    path = tmp_path / "log.jsonl"
    path.write_text(good + "\n" + "{oops\n")
    with pytest.raises(ValueError, match=r":2:"):
        read_log(path)
    path.write_text(good + "\n" + good + "\n" + json.dumps({"iter": 3}) + "\n")
    with pytest.raises(ValueError, match=r":3:"):
        read_log(path)
