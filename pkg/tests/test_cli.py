import csv
import json

import numpy as np
import pytest
import yaml

from efn import cli
from efn import training
from efn.autodiff import NumericalError
from efn.config import load
from efn.data import dataset_load

TRAIN = {
    "family": {"name": "dirichlet", "D": 3},
    "seed": 4,
    "flow": {"n_layers": 2},
    "paramnet": {"scaler_draws": 500},
    "train": {"K": 4, "M": 20, "max_iters": 20, "min_iters": 0, "eval_every": 5, "held_out_etas": 3, "eval_M": 50},
}


def _nf_config(seed):
    return {
        "family": {"name": "dirichlet", "D": 3},
        "seed": seed,
        "flow": {"n_layers": 2},
        "train": {"mode": "nf", "M": 20, "max_iters": 30, "min_iters": 0, "eval_every": 5, "eval_M": 50},
        "nf": {"eta_seed": seed},
        "paths": {"out_dir": f"nf_runs/{seed}"},
    }


def _write(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def trained(workdir):
    cfg = _write(workdir / "train.yaml", TRAIN)
    assert cli.main(["train", "--config", cfg, "--out", "run"]) == 0
    return workdir


def test_train_writes_outputs_and_effective_config(workdir, capsys):
    cfg = _write(workdir / "train.yaml", TRAIN)
    assert cli.main(["train", "--config", cfg, "--out", "run"]) == 0
    run = workdir / "run"
    for name in ("checkpoint.efnckpt", "train_log.jsonl", "effective_config.yaml"):
        assert (run / name).is_file()
    eff = load(run / "effective_config.yaml")
    assert eff.seed == 4
    assert eff.family["name"] == "dirichlet"
    assert "trained 20 iterations" in capsys.readouterr().out


def test_effective_config_reproduces_the_run(trained):
    assert cli.main(["train", "--config", str(trained / "run" / "effective_config.yaml"), "--out", "again"]) == 0
    a = training.checkpoint_load(trained / "run" / "checkpoint.efnckpt")
    b = training.checkpoint_load(trained / "again" / "checkpoint.efnckpt")
    # the stored config differs only in paths.out_dir
    assert a.params.tobytes() == b.params.tobytes()
    assert a.adam.v.tobytes() == b.adam.v.tobytes()
    assert a.rng_state == b.rng_state
    assert {k: v for k, v in a.config.items() if k != "paths"} == {k: v for k, v in b.config.items() if k != "paths"}
    losses = [[r["loss"] for r in training.read_log(trained / d / "train_log.jsonl")] for d in ("run", "again")]
    assert losses[0] == losses[1]


def test_same_config_and_seed_give_identical_checkpoint_bytes(trained):
    first = (trained / "run" / "checkpoint.efnckpt").read_bytes()
    assert cli.main(["train", "--config", "train.yaml", "--out", "run"]) == 0
    assert (trained / "run" / "checkpoint.efnckpt").read_bytes() == first


def test_seed_override_changes_the_run(trained):
    assert cli.main(["train", "--config", "train.yaml", "--out", "other", "--seed", "0x10"]) == 0
    assert load(trained / "other" / "effective_config.yaml").seed == 16
    assert (trained / "run" / "checkpoint.efnckpt").read_bytes() != (trained / "other" / "checkpoint.efnckpt").read_bytes()


def test_resume_continues_a_run(trained):
    data = dict(TRAIN, train=dict(TRAIN["train"], max_iters=30))
    _write(trained / "longer.yaml", data)
    assert cli.main(["train", "--config", "longer.yaml", "--out", "run", "--resume"]) == 0
    ck = training.checkpoint_load(trained / "run" / "checkpoint.efnckpt")
    assert ck.iteration == 30
    iters = [r["iter"] for r in training.read_log(trained / "run" / "train_log.jsonl")]
    assert iters == [5, 10, 15, 20, 25, 30]


def test_resume_without_checkpoint_is_a_config_error(workdir):
    _write(workdir / "train.yaml", TRAIN)
    assert cli.main(["train", "--config", "train.yaml", "--out", "fresh", "--resume"]) == 2


@pytest.mark.parametrize(
    "data",
    [
        {"family": {"D": 3}},
        {"family": {"name": "poisson"}},
        {"family": {"name": "dirichlet", "D": 3}, "trian": {}},
        {"family": {"name": "dirichlet", "D": 3}, "train": {"seed": 3}},
        {"family": {"name": "dirichlet", "D": 3}, "train": {"K": 0}},
        {"family": {"name": "dirichlet", "D": 3}, "train": {"batch": 5}},
        [1, 2, 3],
    ],
    ids=["no-name", "unknown-family", "unknown-section", "seed-in-train", "bad-K", "unknown-field", "not-a-mapping"],
)
def test_invalid_configs_exit_2(workdir, data, capsys):
    _write(workdir / "bad.yaml", data)
    assert cli.main(["train", "--config", "bad.yaml"]) == 2
    assert "config error" in capsys.readouterr().err


def test_usage_errors_exit_2(workdir):
    _write(workdir / "ok.yaml", TRAIN)
    assert cli.main([]) == 2
    assert cli.main(["fly", "--config", "ok.yaml"]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["train", "--config", "ok.yaml", "--seed", "-1"]) == 2
    assert cli.main(["train", "--config", "ok.yaml", "--seed", str(2**64)]) == 2
    assert cli.main(["train", "--config", "missing.yaml"]) == 2
    (workdir / "broken.yaml").write_text("family: [unclosed\n")
    assert cli.main(["train", "--config", "broken.yaml"]) == 2


def test_largest_u64_seed_is_accepted(workdir):
    data = dict(TRAIN, train=dict(TRAIN["train"], max_iters=5))
    _write(workdir / "t.yaml", data)
    assert cli.main(["train", "--config", "t.yaml", "--seed", str(2**64 - 1)]) == 0


def test_numeric_failure_exits_3_and_names_checkpoint(workdir, monkeypatch, capsys):
    def explode(*args, **kw):
        raise NumericalError("log of a negative number", 7, "log")

    monkeypatch.setattr(training, "loss_and_grad", explode)
    _write(workdir / "train.yaml", TRAIN)
    assert cli.main(["train", "--config", "train.yaml", "--out", "boom"]) == 3
    err = capsys.readouterr().err
    assert "checkpoint.efnckpt" in err
    assert (workdir / "boom" / "checkpoint.efnckpt").is_file()


def test_lookup_writes_samples(trained):
    (trained / "eta.json").write_text(json.dumps({"eta": [0.5, 1.0, 2.0]}))
    _write(trained / "look.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "lookup": {"checkpoint": "run/checkpoint.efnckpt", "input": "eta.json", "n_samples": 7},
    })
    assert cli.main(["lookup", "--config", "look.yaml", "--out", "lk"]) == 0
    rows = list(csv.reader(open(trained / "lk" / "lookup_samples.csv")))
    assert rows[0] == ["z0", "z1", "z2", "log_q"]
    assert len(rows) == 8
    z = np.array([[float(v) for v in r[:3]] for r in rows[1:]])
    np.testing.assert_allclose(z.sum(axis=1), 1.0)
    first = (trained / "lk" / "lookup_samples.csv").read_bytes()
    assert cli.main(["lookup", "--config", "look.yaml", "--out", "lk"]) == 0
    assert (trained / "lk" / "lookup_samples.csv").read_bytes() == first


def test_lookup_rejects_wrong_eta_dimension(trained):
    (trained / "eta.json").write_text(json.dumps([0.5, 1.0]))
    _write(trained / "look.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "lookup": {"checkpoint": "run/checkpoint.efnckpt", "input": "eta.json"},
    })
    assert cli.main(["lookup", "--config", "look.yaml"]) == 2


def test_lookup_rejects_missing_checkpoint(workdir):
    (workdir / "eta.json").write_text("[1, 1, 1]")
    _write(workdir / "look.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "lookup": {"checkpoint": "nowhere.efnckpt", "input": "eta.json"},
    })
    assert cli.main(["lookup", "--config", "look.yaml"]) == 2


def test_compare_and_decide(trained):
    (trained / "nfs").mkdir()
    for seed in (0, 1):
        _write(trained / "nfs" / f"nf{seed}.yaml", _nf_config(seed))
    _write(trained / "cmp.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "compare": {"efn_checkpoint": "run/checkpoint.efnckpt", "nf_dir": "nfs"},
        "eval": {"mc_samples": 500},
    })
    assert cli.main(["compare", "--config", "cmp.yaml", "--out", "cmpout"]) == 0
    out = trained / "cmpout"
    rows = list(csv.DictReader(open(out / "compare_metrics.csv")))
    assert [r["method"] for r in rows] == ["efn", "efn", "nf", "nf"]
    assert all(float(r["kl"]) > -0.5 for r in rows)
    assert (trained / "nf_runs" / "0" / "checkpoint.efnckpt").is_file()
    assert (out / "efn_relative_log.jsonl").is_file()

    _write(trained / "dec.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "decide": {
            "efn_log": "cmpout/efn_relative_log.jsonl",
            "nf_logs": ["cmpout/nf_relative_log_000.jsonl", "cmpout/nf_relative_log_001.jsonl"],
        },
    })
    assert cli.main(["decide", "--config", "dec.yaml", "--out", "dec"]) == 0
    table = list(csv.DictReader(open(trained / "dec" / "decision_boundary.csv")))
    assert len(table) == 5
    for row in table:
        assert row["n_star"] == "undefined" or int(row["n_star"]) >= 1


def test_compare_with_empty_nf_dir_exits_2(trained):
    (trained / "empty").mkdir()
    _write(trained / "cmp.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "compare": {"efn_checkpoint": "run/checkpoint.efnckpt", "nf_dir": "empty"},
    })
    assert cli.main(["compare", "--config", "cmp.yaml"]) == 2


def test_compare_rejects_nf_on_another_family(trained):
    (trained / "nfs").mkdir()
    other = _nf_config(0)
    other["family"] = {"name": "dirichlet", "D": 4}
    _write(trained / "nfs" / "nf0.yaml", other)
    _write(trained / "cmp.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "compare": {"efn_checkpoint": "run/checkpoint.efnckpt", "nf_dir": "nfs"},
    })
    assert cli.main(["compare", "--config", "cmp.yaml"]) == 2


def test_decide_with_malformed_log_line_exits_2(trained, capsys):
    log = trained / "run" / "train_log.jsonl"
    bad = trained / "bad.jsonl"
    bad.write_text(log.read_text() + "{not json\n")
    _write(trained / "dec.yaml", {
        "family": {"name": "dirichlet", "D": 3},
        "decide": {"efn_log": str(log), "nf_logs": [str(bad)]},
    })
    assert cli.main(["decide", "--config", "dec.yaml"]) == 2
    assert ":5:" in capsys.readouterr().err


def test_simulate_writes_the_default_corpus(workdir):
    _write(workdir / "sim.yaml", {"family": {"name": "lgp_posterior"}, "seed": 3})
    assert cli.main(["simulate", "--config", "sim.yaml", "--out", "sim"]) == 0
    files = sorted((workdir / "sim").glob("*.json"))
    assert len(files) == 50
    ds = dataset_load(files[7])
    assert ds.counts.shape == (20, 20)
    assert ds.meta["index"] == 7
    assert ds.meta["seed"] == 3
    assert cli.main(["simulate", "--config", "sim.yaml", "--out", "sim2"]) == 0
    assert files[7].read_bytes() == (workdir / "sim2" / files[7].name).read_bytes()
