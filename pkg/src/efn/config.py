"""Strict YAML run configuration shared by every CLI command.

Every block is a dataclass; unknown keys anywhere raise :class:`ConfigError`.
``RunConfig.to_dict`` materializes all defaults, so the copy written into a
run directory reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from efn.data import GPPriorSpec
from efn.families import FAMILIES, family_from_spec
from efn.flows import LAYER_KINDS, DensityNetwork, default_flow_kinds
from efn.training import TrainConfig

MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


def parse_block(cls, data, where):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class FlowBlock:
    kind: str = "planar"
    n_layers: int = None
    affine: bool = True
    layers: list = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"flow kind must be one of {sorted(LAYER_KINDS)}")
        if self.layers is not None:
            bad = [k for k in self.layers if k not in LAYER_KINDS]
            if bad:
                raise ValueError(f"unknown layer kinds {bad}")

    def kinds(self, dim):
        if self.layers is not None:
            return list(self.layers)
        return default_flow_kinds(dim, kind=self.kind, n_layers=self.n_layers, affine=self.affine)


@dataclass
class ParamNetBlock:
    depth: int = None
    scaler: bool = True
    scaler_draws: int = 10_000
    output_gain: float = 1.0


@dataclass
class EvalBlock:
    n_etas: int = 20
    mc_samples: int = 10_000
    r2: bool = True
    kl: bool = True
    elbo: bool = True
    mmd: bool = False
    mmd_samples: int = 100
    mmd_permutations: int = 500
    held_out_datasets: list = None


@dataclass
class PathsBlock:
    out_dir: str = "runs/efn"
    log: str = "train_log.jsonl"
    checkpoint: str = "checkpoint.efnckpt"


@dataclass
class NFBlock:
    """Which single distribution an nf-mode run fits."""

    eta: list = None
    dataset: str = None
    eta_seed: int = 0


@dataclass
class LookupBlock:
    checkpoint: str = None
    input: str = None
    n_samples: int = 1000


@dataclass
class CompareBlock:
    efn_checkpoint: str = None
    nf_dir: str = None
    normalize: bool = True


@dataclass
class DecideBlock:
    efn_log: str = None
    nf_logs: list = None
    targets: list = None
    n_targets: int = 5
    smooth: bool = True


@dataclass
class SimulateBlock:
    n_datasets: int = 50
    n_trials: int = 20
    gp: dict = None
    prefix: str = "dataset"


@dataclass
class RunConfig:
    family: dict
    seed: int = 0
    flow: FlowBlock = field(default_factory=FlowBlock)
    paramnet: ParamNetBlock = field(default_factory=ParamNetBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalBlock = field(default_factory=EvalBlock)
    paths: PathsBlock = field(default_factory=PathsBlock)
    nf: NFBlock = field(default_factory=NFBlock)
    lookup: LookupBlock = field(default_factory=LookupBlock)
    compare: CompareBlock = field(default_factory=CompareBlock)
    decide: DecideBlock = field(default_factory=DecideBlock)
    simulate: SimulateBlock = field(default_factory=SimulateBlock)

    def build_family(self):
        try:
            return family_from_spec(self.family)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"family: {exc}") from None

    def build_net(self, family):
        return DensityNetwork.build(self.flow.kinds(family.latent_dim), family.support_transform())

    @property
    def out_dir(self):
        return Path(self.paths.out_dir)

    @property
    def log_path(self):
        return self.out_dir / self.paths.log

    @property
    def checkpoint_path(self):
        return self.out_dir / self.paths.checkpoint

    def to_dict(self):
        d = {"family": _materialize_family(self.family), "seed": self.seed}
        for f in fields(self):
            if f.name in d:
                continue
            d[f.name] = dataclasses.asdict(getattr(self, f.name))
        # the run seed lives at the top level only
        del d["train"]["seed"]
        return d

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_BLOCKS = {
    "flow": FlowBlock,
    "paramnet": ParamNetBlock,
    "train": TrainConfig,
    "eval": EvalBlock,
    "paths": PathsBlock,
    "nf": NFBlock,
    "lookup": LookupBlock,
    "compare": CompareBlock,
    "decide": DecideBlock,
    "simulate": SimulateBlock,
}


def _materialize_family(block):
    """The family spec with every constructor default filled in."""
    try:
        return family_from_spec(block).spec()
    except (TypeError, ValueError):
        return dict(block)


def from_dict(data, seed=None, out_dir=None):
    """Validate a parsed config mapping.

    Args:
        seed: overrides the ``seed`` key (and the train seed) when given.
        out_dir: overrides ``paths.out_dir`` when given.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"family", "seed", *_BLOCKS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(allowed)}")
    fam = data.get("family")
    if not isinstance(fam, dict) or "name" not in fam:
        raise ConfigError("family: a 'name' is required")
    if fam["name"] not in FAMILIES:
        raise ConfigError(f"family: unknown name {fam['name']!r}; expected one of {sorted(FAMILIES)}")
    fam = dict(fam)
    if fam["name"] == "lgp_posterior" and fam.get("gp") is not None:
        parse_block(GPPriorSpec, fam["gp"], "family.gp")
    run_seed = data.get("seed", 0) if seed is None else seed
    if not isinstance(run_seed, int) or isinstance(run_seed, bool) or not 0 <= run_seed <= MAX_SEED:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {run_seed!r}")
    blocks = {}
    for name, cls in _BLOCKS.items():
        raw = data.get(name)
        if name == "train":
            raw = dict(raw or {})
            if "seed" in raw:
                raise ConfigError("train: set the seed at the top level, not inside train")
            raw["seed"] = run_seed
            if raw.get("mode") == "nf":
                raw.setdefault("K", 1)
        blocks[name] = parse_block(cls, raw, name)
    if out_dir is not None:
        blocks["paths"].out_dir = str(out_dir)
    cfg = RunConfig(family=fam, seed=run_seed, **blocks)
    cfg.build_family()
    return cfg


def load(path, seed=None, out_dir=None):
    """Read and validate a YAML run config."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return from_dict(data, seed=seed, out_dir=out_dir)
