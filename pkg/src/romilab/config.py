"""Run configuration: nested dataclasses, JSON round-trip, seed streams.

A RunConfig fully determines one pipeline run (all stages for one seed list).
Configs load from JSON, accept dotted-key overrides ("learner.lr=0.1"), and
serialize back so every run directory carries its resolved config. Seeds are
derived per stage from a root seed through numpy SeedSequence spawning, so
that e.g. changing the number of eval episodes never shifts the data stream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class EnvConfig:
    layout: str = "umaze"
    kind: str = "grid"              # grid | continuous
    reward_mode: str = "sparse"     # sparse | dense
    episode_limit: int = 0          # 0 -> layout default
    goal_terminal: bool = False


@dataclass
class DataConfig:
    n_transitions: int = 50_000
    holdout: int = 2_000


@dataclass
class ModelConfig:
    model: str = "ensemble"         # tabular | ensemble
    eps_lap: float = 0.0            # tabular smoothing
    n_members: int = 7
    n_elites: int = 5
    hidden: tuple = (64, 64)
    activation: str = "swish"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 40
    patience: int = 5
    max_train: int = 10_000         # 0 -> use everything
    discrete_states: bool = True    # round grid predictions to cells


@dataclass
class RolloutConfig:
    direction: str = "reverse"      # reverse | forward | none
    policy: str = "uniform"         # uniform | empirical | cvae | rbc
    horizon: int = 2
    n_rollouts: int = 0             # 0 -> one per anchor transition
    start_mode: str = "uniform"     # uniform | return_weighted


@dataclass
class TrainConfig:
    algo: str = "bcq_discrete"      # bcq_discrete | cql_discrete
    gamma: float = 0.95
    lr: float = 0.25
    batch_size: int = 64
    steps: int = 120_000
    bcq_threshold: float = 0.15
    cql_alpha: float = 1.0
    tile_size: float = 0.25
    q_init: float = 0.0
    eta: float = 0.7


@dataclass
class EvalConfig:
    n_episodes: int = 50
    n_reference_episodes: int = 100


@dataclass
class RunConfig:
    label: str = "run"
    seeds: tuple = (0,)
    out_dir: str = ""               # "" -> ROMI_LAB_OUT or ./runs
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    learner: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, dict(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


_SECTIONS = {"env": EnvConfig, "data": DataConfig, "model": ModelConfig,
             "rollout": RolloutConfig, "learner": TrainConfig, "eval": EvalConfig}


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, proto):
    """Coerce a parsed value to the type of the dataclass default."""
    if isinstance(proto, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(proto, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(proto, float):
        return float(value)
    if isinstance(proto, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(type(proto[0])(v) if proto else v for v in value) \
            if proto else tuple(value)
    return value


def _build(cls, d: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v = d.pop(f.name)
        if f.name in _SECTIONS and isinstance(v, dict):
            kwargs[f.name] = _build(_SECTIONS[f.name], dict(v))
        else:
            default = (f.default if f.default is not dataclasses.MISSING
                       else f.default_factory())
            kwargs[f.name] = _coerce(v, default)
    if d:
        raise KeyError(f"unknown config keys for {cls.__name__}: {sorted(d)}")
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply 'section.key=value' (or 'key=value') strings to a copy of cfg."""
    d = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config section {p!r} in {item!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


STAGES = ("data", "model", "rollout", "learner", "eval")


def seed_streams(root_seed: int, stages=STAGES) -> dict:
    """Independent named integer seeds spawned from one root seed."""
    import numpy as np

    seq = np.random.SeedSequence(int(root_seed))
    children = seq.spawn(len(stages))
    return {name: int(child.generate_state(1)[0])
            for name, child in zip(stages, children)}


def content_hash(path) -> str:
    """Git-style blob sha1 of a file's bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()
