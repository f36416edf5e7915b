"""Flat key = value experiment configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    """Bad key, bad type, or a value outside its documented range."""


@dataclass
class ExperimentConfig:
    # data: a bundle directory, or the synthetic block-model testbed
    dataset_dir: str | None = None
    dataset_name: str = "sbm"
    sbm_blocks: int = 3
    sbm_nodes_per_block: int = 100
    sbm_p_in: float = 0.3
    sbm_p_out: float = 0.02
    sbm_feature_dim: int = 8
    sbm_center_separation: float = 6.0
    sbm_feature_noise: float = 1.0
    # experiment shape
    ratio: float = 0.01
    num_sources: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    noise_rates: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 0.9])
    few_shot: int = 3
    task: str = "node"
    workers: int = 1
    resume: bool = False
    # encoder
    hidden_dim: int = 128
    embed_dim: int = 64
    # pseudo-label learning
    pretrain_epochs: int = 80
    lr_encoder: float = 0.01
    lr_bank: float = 0.05
    tau: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 100
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    refine_steps: int = 5
    # condensation
    condense_steps: int = 300
    condense_lr: float = 0.1
    # backbone reconstruction
    backbone_epochs: int = 300
    backbone_lr: float = 0.1
    # prediction heads
    head_epochs: int = 200
    head_lr: float = 0.5
    # supervised class-mean baseline (noise sweeps)
    baseline_per_class: int = 10
    baseline_steps: int = 300
    baseline_lr: float = 0.1
    baseline_encoder_epochs: int = 200
    baseline_encoder_lr: float = 0.2
    # theorem validation
    theory_sigma: float = 1.0
    theory_d: int = 2
    theory_k: int = 4
    theory_separation: float = 6.0
    theory_delta: float = 0.05
    theory_beta: float = 4.0
    theory_trials: int = 500
    theory_base_seed: int = 0
    theory_noise_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio {self.ratio} must lie in (0, 1]")
        if self.num_sources < 1:
            raise ConfigError("num_sources must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.noise_rates:
            raise ConfigError("noise_rates must be non-empty")
        if any(not 0.0 <= r <= 1.0 for r in self.noise_rates):
            raise ConfigError("noise rates must lie in [0, 1]")
        if self.task not in ("node", "link"):
            raise ConfigError(f"task must be 'node' or 'link', got {self.task!r}")
        if self.few_shot < 1:
            raise ConfigError("few_shot must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def k_from_ratio(ratio: float, num_nodes: int) -> int:
    """Condensed size K = max(1, half-up round of ratio * N)."""
    k = max(1, int(ratio * num_nodes + 0.5))
    if k > num_nodes:
        raise ConfigError(f"ratio {ratio} asks for K={k} > N={num_nodes}")
    return k


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value):
    if key in ("seeds", "noise_rates"):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key} must be a non-empty list")
        if key == "seeds":
            if any(not isinstance(v, int) or isinstance(v, bool) for v in value):
                raise ConfigError("seeds must all be integers")
            return [int(v) for v in value]
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError("noise_rates must all be numbers")
        return [float(v) for v in value]
    want = _FIELD_TYPES[key].type
    if want.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if want == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if want == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if want == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    raise ConfigError(f"unsupported config field type for {key}")


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {key: _coerce(key, value) for key, value in data.items()}
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse a flat key = value (TOML) file; unknown keys are hard errors."""
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: config must be flat key = value; found table {key!r}")
    return config_from_dict(data)


def config_snapshot(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
