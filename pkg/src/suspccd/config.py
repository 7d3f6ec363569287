"""Run configuration: one YAML document covering every stage.

Defaults reproduce the paper-replication setup; the desk-scale schedule used
by the acceptance suite only shrinks epoch counts and deployment length.
Unknown keys are rejected so typos fail loudly. All randomness derives from
`master_seed` through named streams (zlib.crc32 of the stream name mixed
into a SeedSequence), so a rerun with the same master seed is bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .road import DEFAULT_CALIBRATION
from .vehicle import DesignBounds, SuspensionDesign, VehicleParams


@dataclass
class VehicleSection:
    m_s: float = 1500.0
    i_alpha: float = 2500.0
    i_beta: float = 500.0
    m_u: list = field(default_factory=lambda: [50.0, 50.0, 50.0, 50.0])
    k_t: list = field(default_factory=lambda: [2e5, 2e5, 2e5, 2e5])
    c_t: float = 150.0
    l_f: float = 1.35
    l_r: float = 1.35
    l: float = 0.75
    h_cg: float = 0.55
    saturation_enabled: bool = False
    saturation_limit: float = 5000.0
    obs_noise_std: float = 0.0

    def params(self) -> VehicleParams:
        return VehicleParams(m_s=self.m_s, i_alpha=self.i_alpha,
                             i_beta=self.i_beta, m_u=tuple(self.m_u),
                             k_t=tuple(self.k_t), c_t=self.c_t, l_f=self.l_f,
                             l_r=self.l_r, l=self.l, h_cg=self.h_cg)

    def saturation(self) -> float | None:
        return self.saturation_limit if self.saturation_enabled else None


@dataclass
class DesignSection:
    k_s_initial: float = 27692.0
    c_s_initial: float = 1906.5
    k_s_min: float = 5_000.0
    k_s_max: float = 60_000.0
    c_s_min: float = 500.0
    c_s_max: float = 6_000.0

    def initial(self) -> SuspensionDesign:
        return SuspensionDesign(k_s=self.k_s_initial, c_s=self.c_s_initial)

    def bounds(self) -> DesignBounds:
        return DesignBounds(k_s_min=self.k_s_min, k_s_max=self.k_s_max,
                            c_s_min=self.c_s_min, c_s_max=self.c_s_max)


@dataclass
class RoadSection:
    s0: float = 1e-4
    n0: float = 0.1
    omega: float = 2.5
    epsilon: float = 0.005
    calibration: float = DEFAULT_CALIBRATION
    extent: float = 2000.0
    resolution: float = 1.0
    hill_amplitude: float = 0.05
    hill_x0: float = 1000.0
    hill_length: float = 400.0
    add_hill: bool = True


@dataclass
class ProfileSection:
    duration: float = 1200.0
    dt: float = 0.01
    start_x: float = 1000.0
    start_y: float = 800.0
    heading: float = 0.0


@dataclass
class RewardSection:
    w1: float = 10.0
    w2: float = 1.0
    w3: float = 0.5
    c1: float = 1.0 / 0.00004
    c2: float = 1.0 / 0.00003
    c3: float = 0.0001
    lambda_u: float = 1.0


@dataclass
class PpoSection:
    gamma: float = 0.99
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    c_v: float = 0.5
    rollout_len: int = 1000
    update_epochs: int = 10
    minibatch: int = 256
    patience: int = 100
    lr_policy: float = 3e-4
    lr_value: float = 3e-4
    lr_design: float = 1e-3
    dynamics_grad_weight: float = 1.0
    dynamics_tape_segment: int = 50
    road_noise_std_z: float = 0.001
    road_noise_std_zdot: float = 0.1
    train_speed: float = 10.0
    first_ccd_epochs: int = 2000
    second_ccd_epochs: int = 2000

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class WarmstartSection:
    budget: int = 120
    seed_evaluations: int = 10
    eval_steps: int = 1000
    gain_bounds: list = field(default_factory=lambda: [
        [0.0, 10_000.0],   # K0: body vertical rate
        [0.0, 6_000.0],    # K1: pitch rate
        [0.0, 2_000.0],    # K2: roll rate
        [0.0, 20_000.0],   # K3: wheel position
        [-4_000.0, 4_000.0],  # K4: suspension deflection
    ])
    skip_bo: bool = False
    paper_gains: list = field(default_factory=lambda: [
        5000.0, 3000.0, 801.3, 10000.0, -1717.9])
    pretrain_episodes: int = 8
    pretrain_steps: int = 2000
    pretrain_epochs: int = 60


@dataclass
class DiscrepancySection:
    hidden: list = field(default_factory=lambda: [64, 64])
    taus: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    epochs: int = 40
    minibatch: int = 256
    lr: float = 1e-3
    validation_fraction: float = 0.2
    error_reset_interval: int = 0  # 0: self-loop without resets


@dataclass
class PipelineSection:
    drivers: list = field(default_factory=lambda: ["mild", "aggressive"])
    deployment_steps: int = 0      # 0: the full driver profile
    finetune_epochs: int = 50
    evaluation_steps: int = 0      # 0: the full driver profile


@dataclass
class RunConfig:
    master_seed: int = 2024
    vehicle: VehicleSection = field(default_factory=VehicleSection)
    design: DesignSection = field(default_factory=DesignSection)
    road: RoadSection = field(default_factory=RoadSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    reward: RewardSection = field(default_factory=RewardSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    warmstart: WarmstartSection = field(default_factory=WarmstartSection)
    discrepancy: DiscrepancySection = field(default_factory=DiscrepancySection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def seed_stream(self, name: str) -> np.random.Generator:
        """Named RNG stream derived from the master seed."""
        return np.random.default_rng(
            np.random.SeedSequence([self.master_seed, zlib.crc32(name.encode())]))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config keys under {where or 'top level'}: "
                         f"{sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get(name)
        if sub is not None and is_dataclass(sub):
            if not isinstance(value, dict):
                raise ValueError(f"config section {where}{name} must be a mapping")
            kwargs[name] = _build(sub, value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "vehicle": VehicleSection,
    "design": DesignSection,
    "road": RoadSection,
    "profile": ProfileSection,
    "reward": RewardSection,
    "ppo": PpoSection,
    "warmstart": WarmstartSection,
    "discrepancy": DiscrepancySection,
    "pipeline": PipelineSection,
}


def load_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    return _build(RunConfig, data, "")


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings on top of a loaded config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node:
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return _build(RunConfig, data, "")


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
