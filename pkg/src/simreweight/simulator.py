"""Domain-randomized synthetic cellular traffic.

Each scenario is a grid of cells observed over ``horizon_T`` steps for three
tasks (Call, SMS, Net). Net carries diurnal and weekly sinusoids modulated by
Gaussian spatial hotspots and multiplicative burst events; Call and SMS follow
their own daily cycle plus a lag-1 copy of Net.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, InvalidRange

TASKS = ("call", "sms", "net")
CALL, SMS, NET = 0, 1, 2
BURST_WIDTH = 3

_PER_TASK = ("base_level", "diurnal_amp", "weekly_amp", "phase_shift", "noise_sigma")
_INT_FIELDS = ("grid_rows", "grid_cols", "horizon_T", "diurnal_period", "n_hotspots")


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a seed and a stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class ScenarioConfig:
    grid_rows: int = 8
    grid_cols: int = 8
    horizon_T: int = 24 * 14
    base_level: list = field(default_factory=lambda: [4.0, 2.5, 10.0])
    diurnal_amp: list = field(default_factory=lambda: [2.0, 1.2, 5.0])
    weekly_amp: list = field(default_factory=lambda: [0.5, 0.3, 1.2])
    diurnal_period: int = 24
    phase_shift: list = field(default_factory=lambda: [1.0, -1.0, 0.0])
    n_hotspots: int = 2
    hotspot_centers: list = field(default_factory=lambda: [[2.0, 3.0], [5.0, 5.0]])
    hotspot_sigma: float = 1.8
    coupling_call_net: float = 0.35
    coupling_sms_net: float = 0.2
    noise_sigma: list = field(default_factory=lambda: [0.3, 0.25, 0.6])
    burst_rate: float = 20.0
    burst_magnitude: float = 2.0
    seed: int = 2024

    def validate(self) -> "ScenarioConfig":
        for name in ("grid_rows", "grid_cols", "horizon_T"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.diurnal_period < 2:
            raise ConfigError("diurnal_period must be >= 2")
        for name in _PER_TASK:
            vals = getattr(self, name)
            if len(vals) != len(TASKS) or not np.all(np.isfinite(vals)):
                raise ConfigError(f"{name} needs {len(TASKS)} finite values")
        for name in ("base_level", "diurnal_amp", "weekly_amp", "noise_sigma"):
            if min(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.n_hotspots < 0 or len(self.hotspot_centers) != self.n_hotspots:
            raise ConfigError("hotspot_centers must list n_hotspots centers")
        for r, c in self.hotspot_centers:
            if not (0 <= r <= self.grid_rows - 1 and 0 <= c <= self.grid_cols - 1):
                raise ConfigError(f"hotspot center {(r, c)} outside grid")
        if not np.isfinite(self.hotspot_sigma) or self.hotspot_sigma <= 0:
            raise ConfigError("hotspot_sigma must be positive and finite")
        for name in ("coupling_call_net", "coupling_sms_net"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.burst_rate < 0 or self.burst_magnitude < 1:
            raise ConfigError("burst_rate >= 0 and burst_magnitude >= 1 required")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d).validate()


def default_real_reference() -> ScenarioConfig:
    """The fixed 'real' environment; its bursts are absent from the sim ranges."""
    return ScenarioConfig()


def default_ranges() -> dict:
    """Randomization ranges for the simulated pool.

    Values are either fixed scalars or ``(low, high)`` intervals; per-task
    fields hold one entry per task. ``hotspot_centers`` is not listed: centers
    are drawn uniformly inside the grid once ``n_hotspots`` is known.
    """
    return {
        "grid_rows": 8,
        "grid_cols": 8,
        "horizon_T": 24 * 14,
        "base_level": [(2.0, 6.0), (1.0, 4.0), (5.0, 15.0)],
        "diurnal_amp": [(0.5, 3.0), (0.3, 2.0), (2.0, 8.0)],
        "weekly_amp": [(0.0, 1.0), (0.0, 0.5), (0.0, 2.0)],
        "diurnal_period": 24,
        "phase_shift": [(-3.0, 3.0), (-3.0, 3.0), (-3.0, 3.0)],
        "n_hotspots": (1, 3),
        "hotspot_sigma": (1.0, 2.5),
        "coupling_call_net": (0.1, 0.6),
        "coupling_sms_net": (0.05, 0.4),
        "noise_sigma": [(0.1, 0.5), (0.1, 0.4), (0.3, 1.0)],
        "burst_rate": 0.0,
        "burst_magnitude": 1.0,
    }


def _check_interval(name: str, spec: Any):
    if isinstance(spec, (tuple, list)) and len(spec) == 2 and not isinstance(spec[0], (tuple, list)):
        lo, hi = spec
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise InvalidRange(f"{name}: low {lo} > high {hi}")
        return True
    return False


def _draw(rng: np.random.Generator, name: str, spec: Any, integer: bool):
    if _check_interval(name, spec):
        lo, hi = spec
        if integer:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return int(spec) if integer else float(spec)


def sample_scenario(ranges: dict, seed: int) -> ScenarioConfig:
    """Draw one scenario; every field is uniform on its interval."""
    rng = rng_stream(seed, 0)
    defaults = ScenarioConfig()
    values: dict = {}
    for f in dataclasses.fields(ScenarioConfig):
        name = f.name
        if name in ("hotspot_centers", "seed"):
            continue
        spec = ranges.get(name, getattr(defaults, name))
        if name in _PER_TASK:
            if not isinstance(spec, (list, tuple)) or len(spec) != len(TASKS):
                raise InvalidRange(f"{name} needs one entry per task")
            values[name] = [_draw(rng, f"{name}[{i}]", s, False) for i, s in enumerate(spec)]
        else:
            values[name] = _draw(rng, name, spec, name in _INT_FIELDS)
    if "hotspot_centers" in ranges:
        centers = [list(map(float, c)) for c in ranges["hotspot_centers"]]
    else:
        centers = [[float(rng.uniform(0, values["grid_rows"] - 1)),
                    float(rng.uniform(0, values["grid_cols"] - 1))]
                   for _ in range(values["n_hotspots"])]
    values["hotspot_centers"] = centers
    drawn_seed = int(rng.integers(0, 2**63 - 1))
    values["seed"] = int(ranges["seed"]) if "seed" in ranges else drawn_seed
    return ScenarioConfig(**values).validate()


def spatial_profile(cfg: ScenarioConfig) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(cfg.grid_rows), np.arange(cfg.grid_cols), indexing="ij")
    prof = np.ones((cfg.grid_rows, cfg.grid_cols))
    for r0, c0 in cfg.hotspot_centers:
        d2 = (rr - r0) ** 2 + (cc - c0) ** 2
        prof += np.exp(-d2 / (2 * cfg.hotspot_sigma**2))
    return prof


def burst_profile(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-step multiplier: Poisson-many 3-step windows scaled by burst_magnitude."""
    mult = np.ones(cfg.horizon_T)
    n_events = rng.poisson(cfg.burst_rate * cfg.horizon_T / 1000.0) if cfg.burst_rate > 0 else 0
    for start in rng.integers(0, cfg.horizon_T, size=n_events):
        mult[start:start + BURST_WIDTH] = cfg.burst_magnitude
    return mult


def _cycle(cfg: ScenarioConfig, task: int, t: np.ndarray) -> np.ndarray:
    p = cfg.diurnal_period
    return (cfg.base_level[task]
            + cfg.diurnal_amp[task] * np.sin(2 * np.pi * t / p + cfg.phase_shift[task])
            + cfg.weekly_amp[task] * np.sin(2 * np.pi * t / (7 * p)))


@dataclass
class TrafficCube:
    values: np.ndarray  # [rows, cols, T, 3]
    scenario: ScenarioConfig

    def __post_init__(self):
        s = self.scenario
        expected = (s.grid_rows, s.grid_cols, s.horizon_T, len(TASKS))
        if self.values.shape != expected:
            raise ConfigError(f"cube shape {self.values.shape} != {expected}")


def generate_cube(cfg: ScenarioConfig) -> TrafficCube:
    cfg.validate()
    rng = rng_stream(cfg.seed, 1)
    t = np.arange(cfg.horizon_T, dtype=np.float64)
    shape = (cfg.grid_rows, cfg.grid_cols, cfg.horizon_T)
    spatial = spatial_profile(cfg)[:, :, None]
    burst = burst_profile(cfg, rng)[None, None, :]

    noise = rng.standard_normal((len(TASKS),) + shape)
    net = np.clip(_cycle(cfg, NET, t), 0.0, None)[None, None, :] * spatial * burst
    net = np.clip(net + cfg.noise_sigma[NET] * noise[NET], 0.0, None)
    lagged = np.concatenate([net[:, :, :1], net[:, :, :-1]], axis=2)

    out = np.empty(shape + (len(TASKS),))
    out[..., NET] = net
    for task, coupling in ((CALL, cfg.coupling_call_net), (SMS, cfg.coupling_sms_net)):
        own = np.clip(_cycle(cfg, task, t), 0.0, None)[None, None, :]
        series = coupling * lagged + own + cfg.noise_sigma[task] * noise[task]
        out[..., task] = np.clip(series, 0.0, None)
    return TrafficCube(out, cfg)


def make_sim_pool(ranges: dict, n_scenarios: int, seed: int) -> list:
    return [generate_cube(sample_scenario(ranges, int(rng_stream(seed, 2, i).integers(0, 2**63 - 1))))
            for i in range(n_scenarios)]


def make_real_env(reference: ScenarioConfig | None = None) -> TrafficCube:
    return generate_cube(reference or default_real_reference())
