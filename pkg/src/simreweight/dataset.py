"""Windowing, normalization, splitting and persistence of traffic cubes.

A bundle holds three splits: ``sim`` (simulated, reweighted during training),
``val`` (real, drives the outer objective) and ``test`` (real, held out). Real
windows are split by time: the first half of the real horizon feeds ``val``,
the second half ``test``, so the two never share a time step.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, IoError, WindowTooLong
from .simulator import TASKS, TrafficCube

CSV_COLUMNS = ["sample_id", "scenario_id", "source", "task", "role", "step",
               "cell_row", "cell_col", "value"]
SPLITS = ("sim", "val", "test")
STD_FLOOR = 1e-6
FORMAT_VERSION = 1


@dataclass
class DatasetConfig:
    L_in: int = 24
    L_token: int = 12
    L_out: int = 6
    stride: int = 6
    patch_rows: int = 3
    patch_cols: int = 3
    n_scenarios: int = 30
    seed: int = 0

    def validate(self) -> "DatasetConfig":
        for name in ("L_in", "L_token", "L_out", "stride", "patch_rows", "patch_cols", "n_scenarios"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"dataset.{name} must be positive")
        if self.L_token > self.L_in:
            raise ConfigError("dataset.L_token must not exceed L_in")
        return self


@dataclass
class WindowSample:
    """One supervised instance covering all three tasks.

    x: [3, L_in, patch_cells] input values; y: [3, L_out] targets at the patch
    center; hour/dow: temporal markers for the L_in input steps followed by
    the L_out forecast steps.
    """

    x: np.ndarray
    y: np.ndarray
    hour: np.ndarray
    dow: np.ndarray
    source: str
    scenario_id: int
    sample_id: int

    def token(self, L_token: int) -> np.ndarray:
        """Decoder start-token window: the last L_token input steps."""
        return self.x[:, self.x.shape[1] - L_token:, :]


def center_patch_origin(rows: int, cols: int, patch_rows: int, patch_cols: int) -> tuple:
    if patch_rows > rows or patch_cols > cols:
        raise ConfigError(f"patch {patch_rows}x{patch_cols} larger than grid {rows}x{cols}")
    return (rows - patch_rows) // 2, (cols - patch_cols) // 2


def window_count(T: int, L_in: int, L_out: int, stride: int) -> int:
    if L_in + L_out > T:
        raise WindowTooLong(f"L_in + L_out = {L_in + L_out} exceeds horizon {T}")
    return (T - L_in - L_out) // stride + 1


def window(cube: TrafficCube, L_in: int, L_token: int, L_out: int, stride: int,
           patch_rows: int = 3, patch_cols: int = 3, source: str = "sim",
           scenario_id: int = 0, first_id: int = 0, t_begin: int = 0,
           t_end: int | None = None) -> list:
    """Sliding windows over time on the fixed center patch of the grid.

    ``t_begin``/``t_end`` restrict the time range windows may touch.
    """
    if L_token > L_in:
        raise ConfigError("L_token must not exceed L_in")
    vals = cube.values
    t_end = vals.shape[2] if t_end is None else t_end
    n = window_count(t_end - t_begin, L_in, L_out, stride)
    r0, c0 = center_patch_origin(vals.shape[0], vals.shape[1], patch_rows, patch_cols)
    patch = vals[r0:r0 + patch_rows, c0:c0 + patch_cols]  # [pr, pc, T, 3]
    series = patch.reshape(patch_rows * patch_cols, vals.shape[2], len(TASKS)).transpose(2, 1, 0)
    center = (patch_rows // 2) * patch_cols + patch_cols // 2
    period = cube.scenario.diurnal_period
    out = []
    for i in range(n):
        s = t_begin + i * stride
        steps = np.arange(s, s + L_in + L_out)
        out.append(WindowSample(
            x=series[:, s:s + L_in, :].copy(),
            y=series[:, s + L_in:s + L_in + L_out, center].copy(),
            hour=(steps % period).astype(np.int64),
            dow=((steps // period) % 7).astype(np.int64),
            source=source, scenario_id=scenario_id, sample_id=first_id + i,
        ))
    return out


@dataclass
class DatasetBundle:
    sim: list
    val: list
    test: list
    config: DatasetConfig = field(default_factory=DatasetConfig)
    mean: np.ndarray | None = None  # [3, patch_cells]
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sim:
            raise ConfigError("bundle needs a nonempty sim split")
        if any(s.source != "sim" for s in self.sim):
            raise ConfigError("real sample found in the sim split")
        if any(s.source != "real" for s in self.val + self.test):
            raise ConfigError("val/test must come from the real environment")

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    @property
    def center_index(self) -> int:
        c = self.config
        return (c.patch_rows // 2) * c.patch_cols + c.patch_cols // 2

    def split(self, name: str) -> list:
        return getattr(self, name)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        """Map center-cell targets/predictions [..., 3, L] back to traffic units."""
        if not self.normalized:
            return values
        ci = self.center_index
        return values * self.std[:, ci, None] + self.mean[:, ci, None]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            for s in self.split(name):
                for arr in (s.x, s.y, s.hour, s.dow):
                    h.update(np.ascontiguousarray(arr).tobytes())
                h.update(f"{s.source}:{s.scenario_id}:{s.sample_id}".encode())
        if self.normalized:
            h.update(self.mean.tobytes())
            h.update(self.std.tobytes())
        return h.hexdigest()


def build_bundle(sim_cubes: list, real_cube: TrafficCube, cfg: DatasetConfig,
                 meta: dict | None = None) -> DatasetBundle:
    """Window every sim cube into D_s and split the real cube by time into D_v / test."""
    cfg.validate()
    kw = dict(L_in=cfg.L_in, L_token=cfg.L_token, L_out=cfg.L_out, stride=cfg.stride,
              patch_rows=cfg.patch_rows, patch_cols=cfg.patch_cols)
    sim = []
    for sid, cube in enumerate(sim_cubes):
        sim.extend(window(cube, source="sim", scenario_id=sid, first_id=len(sim), **kw))
    T = real_cube.values.shape[2]
    half = T // 2
    val = window(real_cube, source="real", scenario_id=-1, first_id=0, t_end=half, **kw)
    test = window(real_cube, source="real", scenario_id=-1, first_id=len(val), t_begin=half, **kw)
    if not val or not test:
        raise WindowTooLong("real horizon too short for a val/test split")
    return DatasetBundle(sim, val, test, cfg, meta=dict(meta or {}))


def normalize(bundle: DatasetBundle) -> DatasetBundle:
    """Z-score every cell of every task with statistics of the sim split only."""
    if bundle.normalized:
        return bundle
    xs = np.stack([s.x for s in bundle.sim])  # [N, 3, L_in, P]
    mean = xs.mean(axis=(0, 2))
    std = np.maximum(xs.std(axis=(0, 2)), STD_FLOOR)
    ci = bundle.center_index

    def apply(samples):
        return [replace(s, x=(s.x - mean[:, None, :]) / std[:, None, :],
                        y=(s.y - mean[:, ci, None]) / std[:, ci, None]) for s in samples]

    return DatasetBundle(apply(bundle.sim), apply(bundle.val), apply(bundle.test),
                         bundle.config, mean, std, dict(bundle.meta))


# ---------------------------------------------------------------- persistence


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_frame(samples: list, cfg: DatasetConfig) -> pd.DataFrame:
    if not samples:
        return pd.DataFrame(columns=CSV_COLUMNS)
    n = len(samples)
    nt, L_in, P = samples[0].x.shape
    L_out = samples[0].y.shape[1]
    L_all = L_in + L_out
    pr, pc = cfg.patch_rows, cfg.patch_cols
    center = (pr // 2, pc // 2)
    ids = np.array([s.sample_id for s in samples])
    scen = np.array([s.scenario_id for s in samples])
    src = np.array([s.source for s in samples], dtype=object)
    task_names = np.array(TASKS, dtype=object)

    # inputs: [n, task, step, cell]
    n_in = nt * L_in * P
    i_n, i_t, i_s, i_c = np.unravel_index(np.arange(n * n_in), (n, nt, L_in, P))
    inputs = dict(sample_id=ids[i_n], scenario_id=scen[i_n], source=src[i_n], task=task_names[i_t],
                  role="input", step=i_s, cell_row=i_c // pc, cell_col=i_c % pc,
                  value=np.stack([s.x for s in samples]).ravel())
    t_n, t_t, t_s = np.unravel_index(np.arange(n * nt * L_out), (n, nt, L_out))
    targets = dict(sample_id=ids[t_n], scenario_id=scen[t_n], source=src[t_n], task=task_names[t_t],
                   role="target", step=L_in + t_s, cell_row=center[0], cell_col=center[1],
                   value=np.stack([s.y for s in samples]).ravel())
    m_n, m_s = np.unravel_index(np.arange(n * L_all), (n, L_all))
    frames = [pd.DataFrame(inputs), pd.DataFrame(targets)]
    for role, attr in (("marker_hour", "hour"), ("marker_dow", "dow")):
        frames.append(pd.DataFrame(dict(
            sample_id=ids[m_n], scenario_id=scen[m_n], source=src[m_n], task="all", role=role,
            step=m_s, cell_row=-1, cell_col=-1,
            value=np.stack([getattr(s, attr) for s in samples]).ravel().astype(np.float64))))
    return pd.concat(frames, ignore_index=True)[CSV_COLUMNS]


def _frame_to_samples(df: pd.DataFrame, cfg: DatasetConfig, n_expected: int, split: str) -> list:
    pos, ids = pd.factorize(df["sample_id"], sort=False)
    if len(ids) != n_expected:
        raise IoError(f"{split}: manifest lists {n_expected} samples, CSV holds {len(ids)}")
    n, nt, P = len(ids), len(TASKS), cfg.patch_rows * cfg.patch_cols
    L_in, L_out = cfg.L_in, cfg.L_out
    x = np.full((n, nt, L_in, P), np.nan)
    y = np.full((n, nt, L_out), np.nan)
    markers = {"marker_hour": np.full((n, L_in + L_out), -1, dtype=np.int64),
               "marker_dow": np.full((n, L_in + L_out), -1, dtype=np.int64)}
    role = df["role"].to_numpy()
    task = df["task"].map({t: i for i, t in enumerate(TASKS)}).to_numpy()
    step = df["step"].to_numpy()
    cell = df["cell_row"].to_numpy() * cfg.patch_cols + df["cell_col"].to_numpy()
    value = df["value"].to_numpy()
    try:
        m = role == "input"
        x[pos[m], task[m].astype(int), step[m], cell[m]] = value[m]
        m = role == "target"
        y[pos[m], task[m].astype(int), step[m] - L_in] = value[m]
        for name, arr in markers.items():
            m = role == name
            arr[pos[m], step[m]] = value[m].astype(np.int64)
    except (IndexError, ValueError) as exc:
        raise IoError(f"{split}: malformed CSV ({exc})") from exc
    if np.isnan(x).any() or np.isnan(y).any() or any((a < 0).any() for a in markers.values()):
        raise IoError(f"{split}: CSV is missing values")
    first = df.drop_duplicates("sample_id")
    src = first["source"].to_numpy()
    scen = first["scenario_id"].to_numpy()
    return [WindowSample(x[i], y[i], markers["marker_hour"][i], markers["marker_dow"][i],
                         str(src[i]), int(scen[i]), int(ids[i])) for i in range(n)]


def save(bundle: DatasetBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        df = _split_frame(bundle.split(name), bundle.config)
        atomic_write_text(directory / f"{name}.csv", df.to_csv(index=False, float_format="%.17g"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "counts": {name: len(bundle.split(name)) for name in SPLITS},
        "shapes": {"x": [len(TASKS), bundle.config.L_in, bundle.config.patch_rows * bundle.config.patch_cols],
                   "y": [len(TASKS), bundle.config.L_out]},
        "tasks": list(TASKS),
        "config": bundle.config.__dict__,
        "normalization": None if not bundle.normalized else {
            "mean": bundle.mean.tolist(), "std": bundle.std.tolist()},
        "meta": bundle.meta,
        "checksum": bundle.checksum(),
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load(directory) -> DatasetBundle:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise IoError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        cfg = DatasetConfig(**manifest["config"]).validate()
        counts = manifest["counts"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IoError(f"unreadable manifest {mpath}: {exc}") from exc
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.csv"
        if not path.is_file():
            raise IoError(f"missing split file: {path}")
        df = pd.read_csv(path, float_precision="round_trip",
                         dtype={"source": str, "task": str, "role": str})
        splits[name] = _frame_to_samples(df, cfg, int(counts[name]), name)
    norm = manifest.get("normalization")
    mean = std = None
    if norm:
        mean, std = np.array(norm["mean"]), np.array(norm["std"])
    bundle = DatasetBundle(splits["sim"], splits["val"], splits["test"], cfg, mean, std,
                           manifest.get("meta", {}))
    if manifest.get("checksum") and bundle.checksum() != manifest["checksum"]:
        raise IoError("bundle checksum does not match manifest")
    return bundle
