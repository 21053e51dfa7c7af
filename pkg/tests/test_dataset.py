from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from simreweight import dataset as ds
from simreweight import simulator as sim
from simreweight.errors import ConfigError, IoError, WindowTooLong


def _cube(T: int):
    return sim.generate_cube(sim.ScenarioConfig(horizon_T=T))


@pytest.mark.parametrize("T,stride,expected", [(48, 18, 2), (48, 48, 1), (336, 1, 307)])
def test_window_counts(T, stride, expected):
    assert ds.window_count(T, 24, 6, stride) == expected
    assert len(ds.window(_cube(T), 24, 12, 6, stride)) == expected


def test_window_too_long():
    with pytest.raises(WindowTooLong):
        ds.window(_cube(20), 24, 12, 6, 1)


def test_window_contents_line_up_with_the_cube():
    cube = _cube(96)
    w = ds.window(cube, 24, 12, 6, 6)[2]
    r0, c0 = ds.center_patch_origin(8, 8, 3, 3)
    s = 12
    np.testing.assert_array_equal(w.x[2, :, 0], cube.values[r0, c0, s:s + 24, 2])
    np.testing.assert_array_equal(w.y[1], cube.values[r0 + 1, c0 + 1, s + 24:s + 30, 1])
    assert w.hour[0] == s % 24 and w.token(12).shape == (3, 12, 9)


def test_normalization_uses_sim_statistics(tiny_bundle):
    xs = np.stack([s.x for s in tiny_bundle.sim])
    assert np.all(np.abs(xs.mean(axis=(0, 2))) <= 1e-9)
    std = xs.std(axis=(0, 2))
    assert np.all(np.abs(std - 1) <= 1e-6)


def test_denormalize_inverts_target_scaling(tiny_bundle):
    raw_cfg = tiny_bundle.config
    pool = sim.make_sim_pool(sim.default_ranges(), raw_cfg.n_scenarios, raw_cfg.seed)
    raw = ds.build_bundle(pool, sim.make_real_env(), raw_cfg)
    np.testing.assert_allclose(tiny_bundle.denormalize(tiny_bundle.test[0].y), raw.test[0].y,
                               rtol=0, atol=1e-9)


def test_splits_are_disjoint_and_tagged(tiny_bundle):
    assert all(s.source == "sim" for s in tiny_bundle.sim)
    assert all(s.source == "real" for s in tiny_bundle.val + tiny_bundle.test)
    L = tiny_bundle.config.L_in + tiny_bundle.config.L_out
    val_ids = {s.sample_id for s in tiny_bundle.val}
    assert not val_ids & {s.sample_id for s in tiny_bundle.test}
    horizon = sim.default_real_reference().horizon_T
    stride = tiny_bundle.config.stride
    n_val = len(tiny_bundle.val)
    assert (n_val - 1) * stride + L <= horizon // 2


def test_real_sample_in_sim_is_rejected(tiny_bundle):
    with pytest.raises(ConfigError):
        ds.DatasetBundle(tiny_bundle.sim + tiny_bundle.val[:1], tiny_bundle.val, tiny_bundle.test)


def test_round_trip_is_bit_exact(tiny_bundle, tmp_path):
    ds.save(tiny_bundle, tmp_path / "b")
    back = ds.load(tmp_path / "b")
    assert back.checksum() == tiny_bundle.checksum()
    for name in ds.SPLITS:
        for a, b in zip(tiny_bundle.split(name), back.split(name)):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
            assert np.array_equal(a.hour, b.hour) and a.sample_id == b.sample_id
    header = (tmp_path / "b" / "sim.csv").read_text().splitlines()[0]
    assert header == ",".join(ds.CSV_COLUMNS)


def test_load_errors(tiny_bundle, tmp_path):
    with pytest.raises(IoError):
        ds.load(tmp_path / "nothing")
    ds.save(tiny_bundle, tmp_path / "b")
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    manifest["counts"]["val"] += 1
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IoError):
        ds.load(tmp_path / "b")


def test_save_twice_is_byte_identical(tiny_bundle, tmp_path):
    ds.save(tiny_bundle, tmp_path / "a")
    ds.save(tiny_bundle, tmp_path / "b")
    for name in ("manifest.json", "sim.csv", "val.csv", "test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        ds.DatasetConfig(L_token=30).validate()
    with pytest.raises(ConfigError):
        ds.DatasetConfig(stride=0).validate()
