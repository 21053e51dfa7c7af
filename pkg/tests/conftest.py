from __future__ import annotations

import pytest

from simreweight import dataset as ds
from simreweight import simulator as sim
from simreweight.model import ModelConfig


def small_model_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, mlp_hidden=32,
                cnn_channels=4, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_bundle():
    """Two simulated scenarios and the reference environment, normalized."""
    cfg = ds.DatasetConfig(n_scenarios=2, seed=1, stride=12)
    pool = sim.make_sim_pool(sim.default_ranges(), cfg.n_scenarios, cfg.seed)
    return ds.normalize(ds.build_bundle(pool, sim.make_real_env(), cfg))


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
