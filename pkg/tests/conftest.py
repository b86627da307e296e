import dataclasses

import pytest

from facenas.config import toy_config
from facenas.pipeline import prepared


def tiny_config(seed=0, output_dir="run", **budget):
    """The toy benchmark shrunk so a full search takes seconds."""
    cfg = toy_config(seed, output_dir)
    cfg.data.synthetic = dataclasses.replace(cfg.data.synthetic, n_clips=40, length_range=(40, 80))
    cfg.train = dataclasses.replace(cfg.train, epochs=2)
    cfg.ppo = dataclasses.replace(cfg.ppo, samples=2)
    cfg.budget = dataclasses.replace(cfg.budget, **{"joint_steps": 3, **budget})
    return cfg


@pytest.fixture(scope="session")
def tiny_data():
    return prepared(tiny_config())


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
