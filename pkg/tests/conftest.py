import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gatnerf import diffcore as dc
from gatnerf.config import SceneSpec
from gatnerf.dataio import generate_synthetic, load_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _fresh_tape():
    dc.clear_graph()
    yield
    dc.clear_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(**kw):
    """A small, fast synthetic scene (few frames, low resolution)."""
    base = dict(frames=4, size=16, seed=3, samples=64)
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic(tiny_spec(), str(out))
    return str(out)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


TINY_OVERRIDES = (
    "gat.d_model=16", "gat.n_head=2", "gat.d_ffn=16", "field.width=16", "field.color_width=8",
    "render.n_coarse=8", "render.n_fine=8", "train.ray_batch=32", "train.eval_every=0",
)


def tiny_config(*extra):
    """Desk preset shrunk to a network that trains in milliseconds per step."""
    from gatnerf.config import resolve

    return resolve("desk", overrides=TINY_OVERRIDES + tuple(extra))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])
