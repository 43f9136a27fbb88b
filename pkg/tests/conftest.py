import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth_config():
    from cagan.synth import ActivityScriptConfig
    return ActivityScriptConfig(sequence_length=40, image_hw=32, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_synth_config):
    from cagan.synth import generate_dataset
    return generate_dataset(small_synth_config, count=6, split_ratios=(0.5, 0.25, 0.25))


@pytest.fixture
def desk_preset():
    from cagan.models import make_preset
    return make_preset("desk32", k=6)


def make_batch(samples, t, k, n=None):
    """Frame ``t`` of each sample, stacked, with zero previous codes."""
    samples = samples[:n] if n else samples
    return {
        "rgb": np.stack([s.rgb[t] for s in samples]),
        "aux": np.stack([s.aux[t] for s in samples]),
        "labels": np.array([s.labels[t] for s in samples]),
        "prev_rgb": np.zeros((len(samples), k), np.float32),
        "prev_aux": np.zeros((len(samples), k), np.float32),
    }


# one PASS/FAIL line per acceptance criterion, shown after the test run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
