import contextlib
import time

import hypothesis
import numpy as np
import pytest
import torch

from ghclnet.backbone import BackboneConfig
from ghclnet.ingestion import SynthSpec, synth_generate

hypothesis.settings.register_profile("default", deadline=None, max_examples=100)
hypothesis.settings.load_profile("default")

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def small_cfg():
    return BackboneConfig(width_scale=0.25, pretrained=False, seed=0)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """10 images per class and sensor, 2 sensors: 60 records."""
    out = tmp_path_factory.mktemp("synth_small")
    return synth_generate(SynthSpec(n_per_class=10, n_sensors=2, seed=7), out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            lines.append(f"criterion {number} FAIL  {title} ({time.perf_counter() - t0:.1f}s): {exc!s:.200}")
            print(lines[-1])
            raise
        lines.append(f"criterion {number} PASS  {title} ({time.perf_counter() - t0:.1f}s)")
        print(lines[-1])

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
