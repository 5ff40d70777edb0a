import numpy as np
import pytest
from hypothesis import settings

from spkboot.synthgen import SynthConfig, generate_dataset

# Fixed example sequences keep every run of the suite identical.
settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    passed = call.excinfo is None
    # A criterion split over several tests passes only if all of them do.
    prev = _acceptance.get(number)
    ok = passed and (prev is None or prev[0] == "PASS")
    _acceptance[number] = ("PASS" if ok else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        verdict, title = _acceptance[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six speakers, well separated, light noise; small enough for per-test training."""
    cfg = SynthConfig(num_speakers=6, utts_per_speaker=8, groups_per_speaker=2, frames_range=(12, 20),
                      feature_dim=6, session_noise_std=0.05, frame_noise_std=0.2, seed=7,
                      eval_speakers=4, eval_utts_per_speaker=4)
    return generate_dataset(cfg)
