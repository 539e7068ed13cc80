import numpy as np
import pytest

from mxsim.accel import AttentionLayer, LinearLayer, WorkloadSpec
from mxsim.synthetic import OutlierProfile, write_synthetic_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def planted_activations(rng, m, k, hot, scale):
    x = rng.standard_normal((m, k))
    x[:, hot] *= scale
    return x.astype(np.float32)


@pytest.fixture
def small_workload():
    return WorkloadSpec(
        (
            LinearLayer("blk0.qkv", 16, 64, 48),
            AttentionLayer("blk0.attn", 4, 16, 16),
            LinearLayer("blk0.fc", 16, 64, 32),
        ),
        timesteps=2,
        name="small",
    )


@pytest.fixture
def planted_bundle(tmp_path, small_workload):
    profile = OutlierProfile(channel_fraction=0.05, outlier_scale=64.0, head_fraction=0.25, head_scale=16.0)
    return write_synthetic_bundle(tmp_path / "bundle", small_workload, seed=7, profile=profile)


# acceptance reporting: one PASS/FAIL line per criterion ---------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.failed:
        _criteria[number] = (title, "FAIL")
    elif report.when == "call" and number not in _criteria:
        _criteria[number] = (title, "PASS" if report.passed else "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
