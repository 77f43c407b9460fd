import numpy as np
import pytest
import torch

from dualattn.pyramid import GeneratorConfig, SyntheticSlideSpec, generate_synthetic_slide

torch.set_default_dtype(torch.float32)


def small_generator(**kw):
    """A 4096^2 slide keeps the full level layout but renders in well under a second."""
    base = dict(base_size=4096, roi_radius=(0.09, 0.12))
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_cfg():
    return small_generator()


@pytest.fixture(scope="session")
def small_slides(small_cfg):
    out = {}
    for label in range(small_cfg.n_classes):
        out[label] = generate_synthetic_slide(SyntheticSlideSpec.for_class(label, 11 + label, small_cfg), small_cfg)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one pass/fail line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE[name] = "skipped" if report.skipped else report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        num = name.split("_")[2]
        outcome = {"passed": "PASS", "failed": "FAIL"}.get(_ACCEPTANCE[name], _ACCEPTANCE[name].upper())
        terminalreporter.write_line(f"criterion {num}: {outcome}  ({name})")
