from __future__ import annotations

import numpy as np
import pytest

from qshared.config import bundled
from qshared.model import ModelSpec, TreatmentCoding, recode
from qshared.simulator import Scenario, generate_smart


@pytest.fixture(scope="session")
def spec3() -> ModelSpec:
    return ModelSpec.load(bundled("smart3.yaml"))


@pytest.fixture(scope="session")
def reference() -> Scenario:
    return Scenario.load(bundled("scenarios/reference.yaml"))


@pytest.fixture(scope="session")
def ref_data(reference):
    return generate_smart(reference)


@pytest.fixture(scope="session")
def ex1_data(ref_data):
    return recode(ref_data, TreatmentCoding(-0.1, 0.1))


@pytest.fixture(scope="session")
def ex2_data(ref_data):
    return recode(ref_data, TreatmentCoding(0.250, 0.248), (-0.01, 0.01))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
