from __future__ import annotations

import pytest

from orchardmap.detector import BaselineDetectorParams
from orchardmap.encoder import EncoderParams
from orchardmap.synthetic import OrchardSpec, generate

# Detector thresholds matched to the synthetic point density (the same values
# `orchardmap generate` writes into its companion config).
FIXTURE_ENCODER = EncoderParams(resolution=128, min_points=2, density_cap=10.0)
FIXTURE_DETECTOR = BaselineDetectorParams(density_floor=0.05, min_cells=20)


@pytest.fixture(scope="session")
def orchard_3x10():
    return generate(OrchardSpec(rows=3, trees_per_row=10))


@pytest.fixture(scope="session")
def orchard_2x5():
    return generate(OrchardSpec(rows=2, trees_per_row=5, seed=7))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])
