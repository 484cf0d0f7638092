from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from railsight.synth_gen import CorpusSpec, SceneSpec, SignalPlacement, generate_corpus, generate_scene

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def three_track_scene():
    """Main track sandwiched, one red signal between it and its left neighbour."""
    spec = SceneSpec(seed=5, track_count=3, main_index=1, signals=(SignalPlacement(1, "Left", "Red"),))
    return spec, *generate_scene(spec, "s3")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(CorpusSpec(6, seed=21, quotas={"far_track": 2}), root)
    return root


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict line; echoed again in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
