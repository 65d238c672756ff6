import pytest

from reid.datamodel import SynthSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    """8 identities on a 4x4 grid: cheap enough for finite differences."""
    return generate_synthetic(SynthSpec(identities=8, tracklets_per_id=3, frames_per_tracklet=5,
                                        H=4, W=4), seed=11)


@pytest.fixture(scope="session")
def desk_ds():
    return generate_synthetic(SynthSpec(camera_shift=3.0), seed=0)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def add(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
