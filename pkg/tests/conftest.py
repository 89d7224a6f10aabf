import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "symfuse", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("symfuse")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_frame(rng, h=16, w=16, num_classes=3, valid_fraction=0.6, unlabeled_fraction=0.2):
    """Random but well-formed projected frame (labels only at valid pixels)."""
    from symfuse.geometry import ProjectedFrame

    valid = rng.random((h, w)) < valid_fraction
    labels = rng.integers(1, num_classes + 1, size=(h, w))
    labels[rng.random((h, w)) < unlabeled_fraction] = 0
    labels[~valid] = 0
    lidar = np.zeros((h, w, 5))
    pts = rng.normal(size=(h, w, 3)) + np.array([0, 0, 5.0])
    lidar[..., 1:4] = pts
    lidar[..., 0] = np.sqrt((pts ** 2).sum(-1))
    lidar[..., 4] = rng.random((h, w))
    lidar[~valid] = 0
    return ProjectedFrame(rng.random((h, w, 3)), lidar, labels.astype(np.int64), valid)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
