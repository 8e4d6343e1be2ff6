import numpy as np
import pytest
import torch

from raysparse.geometry import CameraIntrinsics, CameraPose, CameraView

torch.set_num_threads(1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_view(
    rng: np.random.Generator,
    center=None,
    target=None,
    width: int = 64,
    height: int = 48,
    feature_width: int = 8,
    feature_height: int = 6,
) -> CameraView:
    f = rng.uniform(0.6, 1.4) * width
    intr = CameraIntrinsics(f, f, width / 2 + rng.uniform(-2, 2), height / 2 + rng.uniform(-2, 2), width, height)
    if center is None:
        pose = CameraPose(random_rotation(rng), rng.uniform(-3, 3, size=3))
    else:
        pose = CameraPose.look_at(center, target)
    return CameraView(intr, pose, feature_width, feature_height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(r.nodeid) for reps in terminalreporter.stats.values()
              for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d}: not run or did not complete"))
