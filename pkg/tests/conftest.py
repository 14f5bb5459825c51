import os

# Pin BLAS threading before numpy loads anywhere; float64 reductions must not
# change summation order between runs.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from splatfit.core import Camera, Scene, logit  # noqa: E402


def random_scene_2d(
    rng: np.ndarray,
    count: int,
    width: int,
    height: int,
    sigma_range: tuple[float, float] = (0.6, 3.0),
    alpha_range: tuple[float, float] = (0.05, 0.95),
) -> Scene:
    """Random primitives roughly covering a width x height pixel grid."""
    return Scene(
        positions=np.stack(
            [
                rng.uniform(-1.0, width, size=count),
                rng.uniform(-1.0, height, size=count),
            ],
            axis=1,
        ),
        log_scales=np.log(rng.uniform(*sigma_range, size=(count, 2))),
        rotations=rng.uniform(-np.pi, np.pi, size=count),
        opacity_logits=logit(rng.uniform(*alpha_range, size=count)),
        features=logit(rng.uniform(0.05, 0.95, size=(count, 3))),
    )


def random_scene_3d(
    rng: np.ndarray,
    count: int,
    extent: float = 1.0,
    sigma_range: tuple[float, float] = (0.05, 0.35),
    alpha_range: tuple[float, float] = (0.05, 0.95),
) -> Scene:
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return Scene(
        positions=rng.uniform(-extent, extent, size=(count, 3)),
        log_scales=np.log(rng.uniform(*sigma_range, size=(count, 3))),
        rotations=quats,
        opacity_logits=logit(rng.uniform(*alpha_range, size=count)),
        features=logit(rng.uniform(0.05, 0.95, size=(count, 3))),
    )


def ring_camera(width: int = 16, height: int = 16, angle: float = 0.3, radius: float = 3.0) -> Camera:
    position = (radius * np.cos(angle), radius * np.sin(angle), 0.8)
    return Camera.look_at(position, (0.0, 0.0, 0.0), width, height, focal=1.1 * min(width, height))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# --- acceptance-criteria reporting -----------------------------------------
#
# The acceptance tests register one verdict per criterion here; the terminal
# summary prints them as single pass/fail lines so a run's outcome can be read
# off the bottom of the log without digging through pytest tracebacks.

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> bool:
    """Record a criterion verdict; returns `passed` for use in asserts."""
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):  # noqa: ARG001
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
