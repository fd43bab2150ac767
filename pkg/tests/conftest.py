import numpy as np
import pytest


def max_rel_err(got: np.ndarray, want: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Worst elementwise relative error, ignoring deviations below abs_floor."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    diff = np.abs(got - want)
    mask = diff > abs_floor
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(got), np.abs(want))
    return float((diff[mask] / denom[mask]).max())


@pytest.fixture
def rel():
    return max_rel_err
