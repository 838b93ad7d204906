import numpy as np
import pytest

from fedcmi import autodiff as ad
from fedcmi.data import DataSpec, generate_dataset


def finite_difference(fn, params: dict, h: float = 1e-5) -> dict:
    """Central differences of scalar ``fn(params)`` for every entry of every array."""
    grads = {}
    for key, arr in params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = float(ad.value(fn(params)))
            arr[idx] = orig - h
            down = float(ad.value(fn(params)))
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[key] = g
    return grads


def tape_gradient(fn, params: dict) -> dict:
    tape = ad.Tape()
    bound = tape.bind(params)
    loss = fn(bound)
    return ad.backward(tape, loss)


def max_relative_error(a: dict, b: dict, floor: float = 1e-6) -> float:
    """Largest entrywise |a-b| / max(|a|, |b|, floor) over all keys."""
    worst = 0.0
    for k in a:
        denom = np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), floor)
        worst = max(worst, float(np.max(np.abs(a[k] - b[k]) / denom)))
    return worst


@pytest.fixture(scope="session")
def small_spec():
    return DataSpec(num_classes=3, dim_m0=4, dim_m1=5, scale_m0=2.0, scale_m1=0.7, n_train=120, n_test=60, seed=3)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return generate_dataset(small_spec, "train"), generate_dataset(small_spec, "test")


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> None:
    """Record one acceptance line; all of them are echoed in the terminal summary."""
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
