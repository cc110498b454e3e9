import sys

import numpy as np
import pytest

from tinyrec.tensor import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(loss_fn, array: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


GRAD_FLOOR = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    # The floor keeps structurally zero gradients (e.g. attention key bias) from
    # turning finite-difference noise into a relative error of 1.
    scale = max(np.linalg.norm(a), np.linalg.norm(b), GRAD_FLOOR)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build_loss, params: dict, h: float = FD_STEP, max_entries: int | None = None,
              rng=None) -> dict[str, float]:
    """Compare backward() against central differences for every tensor in ``params``.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor. When
    ``max_entries`` is set, a random subset of entries per tensor is checked.
    """
    for p in params.values():
        p.grad = None
    build_loss().backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], num)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
