import numpy as np
import pytest

from vipgan import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grads(build, tensors, h=1e-5):
    """Largest relative error between autodiff and finite differences over ``tensors``.

    ``build()`` must construct a scalar loss from the current data of ``tensors``.
    """
    for t in tensors:
        t.grad = None
    T.backward(build())
    worst = 0.0
    for t in tensors:
        auto = t.grad.copy()
        num = numeric_grad(lambda: float(build().data), t.data, h)
        worst = max(worst, rel_error(auto, num))
    return worst


def dtensor(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True, precision="double")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
