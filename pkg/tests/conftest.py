import numpy as np
import pytest

from msilax.numerics import Tensor


def numeric_grad(f, arrays, index, h=1e-3):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def gradcheck(build, arrays, h=1e-3):
    """Compare autograd against finite differences for every input array.

    ``build`` maps Tensors to an output Tensor; the scalar loss is
    ``sum(out * r)`` with a fixed random ``r`` so every output element matters.
    Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[Tensor(a, dtype=np.float64) for a in arrays])
    r = np.random.default_rng(12345).standard_normal(probe.shape)

    def f(*arrs):
        out = build(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float((out.data * r).sum())

    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    loss = (out * Tensor(r, dtype=np.float64)).sum()
    loss.backward()
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(f, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed in the terminal summary
CRITERIA = {}


def record_criterion(number, name, ok, detail):
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
