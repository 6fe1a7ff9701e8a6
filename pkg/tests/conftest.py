import numpy as np
import pytest

from stealthpatch import tensor as T

FD_STEP = 1e-5
FD_RTOL = 1e-4


def central_difference(f, arrays, which, index, h=FD_STEP):
    """d f / d arrays[which][index] by central differences on plain numpy copies."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][index] += h
    minus[which][index] -= h
    return (f(*plus) - f(*minus)) / (2 * h)


def check_gradients(build, arrays, rng, probes=10, rtol=FD_RTOL, floor=1e-6):
    """Compare tape gradients of ``build`` with central differences.

    ``build`` maps tensors to a scalar tensor.  Every input gets ``probes``
    random probe positions.  Returns the worst relative error.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ts = [T.tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*ts)
    assert loss.size == 1
    T.backward(loss)

    def f(*xs):
        with T.no_grad():
            return float(build(*[T.tensor(x) for x in xs]).data)

    worst = 0.0
    for k, (a, t) in enumerate(zip(arrays, ts)):
        grad = np.zeros_like(a) if t.grad is None else t.grad
        for _ in range(probes):
            idx = tuple(int(rng.integers(0, n)) for n in a.shape)
            num = central_difference(f, arrays, k, idx)
            ana = grad[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            assert err < rtol, f"input {k} at {idx}: tape {ana!r} vs numeric {num!r}"
    return worst


def weighted_sum(out: T.Tensor, rng=None) -> T.Tensor:
    """Scalar probe of a tensor-valued op: sum of the output times fixed weights.

    The weights depend only on the output shape, so repeated evaluations agree.
    """
    w = np.random.default_rng(list(out.shape) + [7]).normal(size=out.shape)
    return T.sum(T.mul(out, T.constant(w)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> one-line verdict, filled in by the acceptance suite
ACCEPTANCE = {}
ACCEPTANCE_TABLES = []


def record(number, ok, detail):
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    for title, text in ACCEPTANCE_TABLES:
        terminalreporter.write_line("")
        terminalreporter.write_line(title)
        for line in text.rstrip("\n").splitlines():
            terminalreporter.write_line(line)
