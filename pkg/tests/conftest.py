import numpy as np
import pytest

from diqa.nn import Tensor, activation_pattern, iter_indices, relative_error, same_pattern

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    return Tensor(np.array(arr, dtype=dtype), requires_grad=True)


def grad_errors(loss_fn, tensors, rng, per_tensor=6, step=1e-3):
    """Relative errors between backward() and central differences on random entries.

    ``loss_fn`` rebuilds the graph from the current tensor values and returns a
    scalar Tensor.  When the +/-step stencil flips a relu mask, pooling argmax or
    abs sign, the difference is retaken with the base activation pattern
    replayed, i.e. on the smooth piece that contains the evaluation point.
    Returns ``(name, index, error, crossed_kink)`` tuples.
    """
    for t in tensors:
        t.grad = None
    with activation_pattern() as base:
        loss = loss_fn()
    loss.backward()

    def value(replay=None):
        with activation_pattern(replay) as pattern:
            v = loss_fn().item()
        return v, pattern

    out = []
    for t in tensors:
        for idx in iter_indices(t.data, per_tensor, rng):
            orig = t.data[idx]
            t.data[idx] = orig + step
            fp, pp = value()
            t.data[idx] = orig - step
            fm, pm = value()
            crossed = not (same_pattern(pp, base) and same_pattern(pm, base))
            if crossed:
                t.data[idx] = orig + step
                fp, _ = value(base)
                t.data[idx] = orig - step
                fm, _ = value(base)
            t.data[idx] = orig
            num = (fp - fm) / (2 * step)
            out.append((t.name or "tensor", idx, relative_error(t.grad[idx], num, floor=1e-6), crossed))
    return out


def check_grads(loss_fn, tensors, rng, per_tensor=6, step=1e-3, tol=1e-4):
    """Assert every sampled entry is within ``tol``; returns the worst relative error."""
    errors = grad_errors(loss_fn, tensors, rng, per_tensor, step)
    for name, idx, err, _ in errors:
        assert err < tol, f"{name}{idx}: relative error {err:.3g}"
    return max(e for _, _, e, _ in errors)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
