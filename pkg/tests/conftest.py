import numpy as np
import pytest


def numerical_jacobian(fn, x, eps=1e-6, order=2):
    """Central-difference Jacobian of ``fn`` (array -> array) at ``x``; rows index outputs.

    ``order=4`` uses the five-point stencil, which tolerates badly scaled
    compositions where the two-point rule's truncation error dominates.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()

    def at(i, d):
        v = flat.copy()
        v[i] += d
        return np.asarray(fn(v.reshape(x.shape)), dtype=np.float64).ravel()

    cols = []
    for i in range(flat.size):
        if order == 2:
            cols.append((at(i, eps) - at(i, -eps)) / (2 * eps))
        else:
            cols.append((-at(i, 2 * eps) + 8 * at(i, eps) - 8 * at(i, -eps) + at(i, -2 * eps)) / (12 * eps))
    return np.stack(cols, axis=1)


def numerical_logdet(fn, x, eps=1e-4):
    sign, logabs = np.linalg.slogdet(numerical_jacobian(fn, x, eps, order=4))
    assert sign != 0
    return logabs


def randomize_layer(layer, rng, scale=0.3):
    """Overwrite every parameter with small random values (then re-project)."""
    for name, arr in layer.params.items():
        if name.endswith("logs") or name.endswith("bias"):
            arr[...] = rng.normal(0.0, scale, arr.shape)
        elif "weight" not in name:
            arr[...] = rng.normal(0.0, scale, arr.shape)
    layer.project()
    return layer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(config, seed=0, scale=0.1, kernel_scale=0.1):
    """Build a model and give every parameter a small random, non-degenerate value."""
    from invflow.model import FlowModel

    model = FlowModel(config)
    r = np.random.default_rng(seed)
    for path, layer in model.layers():
        for name, arr in layer.params.items():
            if path.endswith("invconv"):
                arr[...] = r.normal(0.0, kernel_scale, arr.shape)
            elif path.endswith("conv1x1"):
                continue
            else:
                arr[...] += r.normal(0.0, scale, arr.shape)
        layer.project()
    for a in model.actnorms():
        a.initialized = True
    return model


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[1:])):
        ok, seconds, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'} ({seconds:.2f}s) {detail}")
