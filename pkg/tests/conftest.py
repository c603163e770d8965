import numpy as np
import pytest

from relnet.autodiff import ParameterStore


def central_diff_grads(store: ParameterStore, loss_fn, h: float = 1e-5) -> dict:
    """Central finite differences of loss_fn() w.r.t. every store entry.

    loss_fn must rebuild the forward pass from the store's current values
    and return a float; it never touches backward(), so these gradients
    are an oracle independent of the autodiff path they check.
    """
    grads = {}
    for name, p in store.items():
        base = p.value.data.copy()
        g = np.zeros(base.size)
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            store.set_value(name, bumped.reshape(base.shape))
            up = loss_fn()
            bumped[i] = flat[i] - h
            store.set_value(name, bumped.reshape(base.shape))
            down = loss_fn()
            g[i] = (up - down) / (2.0 * h)
        store.set_value(name, base)
        grads[name] = g.reshape(base.shape)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
