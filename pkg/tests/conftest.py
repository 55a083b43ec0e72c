import numpy as np
import pytest

from ctxner.tensor import Tensor, backward, no_grad


def numeric_grad(loss_fn, tensor: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn().item()
            flat[i] = orig - eps
            minus = loss_fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def grad_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise relative error, zeroed where the absolute gap is under ``floor``."""
    gap = np.abs(analytic - numeric)
    rel = gap / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    return np.where(gap <= floor, 0.0, rel)


def check_gradients(loss_fn, tensors: dict, eps: float = 1e-4, rtol: float = 1e-4) -> dict:
    """Backprop once, compare to finite differences; returns {name: max rel error}."""
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    worst = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(loss_fn, t, eps)
        worst[name] = float(grad_errors(analytic, numeric).max(initial=0.0))
    bad = {k: v for k, v in worst.items() if v >= rtol}
    assert not bad, f"gradient mismatch: {bad}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
