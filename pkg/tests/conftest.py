import numpy as np
import pytest
import torch

from director.config import load_config

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_config():
    return load_config("tiny", env="pinpad:three")


def central_difference(fn, x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Numerical gradient of the scalar ``fn()`` with respect to tensor ``x`` (in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12))


def check_gradients(fn, tensors, h: float = 1e-3) -> float:
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        with torch.no_grad():
            numeric = central_difference(fn, t, h)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst
