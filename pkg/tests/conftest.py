import numpy as np
import pytest
import torch

from ldmric.data import synthetic_scene


def randomize_(module, scale=0.3, seed=0):
    """Overwrite every parameter with random values so no branch is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def fd_rel_error(loss_fn, tensors, step=1e-4, n_coords=24, seed=0):
    """Relative error between autograd and central finite differences.

    ``loss_fn()`` must return a scalar computed from ``tensors``. A random
    subset of coordinates of each tensor is probed; the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over all probes.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            grad = t.grad.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(grad[i].item())
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom


@pytest.fixture
def scene64():
    return synthetic_scene(64, seed=3)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
