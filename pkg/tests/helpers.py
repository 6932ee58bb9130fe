"""Numeric helpers shared across test files."""

from __future__ import annotations

import numpy as np
import torch


def central_diff(loss_fn, tensor: torch.Tensor, flat_index: int, eps: float = 1e-6) -> float:
    """Central finite difference of a scalar loss wrt one tensor coordinate.

    The tensor is perturbed in place under no_grad and restored afterwards;
    loss_fn must recompute the loss from current parameter values.
    """
    flat = tensor.reshape(-1)
    with torch.no_grad():
        orig = flat[flat_index].item()
        flat[flat_index] = orig + eps
        hi = float(loss_fn())
        flat[flat_index] = orig - eps
        lo = float(loss_fn())
        flat[flat_index] = orig
    return (hi - lo) / (2.0 * eps)


def check_grads_fd(
    loss_fn,
    named_tensors: list[tuple[str, torch.Tensor]],
    rng: np.random.Generator,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_coords: int = 6,
    eps: float = 1e-6,
) -> int:
    """Compare autograd gradients against central differences.

    Runs one backward pass, then finite-differences up to max_coords random
    coordinates of every tensor. Asserts agreement and returns the number of
    coordinates checked. Tensors are expected to be float64 leaves.
    """
    for _, t in named_tensors:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    checked = 0
    for name, t in named_tensors:
        assert t.grad is not None, f"no gradient reached {name}"
        grad = t.grad.reshape(-1)
        n = t.numel()
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for i in coords:
            i = int(i)
            fd = central_diff(lambda: loss_fn().item(), t, i, eps=eps)
            an = float(grad[i])
            err = abs(fd - an)
            tol = atol + rtol * max(abs(fd), abs(an))
            assert err <= tol, (
                f"{name}[{i}]: autograd {an:.10g} vs finite-diff {fd:.10g} "
                f"(err {err:.3g} > tol {tol:.3g})"
            )
            checked += 1
    return checked
