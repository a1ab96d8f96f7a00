"""Finite-difference verification of analytic gradients.

``grad_check`` compares the backward pass of a scalar function against
central differences (f(x + eps) - f(x - eps)) / (2 eps) evaluated per
parameter coordinate. It runs in float64 only; float32 round-off would
swamp the comparison. The relative error for a coordinate is
|a - n| / max(|a|, |n|, 1e-8) and the function returns the maximum over
all checked coordinates.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ValidationError
from .rng import Rng


def grad_check(
    f,
    params: dict,
    eps: float = 1e-6,
    max_coords_per_param: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error between analytic and numeric gradients.

    f: callable taking no arguments and returning a scalar Tensor built
       from the tensors in ``params`` (it is re-invoked for every probe).
    params: name -> float64 Tensor with requires_grad set.
    max_coords_per_param: if given, check only that many coordinates per
       tensor, chosen by ``rng`` (default Rng(0)); None checks everything.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValidationError(f"grad_check requires float64 params; {name} is {p.data.dtype.name}")
        if not p.requires_grad:
            raise ValidationError(f"param {name} does not require grad")

    loss = f()
    loss2 = f()
    if loss.data.tobytes() != loss2.data.tobytes():
        raise ValidationError("function under grad_check is not deterministic")

    for p in params.values():
        p.zero_grad()
    loss3 = f()
    loss3.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    if rng is None:
        rng = Rng(0)

    worst = 0.0
    for name in sorted(params):
        p = params[name]
        size = p.data.size
        if size == 0:
            continue
        if max_coords_per_param is None or size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            picked = set()
            while len(picked) < max_coords_per_param:
                picked.add(rng.integers(0, size))
            coords = np.array(sorted(picked))
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                hi = f().item()
            flat[c] = orig - eps
            with no_grad():
                lo = f().item()
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = aflat[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
