"""The tensor engine in five minutes: graphs, backward, and the FD oracle.

Every trainable computation in this package flows through Tensor ops.
This script builds a toy two-layer network by hand, differentiates it,
and confirms the gradients against central finite differences.
"""

import numpy as np

from moddit import autodiff as ad
from moddit.autodiff import Tensor, backward, no_grad
from moddit.gradcheck import grad_check
from moddit.rng import Rng

rng = Rng(1)

# float64 throughout: that is the gradcheck contract
w1 = Tensor(rng.normal((4, 8)), requires_grad=True)
w2 = Tensor(rng.normal((8, 2)), requires_grad=True)
x = Tensor(rng.normal((3, 4)))


def loss_fn():
    h = ad.silu(ad.matmul(x, w1))
    out = ad.matmul(h, w2)
    return ad.tmean(ad.square(out))


loss = loss_fn()
backward(loss)
print(f"loss {float(loss.data):.6f}")
print(f"w1 grad norm {np.linalg.norm(w1.grad):.6f}")
print(f"w2 grad norm {np.linalg.norm(w2.grad):.6f}")

# the audit used by the acceptance tests: poke coordinates, compare slopes
err = grad_check(loss_fn, {"w1": w1, "w2": w2}, eps=1e-5,
                 max_coords_per_param=6, rng=Rng(7))
print(f"max relative error vs central differences: {err:.2e}")
assert err < 1e-6

# gradients accumulate across backward calls until cleared
w1.grad = None
w2.grad = None
backward(loss_fn())
g_once = w1.grad.copy()
backward(loss_fn())
assert np.allclose(w1.grad, 2.0 * g_once)
print("backward accumulates into .grad, as optimizers expect")

# no_grad suppresses graph building entirely
with no_grad():
    silent = ad.matmul(x, w1)
assert not silent.requires_grad
print("no_grad produces leaf tensors: nothing to backprop, nothing leaked")
