"""
Reverse-mode differentiation on a tape
======================================

Every forward operation inside a ``Tape`` is recorded; ``backward`` walks
the record in reverse and accumulates gradients. Finite differences check
the result.
"""
import numpy as np

from unigraph import autodiff as ad
from unigraph.autodiff import Tape, Tensor, grad_check
from unigraph.graph import make_rng

rng = make_rng(1)

# A logistic link-prediction loss on node embeddings
y = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="Y")
adj = np.array([[0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]], dtype=float)


def loss():
    return ad.bce(ad.sigmoid(ad.matmul(y, ad.transpose(y))), adj)


with Tape() as tape:
    value = loss()
tape.backward(value)
print(f"loss {value.item():.4f}")
print("analytic gradient:\n", np.round(y.grad, 4))

# Central differences agree to high relative precision
print(f"finite-difference relative error: {grad_check(loss, y):.2e}")

# The same machinery covers batch norm and dropout; dropout is seeded so
# repeated calls draw the same mask
x = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
a = ad.dropout(x, 0.5, 7, train=True).data
b = ad.dropout(x, 0.5, 7, train=True).data
print("dropout masks repeat for a fixed seed:", np.array_equal(a, b))
