"""Build a tiny computation, backpropagate, and compare against finite differences."""

import numpy as np

from refinerec import tensor as T
from refinerec.gradcheck import check_gradients
from refinerec.tensor import Parameter, Tensor

rng = np.random.default_rng(0)
W = Parameter(rng.normal(size=(4, 4)), "W")
x = Tensor(rng.normal(size=(3, 4)))
target = Tensor(rng.normal(size=(3, 4)))
mask = np.tril(np.ones((3, 4), dtype=bool))


def loss():
    weights = T.softmax_rows(x @ W, mask)    # masked entries are exactly 0
    return (weights * target).sum() + T.log_sigmoid(x @ W).mean()


print(f"loss = {loss().item():.6f}")
res = check_gradients(loss, [W])
print(f"worst relative error, tape vs central differences: {res.worst:.2e}")
print("gradient of W:\n", np.round(W.grad, 4))
