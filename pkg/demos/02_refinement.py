"""What each refinement mechanism does to one causal score matrix."""

import numpy as np

from refinerec import oracles
from refinerec import tensor as T
from refinerec.refine import refine_add, refine_simp, refine_stoc, refine_value_causal
from refinerec.tensor import Tensor

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(1)
n = 5
causal = np.tril(np.ones((n, n), dtype=bool))
A = np.where(causal, rng.normal(size=(n, n)), 0.0)
W = [Tensor(rng.normal(size=(n, n)) / np.sqrt(n)) for _ in range(3)]

print("first-level scores A (future entries zeroed):\n", A)
refined = {
    "simp": refine_simp(Tensor(A), W[0], W[1], d=4),
    "value": refine_value_causal(Tensor(A), *W),
    "add": refine_add(Tensor(A), W[0], W[1], d=4),
    "stoc": refine_stoc(Tensor(A), W[0], W[1]),
}
for name, B in refined.items():
    weights = T.softmax_rows(Tensor(np.where(causal, B.data, 0.0)), causal).data
    print(f"\n{name}: refined scores B\n{np.where(causal, B.data, 0.0)}")
    print(f"{name}: final weights (rows sum to 1)\n{weights}")

zero = Tensor(np.zeros((n, n)))
half = refine_add(Tensor(A), zero, zero, d=4).data
print("\nwith zero refinement weights, add keeps each row's argmax:",
      np.array_equal(half.argmax(1), A.argmax(1)))
print("loop oracle agrees with simp:",
      np.allclose(refined["simp"].data, oracles.refine_simp(A, W[0].data, W[1].data, 4), atol=1e-12))
