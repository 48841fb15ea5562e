"""Check analytic gradients against central finite differences.

Every gradient this library produces can be cross-examined the slow way:
nudge one input component by +/- eps, re-run the forward pass, and compare
the slope to what backpropagation claims. This script does it once by hand
for a convolution, then runs the bundled suite over every op.
"""

import numpy as np

from satgate import ConvSpec, Tensor, conv_nd, finite_diff_grad, sum_all
from satgate.gradcheck import run_checks

rng = np.random.default_rng(0)

# --- one convolution, checked by hand --------------------------------------
spec = ConvSpec(spatial_rank=2, kernel_extent=(3, 3), in_channels=2,
                out_channels=3, padding=(1, 1))
x = Tensor(rng.normal(size=(5, 5, 2, 1)), requires_grad=True)
k = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
b = Tensor(rng.normal(size=(3,)), requires_grad=True)
coeff = Tensor(rng.normal(size=(5, 5, 3, 1)))  # random linear readout


def scalar_output(inp):
    return sum_all(conv_nd(inp, k, spec, bias=b) * coeff)


loss = scalar_output(x)
loss.backward()

numeric = finite_diff_grad(scalar_output, x)
worst = np.max(np.abs(x.grad - numeric.data) / (np.abs(numeric.data) + 1e-12))
print(f"conv input gradient vs finite differences, worst rel err: {worst:.2e}")

# --- the full suite ---------------------------------------------------------
# Covers arithmetic, activations, batchnorm, pooling, resizing, the gate,
# the losses, and an end-to-end encoder-decoder model.
results = run_checks(seed=0)
for r in results:
    print(f"  {r.name:<12} worst rel err {r.worst_rel:.3e}  "
          f"{'ok' if r.passed else 'FAILED'}")
print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
