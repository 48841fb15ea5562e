"""Walk through one gated skip connection step by step.

Feature maps are laid out [spatial..., channel, batch]. A gate takes the
encoder map f, reweights its channels through clipped weights W (select),
collapses the result to a single sigmoid attention map (attend), and passes
that one channel to the decoder (transfer). The ablations keep subsets of
those stages.
"""

import numpy as np

from satgate import GateParams, GateVariant, Tensor, gate_forward, trelu

rng = np.random.default_rng(0)

# a toy 4x4 encoder map with 6 channels, batch of 1
f = Tensor(rng.normal(size=(4, 4, 6, 1)))

# --- the clipped weights ----------------------------------------------------
# trelu clamps to [0, 1]: below 0 a channel is fully off, above 1 it is
# passed unchanged, in between it is scaled.
grid = Tensor(np.array([-2.0, -0.5, 0.0, 0.3, 0.5, 1.0, 1.7, 100.0]))
print("w      :", grid.data)
print("trelu_w:", trelu(grid).data)
print()

# --- the four variants ------------------------------------------------------
for name in ("org", "st", "at", "sat"):
    variant = GateVariant.parse(name)
    params = GateParams.create("demo", variant, channels=6, spatial_rank=2,
                               rng=np.random.default_rng(1))
    out = gate_forward(f, variant, params)
    extras = []
    if params.select_weights is not None:
        extras.append(f"W of {params.select_weights.data.size}")
    if params.attend_kernel is not None:
        extras.append(f"K of {params.attend_kernel.data.size}")
    print(f"{name:>4}: payload channels = {out.transferred.shape[-2]}, "
          f"learnables: {', '.join(extras) if extras else 'none'}")
print()

# --- turning a channel off --------------------------------------------------
# Set one selection weight to zero; the gate output no longer depends on
# that channel at all, down to the last bit.
params = GateParams.create("demo", GateVariant.SAT, 6, 2,
                           np.random.default_rng(2))
params.select_weights.data[3] = 0.0

out_a = gate_forward(f, GateVariant.SAT, params)
scrambled = f.data.copy()
scrambled[..., 3, :] = rng.normal(scale=1e6, size=(4, 4, 1))
out_b = gate_forward(Tensor(scrambled), GateVariant.SAT, params)

same = out_a.transferred.data.tobytes() == out_b.transferred.data.tobytes()
print(f"channel 3 weight set to 0; scrambling channel 3 changes nothing: {same}")

# the attention map is a probability field over the spatial grid
print(f"attention map range: [{out_a.f_a.data.min():.3f}, "
      f"{out_a.f_a.data.max():.3f}] (sigmoid output)")
