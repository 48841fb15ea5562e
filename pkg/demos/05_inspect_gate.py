"""Look inside a trained gate: selection weights, sparsity, attention maps.

Selection weights start at exactly 1.0 — every channel fully on — and 1.0
sits on the clip boundary, where the clamp's gradient is defined as 0. A
plain gradient step therefore never moves a weight that is exactly on the
boundary: pruning shows up only once weights are pushed inside [0,1) by
some other means. The report below reflects that honestly, first on the
trained model, then on a hand-pruned copy.
"""

import os
import tempfile

import numpy as np

from satgate import (
    SyntheticSpec,
    TrainConfig,
    build_model,
    export_gray_image,
    generate_synthetic,
    reference_spec,
    sparsity_report,
    train,
)

samples = generate_synthetic(SyntheticSpec(
    spatial_rank=2, extent=32, n_samples=60, shapes=("blobs",),
    noise_sigma=0.3, contrast=1.0, seed=0))

model = build_model(reference_spec("unet", "sat"), seed=0)
train(model, samples[:48], samples[48:],
      TrainConfig(epochs=8, batch_size=8, seed=0))


def show_report(m, label):
    print(label)
    for row in sparsity_report(m):
        bars = "".join("#" if n else "." for n in row["histogram"])
        print(f"  {row['gate']}: {row['channels']} channels, "
              f"{100 * row['channels_off']:.0f}% off   "
              f"clipped-weight histogram |{bars}|")
    print()


# all weights are still exactly 1.0: on the boundary, nothing pruned
show_report(model, "after training (weights remain at the all-on boundary):")

# push some weights off the boundary by hand to see the report move
pruned = build_model(reference_spec("unet", "sat"), seed=0)
rng = np.random.default_rng(3)
for gate in pruned.gates:
    w = gate.select_weights.data
    w[...] = rng.uniform(-0.4, 1.1, w.size)  # some negative -> clipped off
show_report(pruned, "same architecture with hand-scattered weights:")

# --- attention and prediction maps ------------------------------------------
sample = samples[48]
capture = {}
logits = model.forward(sample.image[..., np.newaxis], training=False,
                       capture=capture)

out_dir = tempfile.mkdtemp(prefix="gate_maps_")
written = []
for gate in model.gates:
    f_a = capture[f"{gate.name}.f_a"]
    written += export_gray_image(f_a.data[..., 0, 0],
                                 os.path.join(out_dir, f"{gate.name}.pgm"))
prob = 1.0 / (1.0 + np.exp(-logits.data[..., 0, 0]))
written += export_gray_image((prob >= 0.5).astype(float),
                             os.path.join(out_dir, "pred.pgm"))
written += export_gray_image(sample.mask[..., 0],
                             os.path.join(out_dir, "truth.pgm"))

print(f"wrote {len(written)} grayscale maps:")
for path in written:
    print(f"  {path}")
# view them with any PGM-aware tool, e.g. `feh`, GIMP, or ImageMagick
