"""Count what the gated skips save.

A pass-through skip concatenates all of its channels onto the decoder, so
the first decoder convolution pays for every one of them. A gate that
transfers a single attention channel shrinks that convolution's input
width from C_skip + C_decoder to 1 + C_decoder.
"""

from satgate import (
    GateVariant,
    build_model,
    concat_input_width,
    count_params,
    reference_spec,
)

# --- the width arithmetic at one decoder level ------------------------------
for variant in ("org", "sat"):
    v = GateVariant.parse(variant)
    width = concat_input_width(v, c_skip=256, c_decoder=256)
    print(f"{variant:>4}: 256-channel skip + 256-channel decoder -> "
          f"conv input width {width}")
print()

# --- whole-model totals for the three reference families --------------------
for family in ("unet", "vnet", "tiramisu"):
    totals = {}
    for name in ("org", "st", "at", "sat"):
        spec = reference_spec(family, GateVariant.parse(name))
        totals[name] = count_params(build_model(spec, seed=0))["total"]
    print(f"{family}:")
    for name, n in totals.items():
        delta = 100.0 * abs(totals["org"] - n) / totals["org"]
        note = ("baseline" if n == totals["org"] else
                f"{delta:.1f}% {'fewer' if n < totals['org'] else 'more'} than org")
        print(f"  {name:>4}: {n:>7} params  ({note})")
    print()

# The dense-block family saves the most: its blocks re-concatenate their
# whole input downstream, so collapsing each long skip to one channel
# narrows every later layer in the block, not just the first.
