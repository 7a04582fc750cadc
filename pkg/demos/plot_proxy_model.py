"""
Building a proxy model
======================

A client never receives the server's weights. It gets a copy with some
columns zeroed and the rest amplified, then squeezed into a few bits.
"""

import numpy as np

from fedqsn import ModelSpec, MaskSpec, QuantConfig, apply_mask, draw_mask, init_model
from fedqsn.quantization import fake_quantize

spec = ModelSpec(input_dim=6, output_dim=8, init_seed=1)
model = init_model(spec)
print("server weight, first two rows:\n", np.round(model["weight"][:2], 3))

# drop roughly 25% of the output columns; survivors are scaled by 1/(1-p)
mask = draw_mask(model, MaskSpec.server(0.25, seed=7))
masked = apply_mask(model, mask)
print("kept columns:", mask.keep["weight"].astype(int), "amplification", round(mask.amplification, 4))
print("masked weight, first two rows:\n", np.round(masked["weight"][:2], 3))

# two-bit blockwise quantization on top of the mask
proxy = fake_quantize(masked, QuantConfig(bit_width=2, block_size=16))
print("distinct values in the proxy weight:", np.unique(proxy["weight"]).size)
