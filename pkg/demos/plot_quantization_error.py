"""
Quantization error against bit width
====================================

Blockwise absmax quantization keeps each element within half a step of
its original value. The step shrinks as the bit width grows.
"""

import numpy as np

from fedqsn import QuantConfig
from fedqsn.quantization import block_error_bounds, dequantize_tensor, quantize_tensor

x = np.random.default_rng(0).normal(size=4096).astype(np.float32)

for bits in (2, 3, 4, 8):
    cfg = QuantConfig(bits, block_size=256)
    q = quantize_tensor(x, cfg)
    err = np.abs(dequantize_tensor(q, cfg) - x)
    bound = block_error_bounds(x, cfg)
    print(f"{bits} bits: max error {err.max():.4f}, mean error {err.mean():.4f}, "
          f"within bound everywhere: {bool(np.all(err <= bound + 1e-6))}")

# the hand-worked block from the docs
q = quantize_tensor(np.array([1.0, -2.0, 0.5, 2.0], dtype=np.float32), QuantConfig(4, 4))
print("codes", q.codes.tolist(), "scale", q.scales.tolist())
