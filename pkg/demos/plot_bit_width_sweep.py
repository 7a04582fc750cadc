"""
Sweeping the bit width
======================

Fewer bits give the clients a worse proxy, while the global model barely
notices. Masks are identical across the sweep because every seed is held
fixed.
"""

import numpy as np

from fedqsn import default_config, sweep, with_seed

rows = {bits: [] for bits in (1, 2, 3, 4)}
for seed in range(3):
    for bits, s in zip(rows, sweep(with_seed(default_config(), seed), "bit_width", list(rows), write=False)):
        rows[bits].append((s.best_global, s.best_proxy))

for bits, runs in rows.items():
    g, p = np.mean(runs, axis=0)
    print(f"omega={bits}: best global {g:.4f}, best proxy {p:.4f}")
