"""
Secure aggregation
==================

Each pair of clients shares a seed. One adds the derived noise and the
other subtracts it, so the server only sees noise per client while the
sum comes out unchanged.
"""

import numpy as np

from fedqsn import ClientUpdate, ModelState, aggregate, secure_aggregate
from fedqsn.protocol import masked_contributions, pair_seed_matrix

rng = np.random.default_rng(3)
updates = [ClientUpdate(i, ModelState({"w": rng.normal(size=4)}), n) for i, n in enumerate((10, 30, 60))]
seeds = pair_seed_matrix(master_seed=0, round=1, client_ids=[0, 1, 2])

for u, seen in zip(updates, masked_contributions(updates, seeds)):
    print(f"client {u.client_id}: true {np.round(u.model['w'], 3)}  server sees {np.round(seen, 3)}")

print("plain  ", np.round(aggregate(updates)["w"], 6))
print("secure ", np.round(secure_aggregate(updates, seeds)["w"], 6))
