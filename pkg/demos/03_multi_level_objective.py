"""
Training with both label levels at once
=======================================

DNN3 keeps DNN2's network and adds a 3-way head on the top hidden layer.
The loss mixes both cross entropies with weight alpha on the 15-way part.
"""

# %%
import numpy as np

from hieracoustic.network import build_network, cross_entropy, forward, multi_level_loss
from hieracoustic.taxonomy import default_taxonomy
from hieracoustic.training import attach_high_head

tax = default_taxonomy()
rng = np.random.default_rng(0)

# %%
# Adding the head leaves the 15-way output untouched.
dnn2 = build_network(440, 15, hidden_sizes=(64, 64), seed=1)
dnn3 = attach_high_head(dnn2, 3, seed=1)
x = rng.standard_normal((8, 440)).astype(np.float32)
print("low-head outputs unchanged:", np.array_equal(forward(dnn2, x).p_low, forward(dnn3, x).p_low))

# %%
# The loss is linear in alpha; the endpoints are the two plain cross entropies.
cache = forward(dnn3, x)
low = rng.integers(0, 15, 8)
d_low = np.eye(15)[low]
d_high = np.eye(3)[tax.lift_labels(low)]
ce_low = cross_entropy(cache.p_low, d_low)
ce_high = cross_entropy(cache.p_high, d_high)
for alpha in (0.0, 0.3, 0.6, 1.0):
    loss = multi_level_loss(cache.p_low, cache.p_high, d_low, d_high, alpha)
    print(f"alpha={alpha:.1f}  loss={loss:8.4f}  check={alpha * ce_low + (1 - alpha) * ce_high:8.4f}")
