"""The two non-i.i.d. partition strategies, side by side.

Quantity-based imbalance fixes the number of distinct labels per client;
distribution-based imbalance draws per-label client shares from a
Dirichlet. Anchor clients get pairwise disjoint label pairs.
"""

import numpy as np

from fedjets import data

ds = data.synth_dataset(num_classes=10, dim=16, per_class=200, separation=4.0, seed=3)


def show(shards, title, limit=6):
    print(f"\n--- {title} ---")
    print("client | size | label histogram")
    for shard in shards[:limit]:
        bars = " ".join(f"{c}:{n}" for c, n in enumerate(shard.label_histogram) if n)
        print(f"{shard.client_id:6d} | {len(shard):4d} | {bars}")


quantity = data.partition_quantity(ds, num_clients=12, labels_per_client=4, seed=0)
show(quantity, "quantity-based (4 labels each)")

dirichlet = data.partition_dirichlet(ds, num_clients=12, alpha=0.1, seed=0)
show(dirichlet, "dirichlet alpha=0.1 (skewed shares)")

top2 = [np.sort(s.label_histogram)[::-1][:2].sum() / len(s) for s in dirichlet]
print(f"\nmedian share of a dirichlet client's mass on its top-2 labels: {np.median(top2):.2f}")

anchors = data.make_anchor_shards(ds, num_experts=5, labels_per_anchor=2, seed=0, disjoint=True)
show(anchors, "disjoint anchors (expert q <-> 2 labels)")
union = sorted(set().union(*(a.label_set for a in anchors)))
print(f"anchor label sets cover: {union}")

tests = data.make_test_clients(ds, 4, 2, 1, quantity + anchors)
show(tests, "unseen test clients (label sets never used in training)")
