"""Tour of the dense-network engine: forward, loss gradients, SGDM.

Builds a small classifier on Gaussian blobs, verifies the analytic
gradient against central finite differences, then trains it for a few
hundred steps.
"""

import numpy as np

from fedjets import central, data, nn
from fedjets.seeding import rng_stream

print("=== dense-net engine ===")

ds = data.synth_dataset(num_classes=4, dim=8, per_class=120, separation=4.0, seed=0)
holdout = data.synth_dataset(4, 8, 60, 4.0, seed=1, means_seed=0)
spec = nn.NetSpec.mlp([8, 16, 4])
params = nn.init_params(spec, rng_stream(0, "demo-net"))
print(f"network {spec.layer_dims}, {spec.param_count()} parameters")

batch = nn.Batch(ds.inputs[:16], ds.labels[:16])
loss, grad = nn.loss_and_grad(spec, params, batch, "ce_on_logits")
print(f"initial batch loss {loss:.4f} (uniform would be {np.log(4):.4f})")

# spot-check the gradient with central differences on a few coordinates
rng = rng_stream(0, "demo-fd")
coords = rng.choice(params.values.size, size=8, replace=False)
h = 1e-5
worst = 0.0
for i in coords:
    up, down = params.values.copy(), params.values.copy()
    up[i] += h
    down[i] -= h
    fd = (
        nn.loss_value(spec, nn.ParamVector(up, params.spec_hash), batch, "ce_on_logits")
        - nn.loss_value(spec, nn.ParamVector(down, params.spec_hash), batch, "ce_on_logits")
    ) / (2 * h)
    worst = max(worst, abs(fd - grad.values[i]))
print(f"finite-difference spot check, worst abs deviation: {worst:.2e}")

opt = nn.OptimizerState.fresh(spec, lr=0.05, momentum=0.9)
order = rng.permutation(len(ds))
for step in range(300):
    rows = order[(step * 16) % (len(ds) - 16) : (step * 16) % (len(ds) - 16) + 16]
    b = nn.Batch(ds.inputs[rows], ds.labels[rows])
    _, g = nn.loss_and_grad(spec, params, b, "ce_on_logits")
    params, opt = nn.sgdm_step(params, g, opt)

acc = central.model_accuracy(spec, params, holdout.inputs, holdout.labels)
print(f"accuracy after 300 SGDM steps: {acc:.3f}")
