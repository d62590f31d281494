"""How the gate learns to route: common-expert embeddings + anchor loss.

Pretrains a common expert, embeds every anchor shard once, then trains the
gate on nothing but the anchors' independent loss and watches per-sample
routing accuracy on held-out clients climb.
"""

from fedjets import central, data, evaluation, gating, nn, runtime
from fedjets.seeding import rng_stream

C, D, M = 10, 16, 5
train = data.synth_dataset(C, D, 200, 4.0, seed=0)
test = data.synth_dataset(C, D, 100, 4.0, seed=1, means_seed=0)

spec = nn.NetSpec.mlp([D, 32, 32, C])
pre = central.pretrain(spec, train, test, 0.93, 40, 0.01, 0.9, 64, seed=0)
common = gating.CommonExpert.from_net(spec, pre.params)
print(f"common expert: {pre.accuracy:.3f} accuracy, embeddings at layer {common.embed_layer} "
      f"(dim {common.embed_dim})")

anchors = data.make_anchor_shards(train, M, 2, seed=0, disjoint=True)
truth = evaluation.routing_ground_truth(anchors)
print("label -> expert map:", truth)

gate = gating.GateNet(
    gating.gate_spec(common.embed_dim, M), nn.init_params(gating.gate_spec(common.embed_dim, M), rng_stream(0, "g"))
)
cache = gating.build_embedding_cache(common, train, anchors)

tests = data.make_test_clients(test, 6, 2, seed=2, training_shards=anchors)
test_cache = gating.build_embedding_cache(common, test, tests)
expert_spec = nn.NetSpec.mlp([D, 32, 32, C])
state = runtime.ServerState(
    expert_spec, gate.spec, [nn.zeros_like(expert_spec) for _ in range(M)], gate.params
)

opt = nn.OptimizerState.fresh(gate.spec, 0.05, 0.0)
for step in range(401):
    if step % 100 == 0:
        state.gate_params = gate.params
        report = evaluation.per_sample_routing_report(
            state, common, tests, test, truth, k=2, cache=test_cache
        )
        print(f"step {step:4d}: routing error {report.average_error_rate:.3f} (chance 0.80)")
    q = step % M
    loss, grad = gating.gate_independent_loss_grad(gate, cache[q], q)
    gate.params, opt = nn.sgdm_step(gate.params, grad, opt)

sel = gating.select_topk(gate, test_cache[tests[0].client_id], 2, tests[0].client_id)
print(f"test client {tests[0].client_id} holds labels {sorted(tests[0].label_set)} "
      f"-> selected experts {sel.indices}")
