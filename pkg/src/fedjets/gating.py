"""Common-expert embeddings, gate scoring, top-K selection, anchor loss.

The common expert is a frozen feature extractor: each client embeds its
local data once and the cache is reused for every gate decision afterwards.
The gate is a small MLP with a softmax head whose output dimension is the
number of experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import ClientShard, LabeledDataset
from .errors import ConfigError


@dataclass(frozen=True)
class CommonExpert:
    """Frozen pretrained network used only through its embeddings."""

    spec: nn.NetSpec
    params: nn.ParamVector
    embed_layer: int

    def __post_init__(self):
        if not (0 <= self.embed_layer < self.spec.num_layers):
            raise ConfigError(
                f"embed_layer {self.embed_layer} out of range for {self.spec.num_layers} layers"
            )

    @classmethod
    def from_net(cls, spec: nn.NetSpec, params: nn.ParamVector, embed_layer: int | None = None):
        """Default embedding point: the penultimate layer."""
        if embed_layer is None:
            embed_layer = max(0, spec.num_layers - 2)
        return cls(spec, params.copy(), embed_layer)

    @property
    def embed_dim(self) -> int:
        return self.spec.layer_dims[self.embed_layer + 1]


def embed_inputs(common: CommonExpert, inputs: np.ndarray) -> np.ndarray:
    """One-time inference: activations of the common expert at embed_layer."""
    return nn.forward_to_layer(common.spec, common.params, inputs, common.embed_layer)


def embed_all(common: CommonExpert, shard: ClientShard, ds: LabeledDataset) -> np.ndarray:
    """Embeddings for every sample of one client's shard (row-aligned with
    shard.indices)."""
    return embed_inputs(common, ds.inputs[shard.indices])


def build_embedding_cache(
    common: CommonExpert, ds: LabeledDataset, shards: list[ClientShard]
) -> dict[int, np.ndarray]:
    return {shard.client_id: embed_all(common, shard, ds) for shard in shards}


@dataclass
class GateNet:
    """Expert-ranking network: embeddings -> softmax scores over M experts."""

    spec: nn.NetSpec
    params: nn.ParamVector

    def __post_init__(self):
        if self.spec.head != "softmax":
            raise ConfigError("gate network must have a softmax head")

    @property
    def num_experts(self) -> int:
        return self.spec.output_dim

    def copy(self) -> "GateNet":
        return GateNet(self.spec, self.params.copy())


def gate_spec(embed_dim: int, num_experts: int, hidden: int | None = None) -> nn.NetSpec:
    """Two-layer MLP with softmax head; hidden width defaults to 4*M."""
    if hidden is None:
        hidden = 4 * num_experts
    return nn.NetSpec.mlp((embed_dim, hidden, num_experts), head="softmax")


@dataclass
class ExpertSelection:
    """Top-K expert choice for one client."""

    client_id: int
    indices: tuple[int, ...]
    aggregate_scores: np.ndarray

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        self.aggregate_scores = np.asarray(self.aggregate_scores, dtype=np.float64)
        if list(self.indices) != sorted(set(self.indices)):
            raise ConfigError("selection indices must be sorted and distinct")


def gate_scores(gate: GateNet, embeddings: np.ndarray) -> np.ndarray:
    """Per-sample softmax distribution over experts, [n x M]."""
    return nn.forward(gate.spec, gate.params, embeddings)


def select_topk(gate: GateNet, embeddings: np.ndarray, k: int, client_id: int = -1) -> ExpertSelection:
    """TopK of the column-summed gate scores; ties broken toward the lowest
    expert index; returned indices sorted ascending."""
    m = gate.num_experts
    if not (1 <= k <= m):
        raise ConfigError(f"top_k {k} out of range for {m} experts")
    aggregate = gate_scores(gate, embeddings).sum(axis=0)
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((np.arange(m), -aggregate))
    chosen = np.sort(order[:k])
    return ExpertSelection(client_id, tuple(chosen.tolist()), aggregate)


def gate_independent_loss_grad(
    gate: GateNet, embeddings: np.ndarray, anchor_expert: int
) -> tuple[float, nn.ParamVector]:
    """Anchor loss: cross-entropy between the gate output and the one-hot
    encoding of the anchor's assigned expert, averaged over the shard."""
    if not (0 <= anchor_expert < gate.num_experts):
        raise ConfigError(f"anchor expert {anchor_expert} out of range")
    labels = np.full(embeddings.shape[0], anchor_expert, dtype=np.int64)
    batch = nn.Batch(embeddings, labels)
    return nn.loss_and_grad(gate.spec, gate.params, batch, "ce_on_mixture")
