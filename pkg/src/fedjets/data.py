"""Synthetic datasets and non-i.i.d. client partitions.

Two partitioning strategies are provided: quantity-based label imbalance
(each client holds exactly `labels_per_client` distinct labels) and
distribution-based imbalance (per-label client proportions drawn from a
Dirichlet). "With replacement" means the same dataset sample may appear in
several clients' shards; within one shard samples are unique.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ArtifactError, ConfigError
from .nn import NetSpec
from .seeding import rng_stream

KIND_ANCHOR = "anchor"
KIND_NORMAL = "normal"
KIND_TEST = "test"


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # [N x d]
    labels: np.ndarray  # [N], ints in [0, num_classes)
    num_classes: int
    class_index: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigError("dataset inputs/labels shape mismatch")
        if not self.class_index:
            self.class_index = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]
        for c, idx in enumerate(self.class_index):
            if idx.size == 0:
                raise ConfigError(f"class {c} has no samples")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class ClientShard:
    """One client's local data: indices into a LabeledDataset."""

    client_id: int
    indices: np.ndarray
    label_histogram: np.ndarray
    kind: str
    assigned_expert: int | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.label_histogram = np.asarray(self.label_histogram, dtype=np.int64)
        if self.indices.size == 0:
            raise ConfigError(f"client {self.client_id}: empty shard")
        if self.kind not in (KIND_ANCHOR, KIND_NORMAL, KIND_TEST):
            raise ConfigError(f"unknown shard kind {self.kind!r}")
        if self.kind == KIND_ANCHOR and (self.assigned_expert is None or self.assigned_expert < 0):
            raise ConfigError("anchor shard needs a non-negative assigned expert")

    def __len__(self) -> int:
        return self.indices.size

    @property
    def label_set(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.label_histogram).tolist())


def _histogram(ds: LabeledDataset, indices: np.ndarray) -> np.ndarray:
    return np.bincount(ds.labels[indices], minlength=ds.num_classes)


def _make_shard(ds, client_id, indices, kind, assigned_expert=None) -> ClientShard:
    idx = np.asarray(indices, dtype=np.int64)
    return ClientShard(client_id, idx, _histogram(ds, idx), kind, assigned_expert)


def synth_dataset(
    num_classes: int,
    dim: int,
    per_class: int,
    separation: float,
    seed: int,
    means_seed: int | None = None,
) -> LabeledDataset:
    """Gaussian blobs: class c is N(mu_c, I) with ||mu_c|| = separation.

    Class means are seeded random unit directions scaled by `separation`;
    separation 0 degenerates to indistinguishable classes. Pass the same
    `means_seed` to draw train/test splits from one underlying distribution
    (it defaults to `seed`, keeping a single dataset self-contained).
    """
    if num_classes < 2 or dim < 2 or per_class < 2:
        raise ConfigError("synth_dataset needs num_classes>=2, dim>=2, per_class>=2")
    if separation < 0:
        raise ConfigError("separation must be non-negative")
    means_rng = rng_stream(seed if means_seed is None else means_seed, "synth-means")
    dirs = means_rng.normal(size=(num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    rng = rng_stream(seed, "synth-samples")
    inputs = np.concatenate(
        [means[c] + rng.normal(size=(per_class, dim)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(inputs, labels, num_classes)


def _split_evenly(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def partition_quantity(
    ds: LabeledDataset,
    num_clients: int,
    labels_per_client: int,
    seed: int,
    with_replacement: bool = True,
    samples_per_client: int | None = None,
    start_id: int = 0,
    kind: str = KIND_NORMAL,
) -> list[ClientShard]:
    """Quantity-based label imbalance: every client holds exactly
    `labels_per_client` distinct labels, samples drawn per label."""
    C = ds.num_classes
    if labels_per_client > C:
        raise ConfigError(f"labels_per_client {labels_per_client} exceeds {C} classes")
    if labels_per_client < 1 or num_clients < 1:
        raise ConfigError("labels_per_client and num_clients must be positive")
    if samples_per_client is None:
        samples_per_client = max(labels_per_client, len(ds) // num_clients)
    if samples_per_client < labels_per_client:
        raise ConfigError("samples_per_client smaller than labels_per_client")

    rng = rng_stream(seed, "partition-quantity")
    client_labels = [
        np.sort(rng.choice(C, size=labels_per_client, replace=False))
        for _ in range(num_clients)
    ]
    quotas = [
        dict(zip(labels.tolist(), _split_evenly(samples_per_client, labels_per_client)))
        for labels in client_labels
    ]

    picks: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    if with_replacement:
        for k in range(num_clients):
            for lab, want in quotas[k].items():
                pool = ds.class_index[lab]
                take = min(want, pool.size)
                picks[k].append(rng.choice(pool, size=take, replace=False))
    else:
        for lab in range(C):
            holders = [k for k in range(num_clients) if lab in quotas[k]]
            if not holders:
                continue
            demand = sum(quotas[k][lab] for k in holders)
            pool = ds.class_index[lab]
            if demand > pool.size:
                raise ConfigError(
                    f"label {lab}: demand {demand} exceeds pool {pool.size} without replacement"
                )
            order = rng.permutation(pool)
            off = 0
            for k in holders:
                want = quotas[k][lab]
                picks[k].append(order[off : off + want])
                off += want

    return [
        _make_shard(ds, start_id + k, np.concatenate(picks[k]), kind)
        for k in range(num_clients)
    ]


def partition_dirichlet(
    ds: LabeledDataset,
    num_clients: int,
    alpha: float,
    seed: int,
    start_id: int = 0,
    kind: str = KIND_NORMAL,
    max_retries: int = 100,
) -> list[ClientShard]:
    """Distribution-based label imbalance: per label, client proportions are
    Dirichlet(alpha); per-label assigned counts always sum to the label's
    full sample budget. Clients that end up empty get their proportion
    column redrawn (bounded retries)."""
    if alpha <= 0:
        raise ConfigError("dirichlet alpha must be positive")
    rng = rng_stream(seed, "partition-dirichlet")
    C = ds.num_classes
    # Dirichlet rows via normalized Gammas so one client's column can be redrawn.
    gammas = rng.gamma(alpha, 1.0, size=(C, num_clients))

    counts = None
    for _ in range(max_retries):
        w = gammas / gammas.sum(axis=1, keepdims=True)
        counts = np.zeros((C, num_clients), dtype=np.int64)
        for c in range(C):
            budget = ds.class_index[c].size
            bounds = np.floor(np.cumsum(w[c]) * budget).astype(np.int64)
            bounds[-1] = budget
            counts[c] = np.diff(bounds, prepend=0)
        empty = np.flatnonzero(counts.sum(axis=0) == 0)
        if empty.size == 0:
            break
        gammas[:, empty] = rng.gamma(alpha, 1.0, size=(C, empty.size))
    else:
        raise ConfigError(f"dirichlet partition left a client empty after {max_retries} retries")

    picks: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(C):
        pool = ds.class_index[c]
        for k in range(num_clients):
            if counts[c, k] > 0:
                picks[k].append(rng.choice(pool, size=counts[c, k], replace=False))
    return [
        _make_shard(ds, start_id + k, np.concatenate(picks[k]), kind)
        for k in range(num_clients)
    ]


def make_anchor_shards(
    ds: LabeledDataset,
    num_experts: int,
    labels_per_anchor: int,
    seed: int,
    disjoint: bool = True,
    samples_per_anchor: int | None = None,
) -> list[ClientShard]:
    """The M anchor clients, anchor q pre-assigned to expert q.

    With `disjoint`, anchor label sets are drawn without replacement and are
    pairwise disjoint; otherwise each anchor's label mix is an independent
    Dirichlet(0.1) draw over all classes (overlap permitted).
    """
    C = ds.num_classes
    if disjoint and num_experts * labels_per_anchor > C:
        raise ConfigError(
            f"disjoint anchors need {num_experts * labels_per_anchor} labels but only {C} exist"
        )
    rng = rng_stream(seed, "anchors")
    if samples_per_anchor is None:
        samples_per_anchor = labels_per_anchor * (len(ds) // C)

    shards = []
    if disjoint:
        order = rng.permutation(C)[: num_experts * labels_per_anchor]
        for q in range(num_experts):
            labels = order[q * labels_per_anchor : (q + 1) * labels_per_anchor]
            parts = []
            for lab, want in zip(labels, _split_evenly(samples_per_anchor, labels_per_anchor)):
                pool = ds.class_index[lab]
                parts.append(rng.choice(pool, size=min(max(want, 1), pool.size), replace=False))
            shards.append(_make_shard(ds, q, np.concatenate(parts), KIND_ANCHOR, q))
    else:
        for q in range(num_experts):
            props = rng.dirichlet(np.full(C, 0.1))
            bounds = np.floor(np.cumsum(props) * samples_per_anchor).astype(np.int64)
            bounds[-1] = samples_per_anchor
            want = np.diff(bounds, prepend=0)
            parts = []
            for lab in range(C):
                if want[lab] > 0:
                    pool = ds.class_index[lab]
                    parts.append(rng.choice(pool, size=min(want[lab], pool.size), replace=False))
            if not parts:  # degenerate draw; fall back to one random label
                lab = int(rng.integers(C))
                parts.append(rng.choice(ds.class_index[lab], size=1))
            shards.append(_make_shard(ds, q, np.concatenate(parts), KIND_ANCHOR, q))
    return shards


def make_test_clients(
    ds_test: LabeledDataset,
    num_test_clients: int,
    labels_per_client: int,
    seed: int,
    training_shards: list[ClientShard],
    samples_per_client: int | None = None,
    start_id: int = 0,
    max_tries: int = 1000,
) -> list[ClientShard]:
    """Unseen test clients: each holds a random combination of
    `labels_per_client` labels whose label SET never occurs among the
    training shards (anchors included)."""
    C = ds_test.num_classes
    if labels_per_client > C:
        raise ConfigError("labels_per_client exceeds number of classes")
    seen = {shard.label_set for shard in training_shards}
    if samples_per_client is None:
        mean_size = int(round(np.mean([len(s) for s in training_shards])))
        samples_per_client = max(labels_per_client, mean_size)

    rng = rng_stream(seed, "test-clients")
    shards = []
    for u in range(num_test_clients):
        combo = None
        for _ in range(max_tries):
            cand = frozenset(rng.choice(C, size=labels_per_client, replace=False).tolist())
            if cand not in seen:
                combo = sorted(cand)
                break
        if combo is None:
            raise ConfigError(
                f"could not find an unseen {labels_per_client}-label combination "
                f"after {max_tries} tries (test client {u})"
            )
        parts = []
        for lab, want in zip(combo, _split_evenly(samples_per_client, labels_per_client)):
            pool = ds_test.class_index[lab]
            parts.append(rng.choice(pool, size=min(max(want, 1), pool.size), replace=False))
        shards.append(_make_shard(ds_test, start_id + u, np.concatenate(parts), KIND_TEST))
    return shards


def save_feature_dataset(path, ds: LabeledDataset, meta: dict | None = None) -> None:
    """Ingestion hook: persist a pre-embedded feature dataset in the
    checkpoint container (float32 features, labels in the header)."""
    header = {
        "meta": {
            "kind": "feature_dataset",
            "num_classes": int(ds.num_classes),
            "dim": int(ds.dim),
            "labels": ds.labels.tolist(),
            **(meta or {}),
        },
        "net": NetSpec.mlp((ds.dim, ds.num_classes)).to_dict(),
    }
    blob = checkpoint._pack_header(checkpoint.MAGIC_NET, header)
    data = blob + ds.inputs.astype("<f4").tobytes()
    from pathlib import Path

    Path(path).write_bytes(data)


def load_feature_dataset(path) -> LabeledDataset:
    """Read a feature dataset written by `save_feature_dataset`."""
    from pathlib import Path

    raw = Path(path).read_bytes()
    header, off = checkpoint._read_header(raw, checkpoint.MAGIC_NET, path)
    meta = header.get("meta", {})
    if meta.get("kind") != "feature_dataset":
        raise ArtifactError(f"{path}: not a feature dataset checkpoint")
    labels = np.asarray(meta["labels"], dtype=np.int64)
    dim = int(meta["dim"])
    values = np.frombuffer(raw[off:], dtype="<f4").astype(np.float64)
    if values.size != labels.size * dim:
        raise ArtifactError(f"{path}: feature block does not match {labels.size} x {dim}")
    return LabeledDataset(values.reshape(labels.size, dim), labels, int(meta["num_classes"]))
