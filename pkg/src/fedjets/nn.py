"""Minimal dense-network engine: forward, losses, backprop, SGD with momentum.

Everything here is a pure function of its inputs. Parameters live in flat
float64 vectors (`ParamVector`) so that federated averaging, checkpointing
and finite-difference checks all operate on one representation.

Parameter layout for layer dims (d0, d1, ..., dL): for each layer l the
weight matrix W_l of shape (d_l, d_{l+1}) in row-major order, followed by
the bias b_l of length d_{l+1}.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

LOG_CLAMP = 1e-12

HIDDEN_ACTIVATIONS = ("relu", "identity")
OUTPUT_HEADS = ("logits", "softmax")
LOSS_KINDS = ("ce_on_logits", "ce_on_mixture")


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a dense network.

    `layer_dims` includes the input dimension, so a spec with L+1 dims has
    L weight layers. `activations` has one entry per hidden layer (L-1
    entries); the output layer is always linear, with `head` describing how
    its output is interpreted (`logits` are raw scores, `softmax` means
    `forward` returns row-normalized probabilities).
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    head: str = "logits"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(dims) < 2:
            raise ConfigError(f"NetSpec needs at least 2 layer dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")
        if len(self.activations) != len(dims) - 2:
            raise ConfigError(
                f"expected {len(dims) - 2} hidden activations for dims {dims}, "
                f"got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in HIDDEN_ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        if self.head not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output head {self.head!r}")

    @classmethod
    def mlp(cls, layer_dims, activation: str = "relu", head: str = "logits") -> "NetSpec":
        """Spec with the same activation on every hidden layer."""
        dims = tuple(int(d) for d in layer_dims)
        return cls(dims, (activation,) * max(0, len(dims) - 2), head)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[l] * dims[l + 1] + dims[l + 1] for l in range(self.num_layers))

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        try:
            return cls(tuple(d["layer_dims"]), tuple(d["activations"]), d["head"])
        except KeyError as exc:
            raise ConfigError(f"net spec dict missing key {exc}") from exc


def spec_hash(spec: NetSpec) -> str:
    """Short stable checksum binding a ParamVector to its NetSpec."""
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ParamVector:
    """Flat parameter block for one network."""

    values: np.ndarray
    spec_hash: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError(f"ParamVector must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("ParamVector contains non-finite values")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_hash)


@dataclass
class Batch:
    """Labeled minibatch: inputs [n x d], integer class labels [n]."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigError(f"batch inputs must be [n x d] with n >= 1, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError("batch labels must be one integer per input row")
        if not np.all(np.isfinite(self.inputs)):
            raise NumericError("batch inputs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class OptimizerState:
    """SGD-with-momentum state for one ParamVector."""

    velocity: np.ndarray
    lr: float
    momentum: float

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def fresh(cls, spec: NetSpec, lr: float, momentum: float) -> "OptimizerState":
        return cls(np.zeros(spec.param_count()), lr, momentum)


def check_compat(spec: NetSpec, params: ParamVector, *, where: str = "") -> None:
    """Raise ConfigError unless `params` belongs to `spec`."""
    if params.spec_hash != spec_hash(spec):
        raise ConfigError(f"parameter/spec checksum mismatch {where}".strip())
    if params.values.shape[0] != spec.param_count():
        raise ConfigError(
            f"parameter length {params.values.shape[0]} != spec count {spec.param_count()} {where}".strip()
        )


def init_params(spec: NetSpec, rng: np.random.Generator) -> ParamVector:
    """Per-layer uniform weights in [-a, a] with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    dims = spec.layer_dims
    chunks = []
    for l in range(spec.num_layers):
        fan_in, fan_out = dims[l], dims[l + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec_hash(spec))


def zeros_like(spec: NetSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.param_count()), spec_hash(spec))


def unpack(spec: NetSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views."""
    dims = spec.layer_dims
    out = []
    off = 0
    for l in range(spec.num_layers):
        fan_in, fan_out = dims[l], dims[l + 1]
        w = values[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = values[off : off + fan_out]
        off += fan_out
        out.append((w, b))
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true labels.

    Probabilities are clamped at 1e-12 before the log; rows are expected to
    be (approximately) normalized but this is not re-checked here.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward_trace(spec: NetSpec, params: ParamVector, inputs: np.ndarray):
    """Forward pass keeping every layer's pre-activation and activation.

    Returns (pre_acts, acts) where acts[0] is the input and acts[l+1] the
    output of layer l (post-activation for hidden layers, raw for the
    output layer, no head applied).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(
            f"input shape {x.shape} incompatible with spec input dim {spec.input_dim}"
        )
    layers = unpack(spec, params.values)
    pre_acts = []
    acts = [x]
    h = x
    for l, (w, b) in enumerate(layers):
        z = h @ w + b
        pre_acts.append(z)
        if l < spec.num_layers - 1:
            h = _apply_activation(z, spec.activations[l])
        else:
            h = z
        acts.append(h)
    return pre_acts, acts


def forward(spec: NetSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Network output: raw logits for a `logits` head, probabilities for `softmax`."""
    check_compat(spec, params, where="(forward)")
    _, acts = _forward_trace(spec, params, inputs)
    out = acts[-1]
    if spec.head == "softmax":
        out = softmax(out)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output", context="forward")
    return out


def forward_to_layer(spec: NetSpec, params: ParamVector, inputs: np.ndarray, layer: int) -> np.ndarray:
    """Activations after layer `layer` (0-based), before the output head.

    For hidden layers this is the post-activation value; for the final
    layer it is the raw pre-head output.
    """
    check_compat(spec, params, where="(forward_to_layer)")
    if not (0 <= layer < spec.num_layers):
        raise ConfigError(f"layer index {layer} out of range for {spec.num_layers} layers")
    _, acts = _forward_trace(spec, params, inputs)
    return acts[layer + 1]


def backward_from_output_grad(
    spec: NetSpec,
    params: ParamVector,
    inputs: np.ndarray,
    output_grad: np.ndarray,
) -> np.ndarray:
    """Vector-Jacobian product: gradient of sum(output * output_grad) w.r.t. params.

    `output_grad` is the loss gradient at the network's pre-head output.
    Returns a flat float64 gradient; raises NumericError naming the first
    layer whose gradient turns non-finite.
    """
    layers = unpack(spec, params.values)
    pre_acts, acts = _forward_trace(spec, params, inputs)
    grads = [None] * spec.num_layers
    dz = np.asarray(output_grad, dtype=np.float64)
    for l in range(spec.num_layers - 1, -1, -1):
        if l < spec.num_layers - 1 and spec.activations[l] == "relu":
            dz = dz * (pre_acts[l] > 0.0)
        w, _ = layers[l]
        gw = acts[l].T @ dz
        gb = dz.sum(axis=0)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite gradient", layer=l)
        grads[l] = (gw, gb)
        if l > 0:
            dz = dz @ w.T
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Backprop through a row-wise softmax: dL/dz = p * (g - sum(g*p))."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def loss_and_grad(spec: NetSpec, params: ParamVector, batch: Batch, loss_kind: str):
    """Mean cross-entropy loss and its parameter gradient.

    `ce_on_logits` (requires a `logits` head): CE applied to softmax of the
    network output. `ce_on_mixture` (requires a `softmax` head): CE applied
    directly to the probability output, with the 1e-12 log clamp.
    """
    check_compat(spec, params, where="(backward)")
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    n = len(batch)
    if batch.labels.min() < 0 or batch.labels.max() >= spec.output_dim:
        raise ConfigError("batch labels out of range for network output dim")
    _, acts = _forward_trace(spec, params, batch.inputs)
    z_out = acts[-1]
    onehot = np.zeros((n, spec.output_dim))
    onehot[np.arange(n), batch.labels] = 1.0

    if loss_kind == "ce_on_logits":
        if spec.head != "logits":
            raise ConfigError("ce_on_logits requires a logits head")
        probs = softmax(z_out)
        loss = cross_entropy(probs, batch.labels)
        dz = (probs - onehot) / n
    else:
        if spec.head != "softmax":
            raise ConfigError("ce_on_mixture requires a softmax head")
        probs = softmax(z_out)
        loss = cross_entropy(probs, batch.labels)
        picked = probs[np.arange(n), batch.labels]
        dprobs = np.zeros_like(probs)
        # clamped entries contribute zero gradient
        live = picked > LOG_CLAMP
        dprobs[np.arange(n)[live], batch.labels[live]] = -1.0 / (n * picked[live])
        dz = softmax_vjp(probs, dprobs)

    grad = backward_from_output_grad(spec, params, batch.inputs, dz)
    return loss, ParamVector(grad, params.spec_hash)


def backward(spec: NetSpec, params: ParamVector, batch: Batch, loss_kind: str) -> ParamVector:
    """Gradient of the mean cross-entropy loss w.r.t. all parameters."""
    return loss_and_grad(spec, params, batch, loss_kind)[1]


def loss_value(spec: NetSpec, params: ParamVector, batch: Batch, loss_kind: str) -> float:
    """Loss alone, on the exact code path used by `backward` (handy for oracles)."""
    check_compat(spec, params, where="(loss)")
    _, acts = _forward_trace(spec, params, batch.inputs)
    probs = softmax(acts[-1])
    return cross_entropy(probs, batch.labels)


def mixture_forward(
    expert_spec: NetSpec,
    expert_params: list[ParamVector],
    gate_weights: np.ndarray,
    inputs: np.ndarray,
) -> np.ndarray:
    """Per-sample weighted sum of expert logits.

    `gate_weights[j, k]` is the gate score of sample j for the k-th expert
    in `expert_params` (the selected-expert entries of the gate output, not
    renormalized unless the caller chose to).
    """
    if len(expert_params) == 0:
        raise ConfigError("mixture_forward needs at least one expert")
    w = np.asarray(gate_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != len(expert_params):
        raise ConfigError(
            f"gate weights {w.shape} do not match {len(expert_params)} experts"
        )
    combined = None
    for k, params in enumerate(expert_params):
        logits = forward(expert_spec, params, inputs)
        term = w[:, k : k + 1] * logits
        combined = term if combined is None else combined + term
    return combined


def sgdm_step(params: ParamVector, grad: ParamVector, opt: OptimizerState):
    """One SGD-with-momentum step: v' = m*v + g; p' = p - lr*v'.

    Returns (new_params, new_state); inputs are left untouched.
    """
    if grad.values.shape != params.values.shape:
        raise ConfigError("gradient length does not match parameters")
    if opt.velocity.shape != params.values.shape:
        raise ConfigError("velocity length does not match parameters")
    v = opt.momentum * opt.velocity + grad.values
    new_values = params.values - opt.lr * v
    return (
        ParamVector(new_values, params.spec_hash),
        OptimizerState(v, opt.lr, opt.momentum),
    )
