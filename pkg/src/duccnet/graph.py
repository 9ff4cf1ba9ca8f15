"""Layer graph: forward and reverse-mode backward over a small DAG.

Not a general autodiff engine. Exactly ten node kinds exist (Input, Conv2D,
BatchNorm, ReLU, Sigmoid, MaxPool2, Dense, Dropout, Flatten, AddMerge) and
the backward pass knows each one explicitly. The DAG supports bifurcation
(fan-out with gradient accumulation), skip paths, and two-input AddMerge
nodes; everything else is a chain.

A forward pass returns a GradTape holding every node output plus the few
per-node extras backward needs (pool argmax, dropout mask, BN cache). Tapes
carry the graph's parameter version; backward refuses a tape whose version
no longer matches (parameters changed since the forward).
"""

from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    ConvSpec,
    add,
    conv2d,
    conv2d_backward,
    conv_out_size,
    maxpool2,
    maxpool2_backward,
)
from .rng import TAG_DROPOUT, derive_rng

NODE_KINDS = (
    "Input",
    "Conv2D",
    "BatchNorm",
    "ReLU",
    "Sigmoid",
    "MaxPool2",
    "Dense",
    "Dropout",
    "Flatten",
    "AddMerge",
)


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    gamma and beta are trainable; the moving statistics are not, they feed
    inference. Momentum is the weight on the old moving value.
    """

    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def for_channels(cls, c, eps=1e-3, momentum=0.99, dtype=np.float32):
        return cls(
            gamma=np.ones(c, dtype=dtype),
            beta=np.zeros(c, dtype=dtype),
            moving_mean=np.zeros(c, dtype=dtype),
            moving_var=np.ones(c, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # Conv2D/Dense: W, B
    spec: "ConvSpec | None" = None
    bn: "BatchNormState | None" = None
    rate: float = 0.5  # Dropout only
    input_shape: "tuple | None" = None  # Input only, (H, W, C)
    out_shape: "tuple | None" = None  # filled by shape propagation

    def param_items(self):
        if self.kind == "BatchNorm":
            return [("gamma", self.bn.gamma), ("beta", self.bn.beta)]
        return list(self.params.items())


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind):
    """Elementwise ReLU or Sigmoid."""
    if kind == "ReLU":
        return np.maximum(x, 0)
    if kind == "Sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def dropout(x, rate=0.5, mode="train", rng=None):
    """Inverted dropout: train mode zeroes with probability rate and scales
    survivors by 1/(1-rate); infer mode is the identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    mask = rng.random(x.shape) >= rate
    return x * mask * x.dtype.type(1.0 / (1.0 - rate))


def batchnorm_forward(x, state, mode="train", cache=None):
    """Normalize per channel (last axis) over all other axes.

    Train mode uses the biased mini-batch statistics, applies gamma and
    beta, and updates the moving statistics in place. Infer mode uses the
    moving statistics. Pass a dict as cache to receive what backward needs.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs batch size >= 2")
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        ivar = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
        xhat = (x - mean) * ivar
        mom = state.momentum
        state.moving_mean *= mom
        state.moving_mean += (1.0 - mom) * mean.astype(state.moving_mean.dtype)
        state.moving_var *= mom
        state.moving_var += (1.0 - mom) * var.astype(state.moving_var.dtype)
        if cache is not None:
            cache["xhat"] = xhat
            cache["ivar"] = ivar
        return state.gamma * xhat + state.beta
    ivar = 1.0 / np.sqrt(state.moving_var + x.dtype.type(state.eps))
    return state.gamma * ((x - state.moving_mean) * ivar) + state.beta


def batchnorm_backward(dy, gamma, xhat, ivar):
    """Gradient through train-mode batch normalization.

    Accounts for the dependence of the batch statistics on every element:
    dx = (ivar / n) * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)).
    """
    axes = tuple(range(dy.ndim - 1))
    n = dy.dtype.type(np.prod([dy.shape[a] for a in axes]))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = (ivar / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


@dataclass
class GradTape:
    """Everything one train-mode forward caches for backward."""

    outputs: dict
    extras: dict
    version: int
    mode: str


class LayerGraph:
    """A DAG of LayerNodes added in topological order, finalized once."""

    def __init__(self):
        self.nodes = {}
        self.order = []
        self.input_id = None
        self.output_id = None
        self.version = 0
        self.variant_tag = None  # set by the model builders

    def add(self, node: LayerNode):
        if node.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {node.kind!r} for {node.id!r}")
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id!r}")
        for up in node.inputs:
            if up not in self.nodes:
                raise ValueError(f"node {node.id!r} references unknown input {up!r}")
        if node.kind == "Input":
            if self.input_id is not None:
                raise ValueError("graph already has an Input node")
            if node.inputs:
                raise ValueError("Input node takes no inputs")
            if node.input_shape is None:
                raise ValueError("Input node needs input_shape")
            self.input_id = node.id
        elif node.kind == "AddMerge":
            if len(node.inputs) != 2:
                raise ValueError(f"AddMerge {node.id!r} needs exactly 2 inputs")
        elif len(node.inputs) != 1:
            raise ValueError(f"node {node.id!r} needs exactly 1 input")
        self.nodes[node.id] = node
        self.order.append(node.id)
        return node

    def finalize(self):
        """Shape-propagate and fix the terminal node. Raises naming the
        first offending node on any mismatch."""
        if self.input_id is None:
            raise ValueError("graph has no Input node")
        consumed = {u for n in self.nodes.values() for u in n.inputs}
        terminals = [i for i in self.order if i not in consumed]
        if len(terminals) != 1:
            raise ValueError(f"graph must have exactly one terminal node, found {terminals}")
        self.output_id = terminals[0]
        for nid in self.order:
            node = self.nodes[nid]
            ins = [self.nodes[u].out_shape for u in node.inputs]
            try:
                node.out_shape = self._infer_shape(node, ins)
            except ValueError as e:
                raise ValueError(f"shape propagation failed at node {nid!r}: {e}") from None
        return self

    @staticmethod
    def _infer_shape(node, ins):
        kind = node.kind
        if kind == "Input":
            return tuple(node.input_shape)
        x = ins[0]
        if kind == "Conv2D":
            h, w, c = x
            if c != node.spec.in_channels:
                raise ValueError(f"input channels {c} != spec in_channels {node.spec.in_channels}")
            return (node.spec.out_size(h), node.spec.out_size(w), node.spec.out_channels)
        if kind == "MaxPool2":
            h, w, c = x
            if h % 2 or w % 2:
                raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
            return (h // 2, w // 2, c)
        if kind == "Flatten":
            return (int(np.prod(x)),)
        if kind == "Dense":
            if len(x) != 1:
                raise ValueError(f"dense input must be flat, got {x}")
            f, u = node.params["W"].shape
            if x[0] != f:
                raise ValueError(f"dense input width {x[0]} != weight rows {f}")
            return (u,)
        if kind == "AddMerge":
            if ins[0] != ins[1]:
                raise ValueError(f"merge shapes differ: {ins[0]} vs {ins[1]}")
            return ins[0]
        if kind == "BatchNorm":
            if x[-1] != node.bn.gamma.shape[0]:
                raise ValueError(f"channels {x[-1]} != batchnorm width {node.bn.gamma.shape[0]}")
            return x
        return x  # ReLU, Sigmoid, Dropout keep their input shape

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """Trainable tensors as a flat dict keyed 'node_id.name'."""
        out = {}
        for nid in self.order:
            for name, arr in self.nodes[nid].param_items():
                out[f"{nid}.{name}"] = arr
        return out

    def state_tensors(self):
        """Trainable parameters plus BN moving statistics (checkpoint set)."""
        out = self.parameters()
        for nid in self.order:
            node = self.nodes[nid]
            if node.kind == "BatchNorm":
                out[f"{nid}.moving_mean"] = node.bn.moving_mean
                out[f"{nid}.moving_var"] = node.bn.moving_var
        return out

    def load_state(self, tensors):
        """Copy values into the graph's tensors; key sets and shapes must
        match exactly."""
        own = self.state_tensors()
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for key, arr in own.items():
            src = tensors[key]
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}: {src.shape} vs {arr.shape}")
            arr[...] = src
        self.note_param_update()

    def note_param_update(self):
        self.version += 1

    def astype(self, dtype):
        """Convert every parameter and BN state tensor to dtype (the 64-bit
        verification mode switch). Invalidates outstanding tapes."""
        for node in self.nodes.values():
            for name in list(node.params):
                node.params[name] = node.params[name].astype(dtype)
            if node.bn is not None:
                b = node.bn
                b.gamma = b.gamma.astype(dtype)
                b.beta = b.beta.astype(dtype)
                b.moving_mean = b.moving_mean.astype(dtype)
                b.moving_var = b.moving_var.astype(dtype)
        self.note_param_update()
        return self


def forward(graph: LayerGraph, batch, mode="train", rng_seed=None):
    """Run the graph on a batch. Returns (terminal output, GradTape).

    mode selects BN statistics and dropout behavior; rng_seed makes dropout
    masks reproducible (each dropout node gets its own derived stream).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if graph.output_id is None:
        raise ValueError("graph is not finalized")
    inode = graph.nodes[graph.input_id]
    if batch.ndim != 4 or batch.shape[1:] != tuple(inode.input_shape):
        raise ValueError(
            f"batch shape {batch.shape} does not match input {tuple(inode.input_shape)}"
        )
    if rng_seed is None:
        rng_seed = int(np.random.SeedSequence().generate_state(1)[0])
    tape = GradTape(outputs={}, extras={}, version=graph.version, mode=mode)
    drop_index = 0
    for nid in graph.order:
        node = graph.nodes[nid]
        kind = node.kind
        if kind == "Input":
            y = batch
        else:
            x = tape.outputs[node.inputs[0]]
            if kind == "Conv2D":
                y = conv2d(x, node.params["W"], node.params["B"], node.spec)
            elif kind == "BatchNorm":
                cache = {}
                y = batchnorm_forward(x, node.bn, mode, cache)
                if mode == "train":
                    tape.extras[nid] = cache
            elif kind == "ReLU":
                y = np.maximum(x, 0)
            elif kind == "Sigmoid":
                y = _sigmoid(x)
            elif kind == "MaxPool2":
                y, idx = maxpool2(x, with_argmax=True)
                tape.extras[nid] = idx
            elif kind == "Dense":
                y = x @ node.params["W"] + node.params["B"]
            elif kind == "Dropout":
                if mode == "train" and node.rate > 0:
                    rng = derive_rng(rng_seed, TAG_DROPOUT, drop_index)
                    mask = rng.random(x.shape) >= node.rate
                    tape.extras[nid] = mask
                    y = x * mask * x.dtype.type(1.0 / (1.0 - node.rate))
                else:
                    y = x
                drop_index += 1
            elif kind == "Flatten":
                y = x.reshape(x.shape[0], -1)
            else:  # AddMerge
                y = add(tape.outputs[node.inputs[0]], tape.outputs[node.inputs[1]])
        tape.outputs[nid] = y
    return tape.outputs[graph.output_id], tape


def backward(graph: LayerGraph, tape: GradTape, loss_grad):
    """Reverse accumulation from the terminal node. Returns parameter
    gradients keyed like graph.parameters(). Fan-out sums; AddMerge routes
    the incoming gradient unchanged to both branches."""
    if tape.version != graph.version:
        raise ValueError("stale tape: graph parameters changed since this forward")
    if tape.mode != "train":
        raise ValueError("backward needs a tape from a train-mode forward")
    flowing = {graph.output_id: loss_grad}
    pgrads = {}
    for nid in reversed(graph.order):
        node = graph.nodes[nid]
        dy = flowing.pop(nid, None)
        if dy is None:
            continue
        kind = node.kind

        def send(up_id, g):
            if up_id in flowing:
                flowing[up_id] = flowing[up_id] + g
            else:
                flowing[up_id] = g

        if kind == "Input":
            continue
        x = tape.outputs[node.inputs[0]] if node.inputs else None
        if kind == "Conv2D":
            dx, dw, db = conv2d_backward(x, node.params["W"], node.spec, dy)
            pgrads[f"{nid}.W"] = dw
            pgrads[f"{nid}.B"] = db
            send(node.inputs[0], dx)
        elif kind == "BatchNorm":
            cache = tape.extras[nid]
            dx, dgamma, dbeta = batchnorm_backward(dy, node.bn.gamma, cache["xhat"], cache["ivar"])
            pgrads[f"{nid}.gamma"] = dgamma
            pgrads[f"{nid}.beta"] = dbeta
            send(node.inputs[0], dx)
        elif kind == "ReLU":
            send(node.inputs[0], dy * (x > 0))
        elif kind == "Sigmoid":
            y = tape.outputs[nid]
            send(node.inputs[0], dy * y * (1 - y))
        elif kind == "MaxPool2":
            send(node.inputs[0], maxpool2_backward(tape.extras[nid], dy))
        elif kind == "Dense":
            pgrads[f"{nid}.W"] = x.T @ dy
            pgrads[f"{nid}.B"] = dy.sum(axis=0)
            send(node.inputs[0], dy @ node.params["W"].T)
        elif kind == "Dropout":
            if nid in tape.extras:
                mask = tape.extras[nid]
                send(node.inputs[0], dy * mask * dy.dtype.type(1.0 / (1.0 - node.rate)))
            else:
                send(node.inputs[0], dy)
        elif kind == "Flatten":
            send(node.inputs[0], dy.reshape(x.shape))
        else:  # AddMerge
            send(node.inputs[0], dy)
            send(node.inputs[1], dy)
    return pgrads
