"""Builders for the single-channel network, the dual-channel network, and
the ablation variants, plus parameter counting and feature-map tapping.

Architecture at full size (64x64x3 input, 32 filters everywhere):

  stem:    Conv3x3 -> ReLU -> BN, shared by both channels.
  deep:    seven blocks of three Conv3x3+ReLU; MaxPool2 after blocks 1-6,
           block 7 works at 1x1. The conv_block7 flag removes block 7 only;
           the pool schedule never changes, so the flatten stays 32 wide
           and removing the block shifts the count by exactly its own
           3*(3*3*32+1)*32 parameters.
  shallow: seven Conv3x3+ReLU with one BN after conv 1; MaxPool2 after
           convs 1-6; a skip path from pool 1 through two MaxPool2 joins
           pool 3's output by elementwise add (bypassing convs 2-3).
  merge:   deep and shallow outputs added at 1x1x32.
  head:    Flatten -> Dense(32)+ReLU -> Dropout(0.5) -> Dense(1) -> Sigmoid.

Builders accept reduced input_hw/filters/dense_units for cheap gradient
verification; defaults reproduce the full architecture. input_hw must be a
power of two >= 8 so at least three pool stages exist for skip alignment.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .graph import BatchNormState, LayerGraph, LayerNode, forward
from .kernels import ConvSpec
from .rng import TAG_INIT, derive_rng


class ModelVariant(Enum):
    """The ablation matrix: (tag, channel2, skip_connection, conv_block7)."""

    MODEL1 = ("model1", False, False, False)
    MODEL2_SCNN = ("model2", False, False, True)
    MODEL3 = ("model3", True, True, False)
    MODEL4 = ("model4", True, False, True)
    DUCCNET = ("duccnet", True, True, True)

    @property
    def tag(self):
        return self.value[0]

    @property
    def channel2(self):
        return self.value[1]

    @property
    def skip_connection(self):
        return self.value[2]

    @property
    def conv_block7(self):
        return self.value[3]

    @classmethod
    def parse(cls, name):
        key = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        table = {
            "model1": cls.MODEL1,
            "model2": cls.MODEL2_SCNN,
            "model2scnn": cls.MODEL2_SCNN,
            "scnn": cls.MODEL2_SCNN,
            "model3": cls.MODEL3,
            "model4": cls.MODEL4,
            "duccnet": cls.DUCCNET,
        }
        if key not in table:
            raise ValueError(f"unknown model variant {name!r}; choose from {sorted(table)}")
        return table[key]


ALL_VARIANTS = [
    ModelVariant.MODEL1,
    ModelVariant.MODEL2_SCNN,
    ModelVariant.MODEL3,
    ModelVariant.MODEL4,
    ModelVariant.DUCCNET,
]

# reference values reported for the original implementation of this
# architecture on its photographic corpus; printed for comparison, never
# asserted (our engine's exact counts differ, see README)
REFERENCE_PARAM_TOTALS = {"model2": 159_201, "duccnet": 233_441}
REFERENCE_VA = {
    "model1": 79.75,
    "model2": 82.50,
    "model3": 85.75,
    "model4": 89.00,
    "duccnet": 92.25,
}

FEATURE_TAP_ALIASES = {
    "stem": "stem_bn",
    "deep1": "deep_b1c1",
    "shallow1": "shallow_c1",
}


class _Builder:
    def __init__(self, seed, filters):
        self.g = LayerGraph()
        self.rng = derive_rng(seed, TAG_INIT)
        self.filters = filters

    def he_uniform(self, shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return self.rng.uniform(-limit, limit, shape).astype(np.float32)

    def conv(self, nid, upstream, cin, relu=True):
        f = self.filters
        self.g.add(
            LayerNode(
                nid, "Conv2D", [upstream],
                params={
                    "W": self.he_uniform((3, 3, cin, f), 9 * cin),
                    "B": np.zeros(f, np.float32),
                },
                spec=ConvSpec(3, cin, f, stride=1, padding="same"),
            )
        )
        if not relu:
            return nid
        self.g.add(LayerNode(f"{nid}_relu", "ReLU", [nid]))
        return f"{nid}_relu"

    def dense(self, nid, upstream, fan_in, units):
        self.g.add(
            LayerNode(
                nid, "Dense", [upstream],
                params={
                    "W": self.he_uniform((fan_in, units), fan_in),
                    "B": np.zeros(units, np.float32),
                },
            )
        )
        return nid


def build_variant(
    variant: ModelVariant,
    input_hw: int = 64,
    filters: int = 32,
    dense_units: int = 32,
    seed: int = 0,
    bn_eps: float = 1e-3,
    bn_momentum: float = 0.99,
) -> LayerGraph:
    """Assemble one ablation variant as a finalized LayerGraph."""
    if input_hw < 8 or input_hw & (input_hw - 1):
        raise ValueError(f"input_hw must be a power of two >= 8, got {input_hw}")
    n_pools = min(6, int(math.log2(input_hw)))
    b = _Builder(seed, filters)
    g = b.g

    g.add(LayerNode("input", "Input", input_shape=(input_hw, input_hw, 3)))
    top = b.conv("stem_conv", "input", 3)
    g.add(
        LayerNode(
            "stem_bn", "BatchNorm", [top],
            bn=BatchNormState.for_channels(filters, eps=bn_eps, momentum=bn_momentum),
        )
    )
    stem_out = "stem_bn"

    # deep channel: three-conv blocks, pooled after blocks 1..n_pools
    top = stem_out
    n_blocks = 7 if variant.conv_block7 else 6
    for i in range(1, n_blocks + 1):
        for j in range(1, 4):
            top = b.conv(f"deep_b{i}c{j}", top, filters)
        if i <= n_pools:
            g.add(LayerNode(f"deep_pool{i}", "MaxPool2", [top]))
            top = f"deep_pool{i}"
    deep_out = top

    if variant.channel2:
        # shallow channel: seven single convs, BN after conv 1, pooled
        # after convs 1..n_pools, optional skip around convs 2-3
        top = b.conv("shallow_c1", stem_out, filters)
        g.add(
            LayerNode(
                "shallow_bn", "BatchNorm", [top],
                bn=BatchNormState.for_channels(filters, eps=bn_eps, momentum=bn_momentum),
            )
        )
        top = "shallow_bn"
        g.add(LayerNode("shallow_pool1", "MaxPool2", [top]))
        top = "shallow_pool1"
        skip_src = top
        for k in (2, 3):
            top = b.conv(f"shallow_c{k}", top, filters)
            if k <= n_pools:
                g.add(LayerNode(f"shallow_pool{k}", "MaxPool2", [top]))
                top = f"shallow_pool{k}"
        if variant.skip_connection:
            g.add(LayerNode("skip_pool1", "MaxPool2", [skip_src]))
            g.add(LayerNode("skip_pool2", "MaxPool2", ["skip_pool1"]))
            g.add(LayerNode("shallow_merge", "AddMerge", ["skip_pool2", top]))
            top = "shallow_merge"
        for k in (4, 5, 6):
            top = b.conv(f"shallow_c{k}", top, filters)
            if k <= n_pools:
                g.add(LayerNode(f"shallow_pool{k}", "MaxPool2", [top]))
                top = f"shallow_pool{k}"
        top = b.conv("shallow_c7", top, filters)
        shallow_out = top
        g.add(LayerNode("channel_merge", "AddMerge", [deep_out, shallow_out]))
        top = "channel_merge"
    else:
        top = deep_out

    g.add(LayerNode("flatten", "Flatten", [top]))
    flat_w = (input_hw >> n_pools) ** 2 * filters
    b.dense("dense1", "flatten", flat_w, dense_units)
    g.add(LayerNode("dense1_relu", "ReLU", ["dense1"]))
    g.add(LayerNode("drop", "Dropout", ["dense1_relu"], rate=0.5))
    b.dense("dense2", "drop", dense_units, 1)
    g.add(LayerNode("sigmoid", "Sigmoid", ["dense2"]))
    g.finalize()
    g.variant_tag = variant.tag
    return g


def build_scnn(**kwargs) -> LayerGraph:
    """The single-channel network (stem + seven blocks + dense head)."""
    return build_variant(ModelVariant.MODEL2_SCNN, **kwargs)


def build_duccnet(**kwargs) -> LayerGraph:
    """The dual-channel network with skip connection and both merges."""
    return build_variant(ModelVariant.DUCCNET, **kwargs)


@dataclass
class ParamRow:
    name: str
    kind: str
    shape: str
    trainable: int
    non_trainable: int


@dataclass
class ParamReport:
    rows: list
    total_trainable: int
    total_non_trainable: int

    def table(self) -> str:
        lines = [f"{'layer':<18} {'kind':<10} {'shape':<22} {'params':>8} {'frozen':>7}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<18} {r.kind:<10} {r.shape:<22} {r.trainable:>8} {r.non_trainable:>7}"
            )
        lines.append(
            f"{'total':<18} {'':<10} {'':<22} {self.total_trainable:>8} {self.total_non_trainable:>7}"
        )
        return "\n".join(lines)


def count_params(graph: LayerGraph) -> ParamReport:
    """Per-layer parameter counts from the tensor shapes.

    Conv: (k*k*cin + 1)*nk. Dense: (fan_in + 1)*units. BN: 2c trainable
    plus 2c frozen moving statistics.
    """
    rows = []
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == "Conv2D":
            k, _, cin, nk = node.params["W"].shape
            rows.append(
                ParamRow(nid, "Conv2D", f"{k}x{k}x{cin}->{nk}", (k * k * cin + 1) * nk, 0)
            )
        elif node.kind == "Dense":
            f, u = node.params["W"].shape
            rows.append(ParamRow(nid, "Dense", f"{f}->{u}", (f + 1) * u, 0))
        elif node.kind == "BatchNorm":
            c = node.bn.gamma.shape[0]
            rows.append(ParamRow(nid, "BatchNorm", f"{c}", 2 * c, 2 * c))
    return ParamReport(
        rows=rows,
        total_trainable=sum(r.trainable for r in rows),
        total_non_trainable=sum(r.non_trainable for r in rows),
    )


def conv_layer_count(graph: LayerGraph) -> int:
    return sum(1 for n in graph.nodes.values() if n.kind == "Conv2D")


def merge_shapes(graph: LayerGraph):
    """Output shapes of the AddMerge nodes, in graph order."""
    return [graph.nodes[i].out_shape for i in graph.order if graph.nodes[i].kind == "AddMerge"]


def extract_feature_maps(graph: LayerGraph, image, tap):
    """Per-filter 2D activation slices at a conv or BN node, each min-max
    normalized to [0, 1]; an all-equal map normalizes to zeros."""
    tap_id = FEATURE_TAP_ALIASES.get(tap, tap)
    if tap_id not in graph.nodes:
        raise ValueError(f"unknown tap {tap!r}")
    node = graph.nodes[tap_id]
    if node.kind not in ("Conv2D", "BatchNorm"):
        raise ValueError(f"tap {tap!r} is a {node.kind} node; taps must be Conv2D or BatchNorm")
    batch = np.asarray(image, dtype=np.float32)[None]
    _, tape = forward(graph, batch, mode="infer")
    act = tape.outputs[tap_id][0]
    maps = []
    for c in range(act.shape[-1]):
        m = act[:, :, c]
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            maps.append(((m - lo) / (hi - lo)).astype(np.float32))
        else:
            maps.append(np.zeros_like(m))
    return maps


def tile_maps(maps, cols=8, pad=1):
    """Arrange normalized 2D maps into one [0,1] grid image for export."""
    n = len(maps)
    rows = -(-n // cols)
    h, w = maps[0].shape
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.float32)
    for i, m in enumerate(maps):
        r, c = divmod(i, cols)
        grid[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = m
    return grid
