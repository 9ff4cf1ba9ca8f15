"""Binary checkpoint codec.

Layout, all little-endian:
  magic b"DUCC" | u32 format version | u32 tag length + tag utf8 |
  i64 training seed | u32 epoch | u32 tensor count | per tensor:
  u32 name length, name utf8, u32 rank, u32 dims..., float32 payload.

The tensor set is the graph's state_tensors(): trainable parameters plus
batch-norm moving statistics, so a round trip reproduces inference bitwise.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DUCC"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    variant: str
    seed: int
    epoch: int
    tensors: dict  # name -> float32 ndarray


def checkpoint_from_graph(graph, seed, epoch) -> Checkpoint:
    tensors = {
        name: np.ascontiguousarray(arr, dtype=np.float32)
        for name, arr in graph.state_tensors().items()
    }
    return Checkpoint(variant=graph.variant_tag or "custom", seed=seed, epoch=epoch, tensors=tensors)


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        tag = ckpt.variant.encode("utf-8")
        f.write(struct.pack("<I", len(tag)))
        f.write(tag)
        f.write(struct.pack("<q", ckpt.seed))
        f.write(struct.pack("<I", ckpt.epoch))
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        (taglen,) = struct.unpack("<I", f.read(4))
        variant = f.read(taglen).decode("utf-8")
        (seed,) = struct.unpack("<q", f.read(8))
        (epoch,) = struct.unpack("<I", f.read(4))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (namelen,) = struct.unpack("<I", f.read(4))
            name = f.read(namelen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise ValueError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return Checkpoint(variant=variant, seed=seed, epoch=epoch, tensors=tensors)


def load_into_graph(graph, ckpt: Checkpoint):
    """Install checkpoint tensors into a graph built for the same variant."""
    if graph.variant_tag is not None and graph.variant_tag != ckpt.variant:
        raise ValueError(
            f"checkpoint is for variant {ckpt.variant!r}, graph is {graph.variant_tag!r}"
        )
    graph.load_state(ckpt.tensors)
    return graph
