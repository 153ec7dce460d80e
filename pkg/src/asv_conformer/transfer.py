"""Binary checkpoints and ASR-encoder -> speaker-model parameter transfer.

File layout (little endian)::

    b"ASVC" | u8 version | u32 meta_len | meta (UTF-8 JSON)
    repeated, sorted by name:
        u16 name_len | name | u8 rank | u32 dims[rank] | f32 data[prod(dims)]
"""

from __future__ import annotations

import json
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"ASVC"
VERSION = 1
ENCODER_PREFIX = "encoder."
_BLOCK_RE = re.compile(r"^encoder\.block\.(\d+)\.")


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TransferError(ValueError):
    pass


@dataclass
class ParamStore:
    entries: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = OrderedDict(
            (k, np.array(v, dtype="<f4", order="C")) for k, v in sorted(self.entries.items()))

    @classmethod
    def from_module(cls, module: nn.Module, metadata: dict | None = None) -> "ParamStore":
        entries = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
        return cls(entries, dict(metadata or {}))

    def names(self) -> list[str]:
        return list(self.entries)

    def num_blocks(self) -> int:
        idx = {int(m.group(1)) for m in map(_BLOCK_RE.match, self.entries) if m}
        return max(idx) + 1 if idx else 0

    def load_into(self, module: nn.Module, prefix_filter: str = "") -> None:
        state = {k: torch.from_numpy(v.copy()) for k, v in self.entries.items() if k.startswith(prefix_filter)}
        module.load_state_dict(state, strict=not prefix_filter)

    def equals(self, other: "ParamStore") -> bool:
        return (self.names() == other.names() and self.metadata == other.metadata
                and all(np.array_equal(a.view("<u4"), b.view("<u4"))
                        for a, b in zip(self.entries.values(), other.entries.values())))


def save_checkpoint(store: ParamStore, path) -> None:
    meta = dict(store.metadata)
    meta["format_version"] = VERSION
    meta["shapes"] = {k: list(v.shape) for k, v in store.entries.items()}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta_bytes)), meta_bytes]
    for name, arr in store.entries.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedDataError(f"{self.path}: truncated {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ParamStore:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if data[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(data, path)
    r.take(4, "magic")
    version, meta_len = r.unpack("<BI", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    shapes = meta.pop("shapes", None)
    meta.pop("format_version", None)
    entries = OrderedDict()
    while r.pos < len(data):
        (name_len,) = r.unpack("<H", "tensor name")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        if shapes is not None and list(dims) != shapes.get(name):
            raise ShapeMismatchError(f"{path}: tensor {name} has shape {list(dims)}, "
                                     f"metadata says {shapes.get(name)}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * count, f"tensor data for {name}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if shapes is not None and set(shapes) != set(entries):
        missing = sorted(set(shapes) - set(entries))
        raise TruncatedDataError(f"{path}: truncated tensor data, missing {missing[:3]}")
    if list(entries) != sorted(entries):
        raise CheckpointError(f"{path}: tensor records are not in canonical sorted order")
    return ParamStore(entries, meta)


def _transferable(name: str, k_blocks: int, dst_blocks: int) -> bool:
    if name.startswith("encoder.frontend."):
        return k_blocks >= 1
    if name.startswith("encoder.final_norm."):
        # only meaningful when it sits on top of exactly the copied stack
        return k_blocks >= 1 and k_blocks == dst_blocks
    m = _BLOCK_RE.match(name)
    return bool(m) and int(m.group(1)) < k_blocks


def transfer_encoder(src: ParamStore, dst: nn.Module, k_blocks: int) -> nn.Module:
    """Copy the subsampling frontend and blocks ``0..k-1`` of ``src`` into ``dst``.

    When ``k`` covers every block of ``dst`` the encoder's output norm is
    copied too, so the whole encoder equals the source. Everything else in ``dst`` keeps its current (fresh) values. Non-encoder
    tensors in ``src`` such as ASR output layers are ignored. ``k_blocks == 0``
    is a no-op.
    """
    dst_state = dst.state_dict()
    dst_blocks = 1 + max((int(m.group(1)) for m in map(_BLOCK_RE.match, dst_state) if m), default=-1)
    limit = min(src.num_blocks(), dst_blocks)
    if k_blocks < 0 or k_blocks > limit:
        raise TransferError(f"cannot transfer {k_blocks} blocks (source has {src.num_blocks()}, "
                            f"destination has {dst_blocks})")
    wanted = [n for n in dst_state if _transferable(n, k_blocks, dst_blocks)]
    for name in wanted:
        if name not in src.entries:
            raise TransferError(f"source checkpoint lacks tensor {name}")
        if tuple(src.entries[name].shape) != tuple(dst_state[name].shape):
            raise TransferError(f"shape mismatch for {name}: source {tuple(src.entries[name].shape)}, "
                                f"destination {tuple(dst_state[name].shape)}")
    with torch.no_grad():
        for name in wanted:
            dst_state[name].copy_(torch.from_numpy(src.entries[name].copy()))
    return dst
