"""Named parameter collection and the binary checkpoint format.

Checkpoint layout, all little-endian:
  magic "USPT", version u16,
  records: name_len u32 (> 0), name utf-8, rank u8, dims u32 x rank, f32 data,
  sentinel name_len u32 = 0,
  footer: step u64, hash_len u16, hash utf-8, extra_len u32, extra utf-8.
The footer's extra field carries the run's canonical config text so a
checkpoint is loadable without the original config file; it may be empty.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .autodiff import Tensor, active_dtype

_MAGIC = b"USPT"
_VERSION = 1


@dataclass
class ParamEntry:
    value: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Map parameter-path -> (value tensor, gradient slot, optimizer moments)."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        """Register a new trainable parameter; returns its tensor."""
        if name in self._entries:
            raise ValidationError(f"parameter {name!r} already exists")
        data = np.array(array, dtype=active_dtype())
        t = Tensor(data, requires_grad=True)
        self._entries[name] = ParamEntry(value=t, m=np.zeros_like(data), v=np.zeros_like(data))
        return t

    def entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise ValidationError(f"no parameter named {name!r}") from None

    def __getitem__(self, name: str) -> Tensor:
        return self.entry(name).value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def num_params(self) -> int:
        return sum(e.value.data.size for e in self._entries.values())

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.value.grad = None

    def grad_or_zero(self, name: str) -> np.ndarray:
        e = self.entry(name)
        return e.value.grad if e.value.grad is not None else np.zeros_like(e.value.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: e.value.data.copy() for name, e in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite parameter values in place; shapes must match exactly."""
        if strict:
            missing = set(self._entries) - set(values)
            extra = set(values) - set(self._entries)
            if missing or extra:
                raise ValidationError(
                    f"parameter name mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, arr in values.items():
            if name not in self._entries:
                continue
            e = self._entries[name]
            if tuple(arr.shape) != tuple(e.value.data.shape):
                raise ValidationError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {e.value.data.shape}")
            e.value.data[...] = arr.astype(e.value.data.dtype)
            e.m[...] = 0.0
            e.v[...] = 0.0
            e.step = 0


def save_checkpoint(path: str | Path, store: ParameterStore, step: int,
                    config_hash: str = "", config_text: str = "") -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        for name in store.names():
            data = np.ascontiguousarray(store[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())
        f.write(struct.pack("<I", 0))
        hb = config_hash.encode("utf-8")
        eb = config_text.encode("utf-8")
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<H", len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(eb)))
        f.write(eb)


@dataclass(frozen=True)
class Checkpoint:
    values: dict
    step: int
    config_hash: str
    config_text: str


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()

    def take(fmt: str, off: int):
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise ValidationError(f"{path}: truncated checkpoint")
        return struct.unpack_from(fmt, raw, off), off + size

    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    (version,), off = take("<H", 4)
    if version != _VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    values: dict[str, np.ndarray] = {}
    while True:
        (name_len,), off = take("<I", off)
        if name_len == 0:
            break
        if off + name_len > len(raw):
            raise ValidationError(f"{path}: truncated checkpoint")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,), off = take("<B", off)
        dims, off = take(f"<{rank}I", off)
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise ValidationError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        values[name] = arr.copy()
        off += nbytes
    (step,), off = take("<Q", off)
    (hash_len,), off = take("<H", off)
    config_hash = raw[off:off + hash_len].decode("utf-8")
    off += hash_len
    (extra_len,), off = take("<I", off)
    if off + extra_len > len(raw):
        raise ValidationError(f"{path}: truncated checkpoint")
    config_text = raw[off:off + extra_len].decode("utf-8")
    return Checkpoint(values=values, step=int(step), config_hash=config_hash, config_text=config_text)
