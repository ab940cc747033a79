"""Binary checkpoint files.

Layout (all integers u32 little-endian)::

    b"DIQA" | version | len | config text (UTF-8 ``key=value`` lines)
    n_tensors | n_tensors x tensor record
    n_adam    | n_adam x tensor record      (names "m:<param>" / "v:<param>")

A tensor record is ``name_len | name | rank | dims... | float32 LE payload``.
Model settings are stored as plain keys, run metadata under ``meta.``, the
ADAM step count and hyperparameters under ``adam.``.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, param_shapes
from .nn import DimensionError, ParamSet, Tensor
from .optim import AdamState

MAGIC = b"DIQA"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    adam: AdamState | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        return float(self.meta.get("best_val_loss", "nan"))


def _write_tensor(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        try:
            name = self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt tensor name") from exc
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, arr


def dumps(ckpt: Checkpoint) -> bytes:
    lines = dict(ckpt.config.to_dict())
    lines.update({f"meta.{k}": v for k, v in ckpt.meta.items()})
    if ckpt.adam is not None:
        a = ckpt.adam
        lines.update({"adam.t": str(a.t), "adam.lr": repr(a.lr), "adam.beta1": repr(a.beta1),
                      "adam.beta2": repr(a.beta2), "adam.eps": repr(a.eps)})
    text = "".join(f"{k}={v}\n" for k, v in lines.items()).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        _write_tensor(buf, name, t.data)
    adam_tensors = []
    if ckpt.adam is not None:
        for name in ckpt.params:
            if name in ckpt.adam.m:
                adam_tensors.append((f"m:{name}", ckpt.adam.m[name]))
                adam_tensors.append((f"v:{name}", ckpt.adam.v[name]))
    buf.write(struct.pack("<I", len(adam_tensors)))
    for name, arr in adam_tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def loads(data: bytes, expect: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("corrupt config block") from exc
    values = dict(line.split("=", 1) for line in text.splitlines() if line)
    config = ModelConfig.from_dict({k: v for k, v in values.items() if "." not in k})
    meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}

    params = ParamSet()
    for _ in range(r.u32()):
        name, arr = r.tensor()
        params[name] = Tensor(arr, requires_grad=True)
    adam = None
    n_adam = r.u32()
    if "adam.t" in values:
        adam = AdamState(lr=float(values["adam.lr"]), beta1=float(values["adam.beta1"]),
                         beta2=float(values["adam.beta2"]), eps=float(values["adam.eps"]),
                         t=int(values["adam.t"]))
    for _ in range(n_adam):
        name, arr = r.tensor()
        kind, pname = name.split(":", 1)
        if adam is not None:
            (adam.m if kind == "m" else adam.v)[pname] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    _check(params, expect or config)
    return Checkpoint(config, params, adam, meta)


def _check(params: ParamSet, config: ModelConfig) -> None:
    expected = param_shapes(config)
    names = {n for n, _ in expected}
    for name, shape in expected:
        if name not in params:
            raise DimensionError(f"checkpoint lacks tensor {name}")
        if params[name].shape != shape:
            raise DimensionError(f"tensor {name}: checkpoint shape {params[name].shape}, config expects {shape}")
    extra = [n for n in params if n not in names]
    if extra:
        raise DimensionError(f"checkpoint has tensors unknown to the config: {extra[:3]}")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load_checkpoint(path: str | os.PathLike, expect: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read(), expect)
