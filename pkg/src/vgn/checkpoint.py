"""Checkpoints: a directory holding ``manifest.txt`` and ``params.bin``.

The manifest is plain text::

    vgn-checkpoint 1
    config in_channels 1
    ...
    tensor cnn.stage0.conv1.weight 3,3,1,8 0

Tensor lines give name, shape and byte offset into ``params.bin``, which is
the concatenation of all tensors as little-endian float64 in C order.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from vgn.errors import FormatError
from vgn.model import VGN, ModelConfig

MAGIC = "vgn-checkpoint 1"
MANIFEST = "manifest.txt"
BINARY = "params.bin"
_DTYPE = np.dtype("<f8")


def _format_value(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(kind, text):
    if kind is bool or kind == "bool":
        if text not in ("True", "False"):
            raise ValueError(f"bad boolean {text!r}")
        return text == "True"
    if kind is int or kind == "int":
        return int(text)
    return float(text)


def save_checkpoint(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for f in fields(ModelConfig):
        lines.append(f"config {f.name} {_format_value(getattr(model.config, f.name))}")
    offset = 0
    chunks = []
    for name in sorted(model.params):
        value = np.ascontiguousarray(model.params[name].value, dtype=_DTYPE)
        shape = ",".join(str(s) for s in value.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(value.tobytes())
        offset += value.nbytes
    (path / BINARY).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def _read_manifest(path):
    try:
        text = (path / MANIFEST).read_text()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path / MANIFEST}: not text", exc.start) from None
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise FormatError(f"{path / MANIFEST}: missing header {MAGIC!r}", 0)
    types = {f.name: f.type for f in fields(ModelConfig)}
    config, tensors = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if not parts:
                continue
            if parts[0] == "config" and len(parts) == 3:
                if parts[1] not in types:
                    raise ValueError(f"unknown config key {parts[1]!r}")
                config[parts[1]] = _parse_value(types[parts[1]], parts[2])
            elif parts[0] == "tensor" and len(parts) == 4:
                shape = tuple(int(s) for s in parts[2].split(",")) if parts[2] else ()
                if any(s < 0 for s in shape) or int(parts[3]) < 0:
                    raise ValueError("negative shape or offset")
                tensors.append((parts[1], shape, int(parts[3])))
            else:
                raise ValueError(f"unrecognised line {line!r}")
        except ValueError as exc:
            raise FormatError(f"{path / MANIFEST} line {lineno}: {exc}", lineno) from None
    return ModelConfig(**config), tensors


def load_checkpoint(path):
    """Rebuild a :class:`VGN` from a checkpoint directory (bit-exact)."""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {path}")
    config, tensors = _read_manifest(path)
    blob = (path / BINARY).read_bytes()
    model = VGN(config)
    seen = set()
    for name, shape, offset in tensors:
        if name not in model.params:
            raise FormatError(f"unknown tensor {name!r}", offset)
        expected = model.params[name].shape
        if shape != expected:
            raise FormatError(f"tensor {name!r} has shape {shape}, model expects {expected}",
                              offset)
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{path / BINARY} truncated: tensor {name!r} needs bytes "
                              f"[{offset}, {offset + nbytes}) but file has {len(blob)}",
                              len(blob))
        model.params[name].value = np.frombuffer(blob, _DTYPE, nbytes // 8, offset) \
            .astype(np.float64).reshape(shape)
        seen.add(name)
    missing = sorted(set(model.params) - seen)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {missing}", len(blob))
    return model


def params_equal(a, b):
    """Bitwise equality of two models' parameters."""
    if set(a.params) != set(b.params):
        return False
    return all(a.params[k].value.tobytes() == b.params[k].value.tobytes() for k in a.params)
