"""Single-file checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"PWFACE\\x00\\x01"
    8       4     uint32 format version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header
    20+H    ...   raw tensor bytes, concatenated in header order

The header holds ``meta`` (configs, step counter, free-form run info), an
``objects`` tree mirroring each module/optimizer state dict with tensors replaced
by ``{"__tensor__": index}``, and a ``tensors`` table of
``{"dtype", "shape", "offset", "nbytes"}`` where offsets are relative to the
start of the tensor block. Dict keys keep their Python type by being stored as
``{"__items__": [[key, value], ...]}``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .networks import (
    AuxConfig,
    AuxNet,
    DiscriminatorConfig,
    DiscriminatorSet,
    FaceRecognizer,
    Generator,
    GeneratorConfig,
    ModelBundle,
    RecognizerConfig,
)

MAGIC = b"PWFACE\x00\x01"
FORMAT_VERSION = 1

_MODULE_TYPES = {
    "generator": (Generator, GeneratorConfig),
    "discriminators": (DiscriminatorSet, DiscriminatorConfig),
    "aux": (AuxNet, AuxConfig),
    "recognizer": (FaceRecognizer, RecognizerConfig),
    "verifier": (FaceRecognizer, RecognizerConfig),
}

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _encode(obj, tensors: list[torch.Tensor]):
    if isinstance(obj, torch.Tensor):
        tensors.append(obj.detach().cpu().contiguous())
        return {"__tensor__": len(tensors) - 1}
    if isinstance(obj, dict):
        return {"__items__": [[k, _encode(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, tensors) for v in obj]
    return obj


def _decode(obj, tensors: list[torch.Tensor]):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        return {k: _decode(v, tensors) for k, v in obj["__items__"]}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


def write_container(path, meta: dict, objects: dict) -> None:
    tensors: list[torch.Tensor] = []
    encoded = _encode(objects, tensors)
    table, blobs, offset = [], [], 0
    for t in tensors:
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
        raw = t.numpy().tobytes()
        table.append({"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "objects": encoded, "tensors": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    base = 20 + hlen
    tensors = []
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated checkpoint {path}")
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        tensors.append(torch.from_numpy(arr.copy()))
    return header["meta"], _decode(header["objects"], tensors)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    objects = {
        "modules": {name: m.state_dict() for name, m in bundle.modules().items()},
        "optimizers": {name: opt.state_dict() for name, opt in bundle.optimizers.items()},
    }
    meta = {"configs": bundle.configs(), "step": bundle.step, "info": bundle.meta}
    write_container(path, meta, objects)


def load_checkpoint(path, optimizers: bool = False) -> ModelBundle:
    """Rebuild a bundle. With ``optimizers=True`` the raw optimizer state dicts
    are kept in ``bundle.meta["optimizer_state"]`` for the trainer to restore."""
    meta, objects = read_container(path)
    built = {}
    for name, cfg in meta["configs"].items():
        if name not in _MODULE_TYPES:
            raise CheckpointError(f"unknown module {name!r} in checkpoint")
        cls, cfg_cls = _MODULE_TYPES[name]
        module = cls(cfg_cls(**cfg))
        module.load_state_dict(objects["modules"][name])
        module.eval()
        built[name] = module
    if "generator" not in built:
        raise CheckpointError("checkpoint has no generator")
    bundle = ModelBundle(step=int(meta["step"]), meta=dict(meta.get("info", {})), **built)
    if optimizers:
        bundle.meta["optimizer_state"] = objects.get("optimizers", {})
    return bundle


def save_recognizer(model: FaceRecognizer, path, info: dict | None = None) -> None:
    from dataclasses import asdict

    write_container(path, {"recognizer": asdict(model.config), "info": info or {}}, {"state": model.state_dict()})


def load_recognizer(path) -> FaceRecognizer:
    meta, objects = read_container(path)
    if "recognizer" not in meta:
        raise CheckpointError(f"{path} does not hold a recognizer")
    model = FaceRecognizer(RecognizerConfig(**meta["recognizer"]))
    model.load_state_dict(objects["state"])
    return model.eval()
