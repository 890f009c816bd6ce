"""Versioned tensor container: text header + raw little-endian float32 payload.

Layout:

    SPANFORGE1\n
    meta.<key>=<value>\n          (zero or more, sorted by key)
    tensor.<name>=<d1>x<d2>@<offset>\n   (sorted by name; offset into payload)
    end.header\n
    <payload: concatenated float32 little-endian tensor bytes>

The same container stores model checkpoints (meta carries the model config)
and embedding dumps (one tensor per record id).  Writing is deterministic:
identical inputs produce identical bytes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from spanforge.autograd import Tensor
from spanforge.model import ModelConfig, ParameterStore

MAGIC = "SPANFORGE1"


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptPayloadError(CheckpointError):
    pass


def _format_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    return tuple(int(d) for d in text.split("x"))


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write tensors (cast to float32) plus string metadata."""
    meta = meta or {}
    names = sorted(tensors)
    arrays = {name: np.ascontiguousarray(tensors[name], dtype="<f4") for name in names}
    lines = [MAGIC]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise CheckpointError(f"metadata entry {key!r} is not header-safe")
        lines.append(f"meta.{key}={value}")
    offset = 0
    for name in names:
        arr = arrays[name]
        lines.append(f"tensor.{name}={_format_shape(arr.shape)}@{offset}")
        offset += arr.nbytes
    lines.append("end.header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name in names:
            fh.write(arrays[name].tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`save_tensors`; validates magic and payload extent."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.find(b"end.header\n")
    if header_end < 0:
        raise CorruptPayloadError("missing header terminator")
    header = blob[:header_end].decode("utf-8", errors="replace").splitlines()
    payload = blob[header_end + len(b"end.header\n") :]
    if not header or header[0] != MAGIC:
        raise VersionMismatchError(
            f"expected magic {MAGIC!r}, found {header[0]!r}" if header else "empty file"
        )

    meta: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for line in header[1:]:
        if line.startswith("meta."):
            key, _, value = line[len("meta.") :].partition("=")
            meta[key] = value
        elif line.startswith("tensor."):
            name, _, spec = line[len("tensor.") :].partition("=")
            shape_text, _, offset_text = spec.partition("@")
            manifest.append((name, _parse_shape(shape_text), int(offset_text)))
        else:
            raise CorruptPayloadError(f"unrecognized header line {line!r}")

    tensors: dict[str, np.ndarray] = {}
    total = 0
    for name, shape, offset in manifest:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset + nbytes > len(payload):
            raise CorruptPayloadError(
                f"tensor {name!r} extends to byte {offset + nbytes}, payload has {len(payload)}"
            )
        flat = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
        total = max(total, offset + nbytes)
    if total != len(payload):
        raise CorruptPayloadError(f"payload has {len(payload)} bytes, manifest covers {total}")
    return tensors, meta


def _config_meta(config: ModelConfig) -> dict[str, str]:
    meta = {}
    for f in dataclasses.fields(ModelConfig):
        value = getattr(config, f.name)
        meta[f"config.{f.name}"] = str(value).lower() if isinstance(value, bool) else str(value)
    return meta


def _config_from_meta(meta: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in meta:
            raise CorruptPayloadError(f"checkpoint header missing {key}")
        raw = meta[key]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = raw == "true"
        else:
            kwargs[f.name] = raw
    return ModelConfig(**kwargs)


def save_checkpoint(path, params: ParameterStore, extra_meta: dict[str, str] | None = None) -> None:
    meta = _config_meta(params.config)
    if extra_meta:
        for key, value in extra_meta.items():
            meta[f"extra.{key}"] = str(value)
    save_tensors(path, {name: t.data for name, t in params.items()}, meta)


@dataclass
class LoadedCheckpoint:
    config: ModelConfig
    params: ParameterStore
    extra_meta: dict[str, str]


def load_checkpoint(path) -> LoadedCheckpoint:
    tensors, meta = load_tensors(path)
    config = _config_from_meta(meta)
    params = ParameterStore(
        config, {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    )
    extra = {
        key[len("extra.") :]: value for key, value in meta.items() if key.startswith("extra.")
    }
    return LoadedCheckpoint(config=config, params=params, extra_meta=extra)
