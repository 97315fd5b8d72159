"""Binary model container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       4     magic b"LGMF"
    4       4     uint32 H, length of the header
    8       H     UTF-8 JSON header (sorted keys, no whitespace)
    8+H     ...   parameter blocks, float64 little-endian, C order, in the
                  order listed by header["blocks"]
    end-4   4     uint32 CRC-32 of every preceding byte

Header keys: ``schema_version``, ``format``, ``d``, ``C``, ``architecture``
(layer list and dropout rate), ``estimator`` (taps and units, or null),
``seeds``, ``feature_names`` and ``blocks`` (name and shape of each block).
Predictor blocks come first (``layer{i}.weight``, ``layer{i}.bias``), then the
estimator's (``tap{t}.weight``, ``tap{t}.bias``, ``head.weight``, ``head.bias``).
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import ModelFormatError, UnsupportedVersionError
from .estimator import LossEstimator
from .nn import LayerSpec, PredictiveModel

MAGIC = b"LGMF"
SCHEMA_VERSION = 1
FORMAT_NAME = "lossgranger-model"


def model_to_bytes(
    model: PredictiveModel,
    estimator: LossEstimator | None = None,
    feature_names: list[str] | None = None,
) -> bytes:
    blocks = list(zip(model.parameter_names(), model.parameters()))
    if estimator is not None:
        blocks += list(zip(estimator.parameter_names(), estimator.parameters()))
    header = {
        "schema_version": SCHEMA_VERSION,
        "format": FORMAT_NAME,
        "d": model.n_features,
        "C": model.n_classes,
        "architecture": {
            "layers": [[s.fan_in, s.fan_out, s.activation] for s in model.layer_specs],
            "dropout_rate": model.dropout_rate,
        },
        "estimator": None
        if estimator is None
        else {"taps": list(estimator.taps), "hidden_units": estimator.hidden_units},
        "seeds": {"model": model.seed, "estimator": None if estimator is None else estimator.seed},
        "feature_names": list(feature_names) if feature_names else None,
        "blocks": [{"name": n, "shape": list(p.shape)} for n, p in blocks],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<I", len(head))
    body += head
    for _, p in blocks:
        body += np.ascontiguousarray(p, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def save_model(path, model: PredictiveModel, estimator: LossEstimator | None = None, feature_names=None):
    data = model_to_bytes(model, estimator, feature_names)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise ModelFormatError(f"truncated file while reading {what}", offset)
    return buf[offset : offset + size]


def model_from_bytes(buf: bytes):
    """Parse a container; returns ``(model, estimator_or_None, header)``."""
    if _take(buf, 0, 4, "magic") != MAGIC:
        raise ModelFormatError("not a lossgranger model file (bad magic)", 0)
    (hlen,) = struct.unpack("<I", _take(buf, 4, 4, "header length"))
    raw = _take(buf, 8, hlen, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"header is not valid JSON: {exc}", 8) from None
    version = header.get("schema_version")
    if version != SCHEMA_VERSION or header.get("format") != FORMAT_NAME:
        raise UnsupportedVersionError(
            f"unsupported model schema {header.get('format')!r} version {version!r}; "
            f"this build reads version {SCHEMA_VERSION}"
        )

    offset = 8 + hlen
    params = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw_block = _take(buf, offset, 8 * n, f"block {block['name']}")
        params[block["name"]] = np.frombuffer(raw_block, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    (crc,) = struct.unpack("<I", _take(buf, offset, 4, "checksum"))
    if offset + 4 != len(buf):
        raise ModelFormatError("trailing bytes after checksum", offset + 4)
    if zlib.crc32(buf[:offset]) != crc:
        raise ModelFormatError("checksum mismatch", offset)

    try:
        arch = header["architecture"]
        specs = [LayerSpec(int(a), int(b), str(act)) for a, b, act in arch["layers"]]
        n_layers = len(specs)
        model = PredictiveModel(
            specs,
            [params[f"layer{i}.weight"] for i in range(n_layers)],
            [params[f"layer{i}.bias"] for i in range(n_layers)],
            dropout_rate=float(arch["dropout_rate"]),
            seed=header["seeds"]["model"],
        )
        estimator = None
        if header["estimator"] is not None:
            taps = header["estimator"]["taps"]
            estimator = LossEstimator(
                list(taps),
                [params[f"tap{t}.weight"] for t in taps],
                [params[f"tap{t}.bias"] for t in taps],
                params["head.weight"],
                params["head.bias"],
                seed=header["seeds"]["estimator"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent header: {exc}", 8) from None
    return model, estimator, header


def load_model(path):
    """Returns ``(model, estimator_or_None)``."""
    model, estimator, _ = load_model_with_header(path)
    return model, estimator


def load_model_with_header(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return model_from_bytes(buf)
