"""Binary serialization for checkpoints and quantized model blobs.

Checkpoint (.ckpt), little-endian:
    magic "TYLO" | u32 version | u32 len | config text (utf-8)
    | u32 len | metadata JSON | per parameter layer, in declaration order:
    float32 weights then float32 bias, sizes derived from the config.

Quantized blob (.tylq), little-endian:
    magic "TYLQ" | u32 version | 32-byte sha256 of the config text
    | per parameter layer: int8 weights, int32 biases,
      f32 in_scale, f32 w_scale, f32 out_scale, i32 multiplier, u8 shift.

The blob does not embed the config; loading requires the config text and
verifies its digest. Round trips are bitwise lossless.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import parse_model_config
from .quant import QuantizedLayer

CKPT_MAGIC = b"TYLO"
BLOB_MAGIC = b"TYLQ"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Serialized file rejected (bad magic, version, digest or truncation)."""


@dataclass
class Checkpoint:
    config_text: str
    cfg: object
    params: dict          # layer index -> (w, b) float32 arrays
    meta: dict            # epoch, phase, seed, optional quant scales


def _param_shapes(cfg):
    shapes = {}
    for i, layer in enumerate(cfg.layers):
        if layer.kind == "conv3x3":
            shapes[i] = ((layer.out_channels, layer.in_channels, 3, 3),
                         (layer.out_channels,))
        elif layer.kind == "fc":
            shapes[i] = ((layer.out_features, layer.in_features),
                         (layer.out_features,))
    return shapes


def save_checkpoint(path, config_text, params, meta):
    """Write a float checkpoint; layer arrays must match the config exactly."""
    cfg = parse_model_config(config_text)
    shapes = _param_shapes(cfg)
    if sorted(shapes) != sorted(params):
        raise ValueError("checkpoint params do not cover the config's layers")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    cfg_bytes = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for i in sorted(shapes):
            w, b = params[i]
            if w.shape != shapes[i][0] or b.shape != shapes[i][1]:
                raise ValueError(
                    f"layer {i} arrays {w.shape}/{b.shape} do not match "
                    f"config-derived {shapes[i]}")
            f.write(np.ascontiguousarray(w, np.float32).tobytes())
            f.write(np.ascontiguousarray(b, np.float32).tobytes())
    return path


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint; inverse of save_checkpoint, bitwise."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CKPT_MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config_text = _read_exact(f, n, "config text").decode("utf-8")
        (n,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, n, "metadata").decode("utf-8"))
        cfg = parse_model_config(config_text)
        params = {}
        for i, (wshape, bshape) in sorted(_param_shapes(cfg).items()):
            wn = int(np.prod(wshape))
            bn = int(np.prod(bshape))
            w = np.frombuffer(_read_exact(f, 4 * wn, f"layer {i} weights"),
                              dtype="<f4").reshape(wshape).copy()
            b = np.frombuffer(_read_exact(f, 4 * bn, f"layer {i} bias"),
                              dtype="<f4").reshape(bshape).copy()
            params[i] = (w, b)
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(config_text=config_text, cfg=cfg, params=params, meta=meta)


def config_digest(config_text):
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def export_quantized(path, config_text, qlayers):
    """Write the integer model blob for a quantized layer chain."""
    cfg = parse_model_config(config_text)
    shapes = _param_shapes(cfg)
    if len(shapes) != len(qlayers):
        raise ValueError(
            f"config has {len(shapes)} parameter layers, got {len(qlayers)}")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(config_digest(config_text))
        for (i, (wshape, _)), ql in zip(sorted(shapes.items()), qlayers):
            if ql.weight.shape != wshape:
                raise ValueError(
                    f"layer {i} quantized weights {ql.weight.shape} do not "
                    f"match config-derived {wshape}")
            f.write(np.ascontiguousarray(ql.weight, np.int8).tobytes())
            f.write(np.ascontiguousarray(ql.bias, "<i4").tobytes())
            f.write(struct.pack("<fffiB", ql.in_scale, ql.w_scale,
                                ql.out_scale, ql.multiplier, ql.shift))
    return path


def load_quantized(path, config_text):
    """Read a quantized blob; the config text must match the stored digest."""
    cfg = parse_model_config(config_text)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != BLOB_MAGIC:
            raise FormatError("not a quantized model blob (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported blob version {version}")
        digest = _read_exact(f, 32, "config digest")
        if digest != config_digest(config_text):
            raise FormatError("config digest mismatch: blob was exported "
                              "from a different model config")
        qlayers = []
        layers = cfg.layers
        for i, (wshape, bshape) in sorted(_param_shapes(cfg).items()):
            wn = int(np.prod(wshape))
            bn = int(np.prod(bshape))
            w = np.frombuffer(_read_exact(f, wn, f"layer {i} weights"),
                              dtype=np.int8).reshape(wshape).copy()
            b = np.frombuffer(_read_exact(f, 4 * bn, f"layer {i} bias"),
                              dtype="<i4").reshape(bshape).copy()
            in_s, w_s, out_s, mult, shift = struct.unpack(
                "<fffiB", _read_exact(f, 17, f"layer {i} scales"))
            relu_next = i + 1 < len(layers) and layers[i + 1].kind == "relu"
            kind = "conv" if layers[i].kind == "conv3x3" else "fc"
            qlayers.append(QuantizedLayer(
                kind=kind, weight=w, bias=b, in_scale=float(in_s),
                w_scale=float(w_s), out_scale=float(out_s),
                multiplier=mult, shift=shift, relu=relu_next))
        if f.read(1):
            raise FormatError("trailing bytes after blob payload")
    return cfg, qlayers
