"""Symmetric int8 quantization: scale selection, fake quantization for
quantization-aware training, and the bit-exact integer inference kernels.

Conventions (fixed so the integer path is reproducible down to the bit):
  * per-tensor scales, zero point 0, codes clamped to [-127, 127] by
    quantize(); layer outputs may use the full [-128, 127] accumulator range
  * rounding is half away from zero everywhere
  * requantization multiplies the int32 accumulator by an integer mantissa
    with 15 fractional bits, then applies a rounding right shift

The integer kernels accumulate via float64 GEMMs: every intermediate value
is an integer well below 2^53, so the arithmetic is exact and the results
are byte-identical across runs and platforms.
"""

from dataclasses import dataclass

import numpy as np

from .ops import _fill_cols, _strip_plan

INT32_MAX = 2 ** 31 - 1


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor scale; zero point is fixed at 0 and the width at 8 bits."""
    scale: float
    zero_point: int = 0
    bit_width: int = 8

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.zero_point != 0 or self.bit_width != 8:
            raise ValueError("only symmetric 8-bit quantization is supported")

    @property
    def limit(self):
        """Largest representable magnitude, 127 * scale."""
        return 127.0 * self.scale


def choose_scale(x):
    """Scale covering max(|x|) with 127 codes; all-zero tensors get scale 1."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot choose a scale for an empty tensor")
    peak = float(np.max(np.abs(x)))
    return QuantParams(scale=peak / 127.0 if peak > 0 else 1.0)


def round_half_away(x):
    """Round to nearest, halves away from zero (matches the integer kernels)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, qp):
    """Float tensor -> int8 codes, clamped symmetrically to [-127, 127]."""
    codes = round_half_away(np.asarray(x, np.float64) / qp.scale)
    return np.clip(codes, -127, 127).astype(np.int8)


def dequantize(codes, qp):
    return (np.asarray(codes, np.float32) * np.float32(qp.scale)).astype(np.float32)


def fake_quant_forward(x, qp):
    """Quantize/dequantize round trip used in the QAT forward pass."""
    return dequantize(quantize(x, qp), qp)


def fake_quant_backward(grad_out, x, qp):
    """Straight-through estimator: pass gradient inside +-127*scale, else 0."""
    mask = np.abs(x) <= qp.limit
    return np.where(mask, grad_out, 0).astype(np.float32)


def requant_multiplier(real_multiplier):
    """Encode a positive real multiplier as (mantissa, right_shift).

    mantissa has 15 fractional bits and lies in [2^14, 2^15); the encoding
    reproduces the input within 2^-15 relative error.
    """
    m = float(real_multiplier)
    if not m > 0:
        raise ValueError(f"requant multiplier must be positive, got {m}")
    shift = 15
    while m < 0.5:
        m *= 2.0
        shift += 1
    while m >= 1.0:
        m /= 2.0
        shift -= 1
    mant = int(round(m * (1 << 15)))
    if mant == 1 << 15:
        mant >>= 1
        shift -= 1
    if not 0 <= shift <= 255:
        raise ValueError(f"requant shift {shift} out of the encodable range")
    return mant, shift


def rounding_rshift(v, shift):
    """Arithmetic right shift with half-away-from-zero rounding, elementwise."""
    v = np.asarray(v, np.int64)
    if shift == 0:
        return v
    add = np.int64(1) << np.int64(shift - 1)
    pos = (v + add) >> np.int64(shift)
    neg = -((-v + add) >> np.int64(shift))
    return np.where(v >= 0, pos, neg)


@dataclass
class QuantizedLayer:
    """One integer conv/fc layer: int8 weights, int32 bias, requant encoding."""
    kind: str                 # "conv" or "fc"
    weight: np.ndarray        # int8, (Cout,Cin,3,3) or (M,N)
    bias: np.ndarray          # int32, scale = in_scale * w_scale
    in_scale: float
    w_scale: float
    out_scale: float
    multiplier: int
    shift: int
    relu: bool

    @property
    def real_multiplier(self):
        return self.in_scale * self.w_scale / self.out_scale


def quantize_layer(kind, weight, bias, in_qp, w_qp, out_qp, relu):
    """Build a QuantizedLayer from float weights and frozen scales.

    Scales are rounded through float32 so that an exported blob reloads to a
    bit-identical layer. Raises if the worst-case accumulator cannot fit in
    int32 (it always can for 3x3 kernels up to 512 input channels).
    """
    if kind not in ("conv", "fc"):
        raise ValueError(f"unknown layer kind {kind!r}")
    in_s = float(np.float32(in_qp.scale))
    w_s = float(np.float32(w_qp.scale))
    out_s = float(np.float32(out_qp.scale))
    wq = quantize(weight, QuantParams(w_s))
    bq64 = round_half_away(np.asarray(bias, np.float64) / (in_s * w_s))
    if np.abs(bq64).max(initial=0) > INT32_MAX:
        raise ValueError("bias does not fit in int32 at this scale")
    bq = bq64.astype(np.int32)
    terms = 9 * weight.shape[1] if kind == "conv" else weight.shape[1]
    worst = terms * 127 * 127 + int(np.abs(bq64).max(initial=0))
    if worst > INT32_MAX:
        raise ValueError(
            f"accumulator may overflow int32: worst case {worst}")
    mult, shift = requant_multiplier(in_s * w_s / out_s)
    return QuantizedLayer(kind=kind, weight=wq, bias=bq, in_scale=in_s,
                          w_scale=w_s, out_scale=out_s, multiplier=mult,
                          shift=shift, relu=relu)


def _requant_saturate(acc, layer):
    """int accumulator -> int8 codes: multiply, rounding shift, clamp, ReLU."""
    q = rounding_rshift(acc.astype(np.int64) * np.int64(layer.multiplier),
                        layer.shift)
    q = np.clip(q, -128, 127)
    if layer.relu:
        q = np.maximum(q, 0)
    return q.astype(np.int8)


def qconv_forward_nhwc(codes, layer):
    """Integer 3x3 convolution on int8 NHWC codes; returns int8 NHWC codes."""
    if layer.kind != "conv":
        raise ValueError("qconv_forward_nhwc needs a conv layer")
    n, h, w, c = codes.shape
    if c != layer.weight.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {c}, layer expects {layer.weight.shape[1]}")
    cout = layer.weight.shape[0]
    wmat = np.ascontiguousarray(
        layer.weight.transpose(2, 3, 1, 0).reshape(9 * c, cout)).astype(np.float64)
    xp = np.pad(codes, ((0, 0), (1, 1), (1, 1), (0, 0)))
    acc = np.empty((n, h, w, cout), dtype=np.float64)
    plan = _strip_plan(n, h, w, c, itemsize=8)
    buf = np.empty((max((s[1] - s[0]) * (s[3] - s[2]) for s in plan) * w, 9 * c),
                   dtype=np.float64)
    for strip in plan:
        n0, n1, h0, h1 = strip
        cb = _fill_cols(buf, xp, strip, h, w, c)
        np.matmul(cb, wmat, out=acc[n0:n1, h0:h1].reshape(cb.shape[0], cout))
    acc += layer.bias
    return _requant_saturate(acc, layer)


def qfc_forward(codes, layer):
    """Integer fully connected layer on int8 codes, (F,) or (N,F)."""
    if layer.kind != "fc":
        raise ValueError("qfc_forward needs an fc layer")
    if codes.shape[-1] != layer.weight.shape[1]:
        raise ValueError(
            f"fc length mismatch: input {codes.shape[-1]}, "
            f"layer expects {layer.weight.shape[1]}")
    acc = codes.astype(np.float64) @ layer.weight.T.astype(np.float64)
    acc += layer.bias
    return _requant_saturate(acc, layer)


def qconv2d_int8(codes, layer):
    """Integer convolution on a single CHW int8 tensor (reference surface)."""
    codes = np.asarray(codes, np.int8)
    if codes.ndim != 3:
        raise ValueError(f"expected CHW codes, got shape {codes.shape}")
    out = qconv_forward_nhwc(
        np.ascontiguousarray(codes.transpose(1, 2, 0))[None], layer)
    return np.ascontiguousarray(out[0].transpose(2, 0, 1))


def qfc_int8(codes, layer):
    """Integer fully connected layer on a single int8 vector."""
    return qfc_forward(np.asarray(codes, np.int8), layer)
