"""Runnable networks built from a ModelConfig.

Network holds float32 parameters and runs batched forward/backward passes,
optionally with fake quantization (quantization-aware mode). Int8Network
runs the bit-exact integer inference path from quantized layers.

Internally activations are NHWC; the flatten layer re-orders features to
the CHW convention so fc weights are layout-independent.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import shape_chain, validate
from .quant import (QuantParams, choose_scale, dequantize,
                    fake_quant_backward, fake_quant_forward,
                    qconv_forward_nhwc, qfc_forward, quantize, quantize_layer)

# Network inputs are (p - 128)/128, i.e. the int8 code grid with step 1/128.
INPUT_SCALE = 1.0 / 128.0


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class QatState:
    """Frozen weight scales plus observed/frozen activation scales.

    mode "observe": weights are fake-quantized while activation peaks are
    tracked; activations pass through unquantized. mode "active": both
    weights and activations are fake-quantized with frozen scales.
    """
    mode: str
    weight_scales: dict                    # layer index -> QuantParams
    act_scales: dict = field(default_factory=dict)   # point id -> QuantParams
    running_max: dict = field(default_factory=dict)  # point id -> float

    def observe(self, point, x):
        peak = float(np.max(np.abs(x)))
        self.running_max[point] = max(self.running_max.get(point, 0.0), peak)

    def freeze_act_scales(self):
        self.act_scales = {
            point: QuantParams(peak / 127.0 if peak > 0 else 1.0)
            for point, peak in self.running_max.items()}
        # the input is already on the (p-128)/128 code grid; pin its scale
        # so the float and integer paths quantize it identically
        self.act_scales[-1] = QuantParams(INPUT_SCALE)
        self.mode = "active"


class Network:
    """Float32 network: forward, backward and parameter access."""

    def __init__(self, cfg, params):
        validate(cfg)
        self.cfg = cfg
        self.params = params          # layer index -> (w, b) for conv/fc
        self.qat = None
        # activation quantization points: the input (-1), every relu, and
        # the final layer when it is not already followed by a relu
        self._act_points = {-1}
        for i, layer in enumerate(cfg.layers):
            if layer.kind == "relu":
                self._act_points.add(i)
        if cfg.layers[-1].kind != "relu":
            self._act_points.add(len(cfg.layers) - 1)

    @classmethod
    def initialize(cls, cfg, seed):
        """Kaiming-uniform (fan-in) weights, zero biases, in layer order."""
        rng = np.random.default_rng(seed)
        params = {}
        for i, layer in enumerate(cfg.layers):
            if layer.kind == "conv3x3":
                w = _kaiming_uniform(
                    rng, (layer.out_channels, layer.in_channels, 3, 3),
                    fan_in=9 * layer.in_channels)
                params[i] = (w, np.zeros(layer.out_channels, np.float32))
            elif layer.kind == "fc":
                w = _kaiming_uniform(
                    rng, (layer.out_features, layer.in_features),
                    fan_in=layer.in_features)
                params[i] = (w, np.zeros(layer.out_features, np.float32))
        return cls(cfg, params)

    def param_layers(self):
        """Layer indices that carry parameters, in declaration order."""
        return sorted(self.params)

    def start_qat(self):
        """Freeze weight scales from the current weights; begin observing."""
        scales = {i: choose_scale(self.params[i][0]) for i in self.params}
        self.qat = QatState(mode="observe", weight_scales=scales)
        return self.qat

    def _maybe_quant_act(self, point, x, caches):
        if self.qat is None or point not in self._act_points:
            return x
        if self.qat.mode == "observe":
            self.qat.observe(point, x)
            return x
        qp = self.qat.act_scales[point]
        if caches is not None:
            caches.append(("actq", point, x, qp))
        return fake_quant_forward(x, qp)

    def _effective_weights(self, i):
        w, b = self.params[i]
        if self.qat is None:
            return w, b, None
        qp = self.qat.weight_scales[i]
        return fake_quant_forward(w, qp), b, qp

    def forward_batch(self, x_nchw, want_caches=False):
        """Run a (N,3,H,W) float32 batch; returns (N, head_size) outputs.

        With want_caches=True also returns the cache list consumed by
        backward_batch.
        """
        x = np.ascontiguousarray(
            np.asarray(x_nchw, np.float32).transpose(0, 2, 3, 1))
        caches = [] if want_caches else None
        x = self._maybe_quant_act(-1, x, caches)
        for i, layer in enumerate(self.cfg.layers):
            if layer.kind == "conv3x3":
                w_eff, b, w_qp = self._effective_weights(i)
                if want_caches:
                    caches.append(("conv", i, x, w_eff, w_qp))
                x = ops.conv_forward_nhwc(x, w_eff, b)
            elif layer.kind == "maxpool2x2":
                if want_caches:
                    x, cache = ops.maxpool_forward_nhwc(x, return_cache=True)
                    caches.append(("pool", i, cache))
                else:
                    x = ops.maxpool_forward_nhwc(x)
            elif layer.kind == "relu":
                if want_caches:
                    caches.append(("relu", i, x))
                x = ops.relu_forward(x)
            elif layer.kind == "flatten":
                n, h, w, c = x.shape
                if want_caches:
                    caches.append(("flatten", i, (h, w, c)))
                x = np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(n, -1)
            elif layer.kind == "fc":
                w_eff, b, w_qp = self._effective_weights(i)
                if want_caches:
                    caches.append(("fc", i, x, w_eff, w_qp))
                x = ops.fc_forward(x, w_eff, b)
            x = self._maybe_quant_act(i, x, caches)
        if want_caches:
            return x, caches
        return x

    def backward_batch(self, grad_out, caches):
        """Backpropagate (N, head_size) output gradients through the caches.

        Returns {layer index: (grad_w, grad_b)} for every parameter layer.
        """
        grads = {}
        g = np.asarray(grad_out, np.float32)
        for entry in reversed(caches):
            kind = entry[0]
            if kind == "actq":
                _, _point, x_pre, qp = entry
                g = fake_quant_backward(g, x_pre, qp)
            elif kind == "fc":
                _, i, x_in, w_eff, w_qp = entry
                g, gw, gb = ops.fc_backward(g, x_in, w_eff)
                if w_qp is not None:
                    gw = fake_quant_backward(gw, self.params[i][0], w_qp)
                grads[i] = (gw, gb)
            elif kind == "flatten":
                _, _i, (h, w, c) = entry
                n = g.shape[0]
                g = np.ascontiguousarray(
                    g.reshape(n, c, h, w).transpose(0, 2, 3, 1))
            elif kind == "relu":
                _, _i, x_in = entry
                g = ops.relu_backward(g, x_in)
            elif kind == "pool":
                _, _i, cache = entry
                g = ops.maxpool_backward_nhwc(g, cache)
            elif kind == "conv":
                _, i, x_in, w_eff, w_qp = entry
                g, gw, gb = ops.conv_backward_nhwc(g, x_in, w_eff)
                if w_qp is not None:
                    gw = fake_quant_backward(gw, self.params[i][0], w_qp)
                grads[i] = (gw, gb)
        return grads

    def forward_single(self, x_chw):
        """Convenience single-image forward; returns the flat head output."""
        return self.forward_batch(np.asarray(x_chw, np.float32)[None])[0]


def build_quantized_layers(net):
    """Turn a QAT-calibrated Network into the integer layer chain.

    Requires net.qat with mode "active" (frozen activation scales). The
    scale of each conv/fc input is the frozen scale of the activation point
    feeding it; a relu directly after a layer is folded into that layer.
    """
    qat = net.qat
    if qat is None or qat.mode != "active" or not qat.act_scales:
        raise ValueError("network has no frozen activation scales; "
                         "run quantization-aware calibration first")
    layers = net.cfg.layers
    qlayers = []
    current = QuantParams(INPUT_SCALE)
    for i, layer in enumerate(layers):
        if layer.kind in ("maxpool2x2", "flatten", "relu"):
            continue
        if layer.kind not in ("conv3x3", "fc"):
            raise ValueError(f"cannot quantize layer kind {layer.kind!r}")
        relu_next = i + 1 < len(layers) and layers[i + 1].kind == "relu"
        point = i + 1 if relu_next else i
        if point not in qat.act_scales:
            raise ValueError(f"no frozen activation scale for layer {i}")
        out_qp = qat.act_scales[point]
        w, b = net.params[i]
        kind = "conv" if layer.kind == "conv3x3" else "fc"
        ql = quantize_layer(kind, w, b, current, qat.weight_scales[i],
                            out_qp, relu=relu_next)
        qlayers.append(ql)
        current = out_qp
    return qlayers


class Int8Network:
    """Bit-exact integer inference over a quantized layer chain."""

    def __init__(self, cfg, qlayers):
        validate(cfg)
        self.cfg = cfg
        self.qlayers = list(qlayers)
        expected = [l for l in cfg.layers if l.kind in ("conv3x3", "fc")]
        if len(expected) != len(self.qlayers):
            raise ValueError(
                f"config has {len(expected)} parameter layers, "
                f"got {len(self.qlayers)} quantized layers")
        self.input_scale = QuantParams(self.qlayers[0].in_scale)
        self.output_scale = QuantParams(self.qlayers[-1].out_scale)

    def forward_batch(self, x_nchw):
        """Quantize the float input, run the integer chain, dequantize."""
        x = np.ascontiguousarray(
            np.asarray(x_nchw, np.float32).transpose(0, 2, 3, 1))
        codes = quantize(x, self.input_scale)
        qi = 0
        for layer in self.cfg.layers:
            if layer.kind == "conv3x3":
                codes = qconv_forward_nhwc(codes, self.qlayers[qi])
                qi += 1
            elif layer.kind == "fc":
                codes = qfc_forward(codes, self.qlayers[qi])
                qi += 1
            elif layer.kind == "maxpool2x2":
                codes = _maxpool_codes(codes)
            elif layer.kind == "flatten":
                n, h, w, c = codes.shape
                codes = np.ascontiguousarray(
                    codes.transpose(0, 3, 1, 2)).reshape(n, -1)
            # relu layers are folded into the preceding quantized layer
        return dequantize(codes, self.output_scale)

    def forward_single(self, x_chw):
        return self.forward_batch(np.asarray(x_chw, np.float32)[None])[0]


def _maxpool_codes(codes):
    """2x2/stride-2 max pool on int8 codes (scale-preserving)."""
    n, h, w, c = codes.shape
    h2, w2 = h // 2, w // 2
    blk = np.ascontiguousarray(
        codes[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)).reshape(n, h2, w2, 4, c)
    return blk.max(axis=3)


def dimension_chain(cfg):
    """Spatial sizes entering each pooling stage, plus the final one.

    For the reference 88x88 model this is [88, 44, 22, 11, 5].
    """
    sizes = [cfg.input_shape[1]]
    for layer, out in zip(cfg.layers, shape_chain(cfg)):
        if layer.kind == "maxpool2x2":
            sizes.append(out[1])
    return sizes
