"""Declarative model configuration: parsing, shape propagation, parameter
and MAC accounting, and the accelerator deployability check.

Config text format, one directive per line, '#' starts a comment:

    input 3 88 88          # channels height width
    head 4 2 1             # grid S, boxes per cell B, classes C
    conv3x3 3 16           # in_channels out_channels
    relu
    maxpool2x2
    flatten
    fc 64 256              # in_features out_features

The layer list must type-check under shape propagation and the final fc
must produce exactly S*S*(B*5 + C) outputs.
"""

from dataclasses import dataclass, field

LAYER_KINDS = ("conv3x3", "maxpool2x2", "flatten", "fc", "relu")

MAX78000_WEIGHT_LIMIT = 442 * 1024      # bytes of weight memory
MAX78000_MAX_H = 90                      # input must be < 90 x < 91
MAX78000_MAX_W = 91


class ConfigError(ValueError):
    """Model config rejected; carries a 1-based line/column where known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0


@dataclass
class ModelConfig:
    input_shape: tuple          # (3, H, W)
    layers: list = field(default_factory=list)
    grid: int = 4               # S
    boxes_per_cell: int = 2     # B
    num_classes: int = 1        # C

    @property
    def head_size(self):
        return self.grid * self.grid * (self.boxes_per_cell * 5 + self.num_classes)


def shape_chain(cfg):
    """Propagate shapes through the layer list.

    Returns one entry per layer: (C,H,W) tuples before the flatten, flat
    lengths after. Raises ConfigError on any inconsistency.
    """
    shape = cfg.input_shape
    chain = []
    for i, layer in enumerate(cfg.layers):
        if layer.kind == "conv3x3":
            if not isinstance(shape, tuple):
                raise ConfigError(f"layer {i}: conv after flatten")
            c, h, w = shape
            if layer.in_channels != c:
                raise ConfigError(
                    f"layer {i}: conv expects {layer.in_channels} channels, "
                    f"input has {c}")
            shape = (layer.out_channels, h, w)
        elif layer.kind == "maxpool2x2":
            if not isinstance(shape, tuple):
                raise ConfigError(f"layer {i}: pool after flatten")
            c, h, w = shape
            if h < 2 or w < 2:
                raise ConfigError(f"layer {i}: pool on {h}x{w} input")
            shape = (c, h // 2, w // 2)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "flatten":
            if not isinstance(shape, tuple):
                raise ConfigError(f"layer {i}: duplicate flatten")
            c, h, w = shape
            shape = c * h * w
        elif layer.kind == "fc":
            if isinstance(shape, tuple):
                raise ConfigError(f"layer {i}: fc before flatten")
            if layer.in_features != shape:
                raise ConfigError(
                    f"layer {i}: fc expects {layer.in_features} features, "
                    f"input has {shape}")
            shape = layer.out_features
        else:
            raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
        chain.append(shape)
    return chain


def validate(cfg):
    """Full structural validation; returns the shape chain."""
    c, h, w = cfg.input_shape
    if c != 3 or h < 1 or w < 1:
        raise ConfigError(f"input shape must be (3,H,W) with H,W >= 1, "
                          f"got {cfg.input_shape}")
    if cfg.grid < 1 or cfg.boxes_per_cell < 1 or cfg.num_classes < 1:
        raise ConfigError("head parameters must be positive")
    for i, layer in enumerate(cfg.layers):
        if layer.kind == "conv3x3" and (layer.in_channels < 1 or layer.out_channels < 1):
            raise ConfigError(f"layer {i}: channel counts must be positive")
        if layer.kind == "fc" and (layer.in_features < 1 or layer.out_features < 1):
            raise ConfigError(f"layer {i}: feature counts must be positive")
    chain = shape_chain(cfg)
    if not chain or isinstance(chain[-1], tuple):
        raise ConfigError("model must end in a flat output")
    if chain[-1] != cfg.head_size:
        raise ConfigError(
            f"final output length {chain[-1]} does not match head "
            f"S*S*(B*5+C) = {cfg.head_size}")
    return chain


def parse_model_config(text):
    """Parse config text into a validated ModelConfig."""
    input_shape = None
    head = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        col = len(line) - len(line.lstrip()) + 1
        tokens = line.split()
        kind, args = tokens[0], tokens[1:]

        def ints(n):
            if len(args) != n:
                raise ConfigError(f"'{kind}' takes {n} argument(s), got {len(args)}",
                                  lineno, col)
            try:
                return [int(a) for a in args]
            except ValueError:
                raise ConfigError(f"'{kind}' arguments must be integers: {args}",
                                  lineno, col) from None

        if kind == "input":
            input_shape = tuple(ints(3))
        elif kind == "head":
            head = ints(3)
        elif kind == "conv3x3":
            cin, cout = ints(2)
            layers.append(LayerSpec("conv3x3", in_channels=cin, out_channels=cout))
        elif kind == "fc":
            fin, fout = ints(2)
            layers.append(LayerSpec("fc", in_features=fin, out_features=fout))
        elif kind in ("maxpool2x2", "relu", "flatten"):
            ints(0)
            layers.append(LayerSpec(kind))
        elif kind.startswith("conv"):
            raise ConfigError(f"only 3x3 convolutions are supported, got {kind!r}",
                              lineno, col)
        else:
            raise ConfigError(f"unknown directive {kind!r}", lineno, col)
    if input_shape is None:
        raise ConfigError("missing 'input' directive")
    if head is None:
        raise ConfigError("missing 'head' directive")
    cfg = ModelConfig(input_shape=input_shape, layers=layers,
                      grid=head[0], boxes_per_cell=head[1], num_classes=head[2])
    validate(cfg)
    return cfg


def config_text(cfg, comment=None):
    """Render a ModelConfig back to canonical config text."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("input {} {} {}".format(*cfg.input_shape))
    lines.append(f"head {cfg.grid} {cfg.boxes_per_cell} {cfg.num_classes}")
    for layer in cfg.layers:
        if layer.kind == "conv3x3":
            lines.append(f"conv3x3 {layer.in_channels} {layer.out_channels}")
        elif layer.kind == "fc":
            lines.append(f"fc {layer.in_features} {layer.out_features}")
        else:
            lines.append(layer.kind)
    return "\n".join(lines) + "\n"


def count_params(cfg):
    """Per-layer and total learnable parameter counts (weights + biases)."""
    per_layer = []
    for layer in cfg.layers:
        if layer.kind == "conv3x3":
            n = 9 * layer.in_channels * layer.out_channels + layer.out_channels
        elif layer.kind == "fc":
            n = layer.in_features * layer.out_features + layer.out_features
        else:
            n = 0
        per_layer.append(n)
    return per_layer, sum(per_layer)


def count_macs(cfg):
    """Per-layer and total multiply-accumulate counts for one inference."""
    chain = shape_chain(cfg)
    per_layer = []
    for layer, out_shape in zip(cfg.layers, chain):
        if layer.kind == "conv3x3":
            _, h, w = out_shape
            n = h * w * 9 * layer.in_channels * layer.out_channels
        elif layer.kind == "fc":
            n = layer.in_features * layer.out_features
        else:
            n = 0
        per_layer.append(n)
    return per_layer, sum(per_layer)


def weight_bytes_int8(cfg):
    """Deployed weight memory: 1 byte per weight plus 4 bytes per bias."""
    total = 0
    for layer in cfg.layers:
        if layer.kind == "conv3x3":
            total += 9 * layer.in_channels * layer.out_channels + 4 * layer.out_channels
        elif layer.kind == "fc":
            total += layer.in_features * layer.out_features + 4 * layer.out_features
    return total


@dataclass
class DeployReport:
    profile: str
    passed: bool
    reasons: list
    weight_bytes: int
    weight_limit: int
    input_hw: tuple

    def render(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"deployability check [{self.profile}]: {status}",
                 f"  weight memory: {self.weight_bytes} / {self.weight_limit} bytes",
                 f"  input size:    {self.input_hw[0]}x{self.input_hw[1]} "
                 f"(limit < {MAX78000_MAX_H}x{MAX78000_MAX_W})"]
        for reason in self.reasons:
            lines.append(f"  reason: {reason}")
        return "\n".join(lines)


def check_deployability(cfg, profile="max78000"):
    """Check a config against the accelerator profile; failure is a report."""
    if profile != "max78000":
        raise ValueError(f"unknown deployability profile {profile!r}")
    validate(cfg)
    reasons = []
    wb = weight_bytes_int8(cfg)
    if wb > MAX78000_WEIGHT_LIMIT:
        reasons.append(f"weight memory: {wb} bytes exceeds "
                       f"{MAX78000_WEIGHT_LIMIT} byte limit")
    _, h, w = cfg.input_shape
    if h >= MAX78000_MAX_H or w >= MAX78000_MAX_W:
        reasons.append(f"input size: {h}x{w} not below "
                       f"{MAX78000_MAX_H}x{MAX78000_MAX_W}")
    for i, layer in enumerate(cfg.layers):
        if layer.kind not in LAYER_KINDS:
            reasons.append(f"unsupported op: layer {i} kind {layer.kind!r}")
    return DeployReport(profile=profile, passed=not reasons, reasons=reasons,
                        weight_bytes=wb, weight_limit=MAX78000_WEIGHT_LIMIT,
                        input_hw=(h, w))


def _trunk_88(widths):
    """Shared 88x88 trunk: two convs per stage, pool between stages."""
    layers = []
    cin = 3
    for stage, width in enumerate(widths):
        layers.append(LayerSpec("conv3x3", in_channels=cin, out_channels=width))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("conv3x3", in_channels=width, out_channels=width))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool2x2"))
        cin = width
    return layers, cin


def reference_config(classes=1):
    """Reference 88x88 model: 16-wide entry, 128-wide trunk end, 256 hidden fc.

    classes=1 uses two boxes per cell (head 4 2 1 -> 176 outputs);
    classes=3 uses one box per cell (head 4 1 3 -> 128 outputs).
    """
    if classes not in (1, 3):
        raise ValueError("reference models are defined for 1 or 3 classes")
    layers, cin = _trunk_88([16, 32, 64, 128])
    layers += [
        LayerSpec("conv3x3", in_channels=cin, out_channels=16),
        LayerSpec("relu"),
        LayerSpec("maxpool2x2"),                  # 5x5 -> 2x2
        LayerSpec("flatten"),                     # 16*2*2 = 64
        LayerSpec("fc", in_features=64, out_features=256),
        LayerSpec("relu"),
    ]
    boxes = 2 if classes == 1 else 1
    head_out = 16 * (boxes * 5 + classes)
    layers.append(LayerSpec("fc", in_features=256, out_features=head_out))
    cfg = ModelConfig(input_shape=(3, 88, 88), layers=layers, grid=4,
                      boxes_per_cell=boxes, num_classes=classes)
    validate(cfg)
    return cfg


def desk_config():
    """Desk-scale single-class model: one conv per stage, flatten at 5x5.

    Same operator inventory, grid and head as reference_config(1) but sized
    so a full train/quantize/evaluate cycle runs in minutes on one CPU
    core, and with the channel-reduction features flattened at 5x5 (the
    4x4 grid head trains much faster from grid-aligned features than from
    a further-pooled 2x2 summary).
    """
    widths = [16, 32, 48, 64]
    layers = []
    cin = 3
    for width in widths:
        layers.append(LayerSpec("conv3x3", in_channels=cin, out_channels=width))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool2x2"))
        cin = width
    layers += [
        LayerSpec("conv3x3", in_channels=cin, out_channels=16),
        LayerSpec("relu"),
        LayerSpec("flatten"),                     # 16*5*5 = 400
        LayerSpec("fc", in_features=400, out_features=256),
        LayerSpec("relu"),
        LayerSpec("fc", in_features=256, out_features=176),
    ]
    cfg = ModelConfig(input_shape=(3, 88, 88), layers=layers, grid=4,
                      boxes_per_cell=2, num_classes=1)
    validate(cfg)
    return cfg
