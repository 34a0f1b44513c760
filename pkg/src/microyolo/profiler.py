"""Deployment metrics from device measurements plus analytic model
accounting (MACs, weight/input/activation memory).

The profiler never estimates latency or power: it derives the four
deployment metrics (power efficiency, inference efficiency, latency,
energy per inference) from user-supplied measurements. The only analytic
quantities are the model's MAC count and memory footprint.

Measurement CSV: header `device,voltage_v,clock_mhz,latency_ms,power_mw`,
one device per row; blank lines and '#' comments are ignored.
"""

import math
from dataclasses import dataclass
from pathlib import Path

from .config import count_macs, count_params, shape_chain, weight_bytes_int8


@dataclass(frozen=True)
class DeviceMeasurement:
    device: str
    voltage_v: float
    clock_mhz: float
    latency_ms: float
    power_mw: float

    def __post_init__(self):
        for name in ("clock_mhz", "latency_ms", "power_mw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{self.device}: {name} must be positive")


def parse_measurements(text, source="measurements"):
    """Parse measurement CSV text; errors carry the offending line number."""
    rows = []
    header = None
    expected = ["device", "voltage_v", "clock_mhz", "latency_ms", "power_mw"]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if header is None:
            if parts != expected:
                raise ValueError(
                    f"{source}:{lineno}: header must be {','.join(expected)}")
            header = parts
            continue
        if len(parts) != 5:
            raise ValueError(f"{source}:{lineno}: expected 5 fields, "
                             f"got {len(parts)}")
        try:
            rows.append(DeviceMeasurement(
                device=parts[0], voltage_v=float(parts[1]),
                clock_mhz=float(parts[2]), latency_ms=float(parts[3]),
                power_mw=float(parts[4])))
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: {e}") from None
    if header is None:
        raise ValueError(f"{source}: empty measurement file")
    return rows


def load_measurements(path):
    path = Path(path)
    return parse_measurements(path.read_text(encoding="utf-8"), path.name)


def inference_efficiency(macs, latency_ms, clock_mhz):
    """Multiply-accumulates retired per clock cycle."""
    if macs <= 0 or latency_ms <= 0 or clock_mhz <= 0:
        raise ValueError("inference_efficiency needs positive inputs")
    return macs / (latency_ms * 1e-3 * clock_mhz * 1e6)


def power_efficiency(power_mw, clock_mhz):
    """Average power per clock rate, in microwatts per MHz."""
    if power_mw <= 0 or clock_mhz <= 0:
        raise ValueError("power_efficiency needs positive inputs")
    return power_mw * 1000.0 / clock_mhz


def energy_per_inference(power_mw, latency_ms):
    """Energy of one inference in microjoules (mW * ms)."""
    if power_mw <= 0 or latency_ms <= 0:
        raise ValueError("energy_per_inference needs positive inputs")
    return power_mw * latency_ms


@dataclass
class Footprint:
    weight_bytes: int
    input_bytes: int
    activation_ram_bytes: int
    total_params: int


def footprint(cfg):
    """Analytic int8 memory accounting for a model config.

    Activation RAM is the worst simultaneous (input + output) activation
    pair over the layer sequence, one byte per element.
    """
    chain = shape_chain(cfg)
    sizes = [int(math.prod(cfg.input_shape))]
    for out in chain:
        sizes.append(int(math.prod(out)) if isinstance(out, tuple) else int(out))
    act_ram = max(a + b for a, b in zip(sizes, sizes[1:]))
    _, total_params = count_params(cfg)
    return Footprint(weight_bytes=weight_bytes_int8(cfg),
                     input_bytes=int(math.prod(cfg.input_shape)),
                     activation_ram_bytes=act_ram,
                     total_params=total_params)


@dataclass
class DeviceMetrics:
    measurement: DeviceMeasurement
    power_eff_uw_per_mhz: float
    mac_per_cycle: float
    energy_uj: float
    latency_ratio: float = 1.0        # vs fastest device
    energy_ratio: float = 1.0         # vs most energy-efficient device


@dataclass
class ProfileReport:
    rows: list                        # DeviceMetrics, input order
    macs: int
    model_macs: int = None
    macs_note: str = ""

    def render(self):
        lines = [f"MACs per inference: {self.macs:,}"]
        if self.macs_note:
            lines.append(self.macs_note)
        header = (f"{'device':<12} {'V':>5} {'MHz':>6} {'ms':>9} "
                  f"{'mW':>8} {'uW/MHz':>8} {'MAC/cyc':>9} {'uJ/inf':>10}")
        with_ratios = len(self.rows) > 1
        if with_ratios:
            header += f" {'lat. x':>8} {'energy x':>9}"
        lines.append(header)
        for r in self.rows:
            m = r.measurement
            line = (f"{m.device:<12} {m.voltage_v:>5.2f} {m.clock_mhz:>6.0f} "
                    f"{m.latency_ms:>9.2f} {m.power_mw:>8.2f} "
                    f"{r.power_eff_uw_per_mhz:>8.3g} {r.mac_per_cycle:>9.3g} "
                    f"{r.energy_uj:>10.4g}")
            if with_ratios:
                line += f" {r.latency_ratio:>8.3g} {r.energy_ratio:>9.3g}"
            lines.append(line)
        return "\n".join(lines)


def compare_report(measurements, macs, model_macs=None):
    """Compute the four deployment metrics per device, plus ratios.

    macs is the MAC count used for inference efficiency (it may be supplied
    independently of the model, e.g. from a vendor-reported measurement);
    model_macs, if also given, is reported alongside and any discrepancy is
    flagged rather than reconciled.
    """
    if not measurements:
        raise ValueError("need at least one measurement row")
    if macs <= 0:
        raise ValueError("MAC count must be positive")
    rows = []
    for m in measurements:
        rows.append(DeviceMetrics(
            measurement=m,
            power_eff_uw_per_mhz=power_efficiency(m.power_mw, m.clock_mhz),
            mac_per_cycle=inference_efficiency(macs, m.latency_ms, m.clock_mhz),
            energy_uj=energy_per_inference(m.power_mw, m.latency_ms)))
    if len(rows) > 1:
        best_latency = min(r.measurement.latency_ms for r in rows)
        best_energy = min(r.energy_uj for r in rows)
        for r in rows:
            r.latency_ratio = r.measurement.latency_ms / best_latency
            r.energy_ratio = r.energy_uj / best_energy
    note = ""
    if model_macs is not None and model_macs != macs:
        note = (f"note: analytic model MAC count is {model_macs:,} "
                f"({model_macs / macs:.3g}x the assumed count); metrics use "
                f"the assumed count")
    return ProfileReport(rows=rows, macs=macs, model_macs=model_macs,
                         macs_note=note)


def report_macs(cfg):
    """Total analytic MAC count for a config (convenience wrapper)."""
    _, total = count_macs(cfg)
    return total
