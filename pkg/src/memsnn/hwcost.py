"""Area / power / latency estimate: spike-based RRAM arrays vs an ADC/DAC design.

The mixed-signal baseline adds per-tile SAR ADCs (area, power) and
serialized DAC input plus ADC readout on every vector-matrix product
(latency).  Our design needs neither; its latency is the alpha current
response alone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .errors import ConfigError


@dataclass(frozen=True)
class HwConfig:
    layers: tuple[int, ...] = (784, 100, 10)
    devices_per_weight: int = 2
    tile_dim: int = 128
    tile_area: float = 2.77e-3  # mm^2 per 1T1R tile, 65 nm
    adc_area: float = 3e-3  # mm^2 per current-mode SAR ADC
    adcs_per_tile: int = 4
    adc_power: float = 2e-4  # W per 8-bit ADC
    adc_freq: float = 40e6  # Hz
    input_bits: int = 8
    lines_per_dac: int = 32
    bitlines_per_activation: int = 2
    v_on: float = 0.110
    v_off: float = 0.005
    v_ave: float | None = None
    r_on: float = 1e3
    r_off: float = 100e3
    r_ave: float | None = None
    activity: float = 0.02
    steps: int = 1000
    alpha_latency: float = 0.64e-3  # s
    switching_latency: float = 0.0  # s; memristor switching, ~100s of ns if included

    def __post_init__(self):
        if self.v_ave is None:
            object.__setattr__(self, "v_ave", (self.v_on + self.v_off) / 2)
        if self.r_ave is None:
            object.__setattr__(self, "r_ave", (self.r_on + self.r_off) / 2)
        if len(self.layers) < 2:
            raise ConfigError("need at least two layer sizes")
        positive = ("devices_per_weight", "tile_dim", "tile_area", "adcs_per_tile", "adc_freq",
                    "input_bits", "lines_per_dac", "bitlines_per_activation", "v_ave", "r_ave")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("adc_area", "adc_power", "activity", "steps", "alpha_latency", "switching_latency"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def count_cells(layers: Sequence[int], devices_per_weight: int = 2, tile_dim: int = 128) -> tuple[int, int]:
    """(cells, tiles) for a dense stack; each weight uses ``devices_per_weight`` cells."""
    if len(layers) < 2:
        raise ConfigError("need at least two layer sizes")
    synapses = sum(a * b for a, b in zip(layers[:-1], layers[1:]))
    cells = synapses * devices_per_weight
    return cells, math.ceil(cells / tile_dim**2)


@dataclass(frozen=True)
class Estimate:
    ours: float
    mixed: float

    @property
    def improvement(self) -> float:
        return self.mixed / self.ours if self.ours else math.inf


def tiles_of(cfg: HwConfig) -> int:
    return count_cells(cfg.layers, cfg.devices_per_weight, cfg.tile_dim)[1]


def tile_power(cfg: HwConfig) -> float:
    """Average power of one fully used tile: v_ave^2 / R_ave * cells * activity."""
    return cfg.v_ave**2 / cfg.r_ave * cfg.tile_dim**2 * cfg.activity


def power_estimate(cfg: HwConfig) -> Estimate:
    tiles = tiles_of(cfg)
    ours = tile_power(cfg) * tiles
    return Estimate(ours, ours + tiles * cfg.adcs_per_tile * cfg.adc_power)


def area_estimate(cfg: HwConfig) -> Estimate:
    tiles = tiles_of(cfg)
    ours = tiles * cfg.tile_area
    return Estimate(ours, ours + tiles * cfg.adcs_per_tile * cfg.adc_area)


def input_latency(cfg: HwConfig) -> float:
    """Serialized DAC input: each DAC drives ``lines_per_dac`` lines, ``input_bits`` cycles each."""
    return cfg.lines_per_dac * cfg.input_bits / cfg.adc_freq


def output_latency(cfg: HwConfig) -> float:
    """ADC readout: activations per tile shared over the tile's ADCs, one conversion per cycle."""
    activations = cfg.tile_dim // cfg.bitlines_per_activation
    return math.ceil(activations / cfg.adcs_per_tile) / cfg.adc_freq


def vmm_latency(cfg: HwConfig) -> float:
    return input_latency(cfg) + output_latency(cfg)


def latency_estimate(cfg: HwConfig) -> Estimate:
    ours = cfg.alpha_latency + cfg.switching_latency
    return Estimate(ours, vmm_latency(cfg) * cfg.steps + cfg.alpha_latency)


@dataclass
class HwReport:
    cells: int
    tiles: int
    tile_power: float
    area: Estimate
    power: Estimate
    latency: Estimate
    notes: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float, float, float]]:
        return [
            ("Area", "mm^2", self.area.ours, self.area.mixed, self.area.improvement),
            ("Power", "mW", self.power.ours * 1e3, self.power.mixed * 1e3, self.power.improvement),
            ("Latency", "ms", self.latency.ours * 1e3, self.latency.mixed * 1e3, self.latency.improvement),
        ]


def report(cfg: HwConfig = HwConfig()) -> HwReport:
    cells, tiles = count_cells(cfg.layers, cfg.devices_per_weight, cfg.tile_dim)
    notes = [
        f"area = tiles x {cfg.tile_area:g} mm^2 per tile; absolute areas in some published tables "
        "differ from this by a factor of 100, the improvement ratio does not",
        f"per-VMM conversion latency {vmm_latency(cfg) * 1e6:.3g} us "
        f"(input {input_latency(cfg) * 1e6:.3g} us + output {output_latency(cfg) * 1e6:.3g} us)",
    ]
    if cfg.switching_latency == 0:
        notes.append("memristor switching (~100s of ns) is not added to our latency")
    return HwReport(cells, tiles, tile_power(cfg), area_estimate(cfg), power_estimate(cfg),
                    latency_estimate(cfg), notes)


def format_table(rep: HwReport) -> str:
    lines = [
        f"cells={rep.cells} tiles={rep.tiles} tile_power_uW={rep.tile_power * 1e6:.2f}",
        f"{'Aspect':<8} {'Unit':<5} {'Ours':>10} {'Mixed':>10} {'Improvement':>12}",
    ]
    for name, unit, ours, mixed, imp in rep.rows():
        lines.append(f"{name:<8} {unit:<5} {ours:>10.4g} {mixed:>10.4g} {imp:>11.2f}x")
    lines += [f"# {n}" for n in rep.notes]
    return "\n".join(lines)


def format_csv(rep: HwReport) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["aspect", "unit", "ours", "mixed", "improvement"])
    for row in rep.rows():
        out.writerow([row[0], row[1], *(repr(float(x)) for x in row[2:])])
    return buf.getvalue()


def with_activity(cfg: HwConfig, activity: float) -> HwConfig:
    return replace(cfg, activity=activity)
