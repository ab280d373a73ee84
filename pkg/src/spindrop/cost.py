"""Dropout-module counts and their area, power and latency.

Per-module constants are kept as exact rationals so tables rebuilt from
them match published decimals without rounding drift.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from fractions import Fraction

from spindrop.errors import ParameterError

SPINDROP = "SpinDrop"
SPATIAL = "SpatialDrop"
METHODS = (SPINDROP, SPATIAL)

CONV = "conv"
TOPO_AVGPOOL = "topology-avgpool"
TOPO_FLATTEN = "topology-no-avgpool"
MODES = (CONV, TOPO_AVGPOOL, TOPO_FLATTEN)

# network dropout modes (see BinaryConvNet.dropout_mode) mapped onto cost modes
NETWORK_MODES = {"conv": CONV, "with-avgpool": TOPO_AVGPOOL, "flatten-no-avgpool": TOPO_FLATTEN}

ABSTRACT_ENERGY_FACTOR = "94.11"


@dataclass(frozen=True)
class ModuleCostConstants:
    area_per_module: Fraction = Fraction("8870.4") / 256  # um^2
    power_per_module: Fraction = Fraction("5.76") / 256  # mW
    sampling_latency: Fraction = Fraction(15)  # ns

    def __post_init__(self):
        for name in ("area_per_module", "power_per_module", "sampling_latency"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")


DEFAULT_CONSTANTS = ModuleCostConstants()


def dropout_module_count(method: str, mode: str, K: int = 1, C_in: int = 1, C_out: int = 1) -> int:
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}")
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if min(K, C_in, C_out) < 1:
        raise ParameterError(f"dimensions must be >= 1, got K={K} C_in={C_in} C_out={C_out}")
    if mode == CONV:
        return K * K * C_in if method == SPINDROP else C_in
    if mode == TOPO_FLATTEN and method == SPINDROP:
        return K * K * C_out
    return C_out


def layer_cost(count: int, constants: ModuleCostConstants = DEFAULT_CONSTANTS):
    """(area um^2, power mW, latency ns) for ``count`` modules; latency does not scale."""
    return count * constants.area_per_module, count * constants.power_per_module, constants.sampling_latency


def fmt(q) -> str:
    """Shortest decimal for an exact rational that terminates, else 10 places."""
    q = Fraction(q)
    if q.denominator == 1:
        return str(q.numerator)
    d = Decimal(q.numerator) / Decimal(q.denominator)
    text = format(d.normalize(), "f")
    if len(text.split(".")[-1]) > 10:
        text = format(d.quantize(Decimal("1e-10")), "f")
    return text


@dataclass(frozen=True)
class CostRow:
    layer: str
    method: str
    mode: str
    strategy: str
    modules: int
    area: Fraction
    power: Fraction
    latency: Fraction

    def as_dict(self):
        return {
            "layer": self.layer, "method": self.method, "mode": self.mode, "strategy": self.strategy,
            "modules": self.modules, "area_um2": fmt(self.area), "power_mW": fmt(self.power),
            "latency_ns": fmt(self.latency),
        }


@dataclass
class CostReport:
    rows: list = field(default_factory=list)

    def totals(self) -> dict:
        out = {}
        for m in METHODS:
            rs = [r for r in self.rows if r.method == m]
            out[m] = {
                "modules": sum(r.modules for r in rs),
                "area": sum((r.area for r in rs), Fraction(0)),
                "power": sum((r.power for r in rs), Fraction(0)),
                # modules sample in parallel, so layer latencies do not add
                "latency": max((r.latency for r in rs), default=Fraction(0)),
            }
        return out

    def reduction_factors(self) -> dict:
        t = self.totals()
        base, prop = t[SPINDROP], t[SPATIAL]
        if prop["modules"] == 0:
            return {}
        return {k: Fraction(base[k]) / prop[k] for k in ("modules", "area", "power")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["layer", "method", "mode", "strategy", "modules", "area_um2", "power_mW", "latency_ns"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.as_dict())
        for m, t in self.totals().items():
            w.writerow({"layer": "TOTAL", "method": m, "mode": "", "strategy": "", "modules": t["modules"],
                        "area_um2": fmt(t["area"]), "power_mW": fmt(t["power"]), "latency_ns": fmt(t["latency"])})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "rows": [r.as_dict() for r in self.rows],
            "totals": {m: {k: (v if k == "modules" else fmt(v)) for k, v in t.items()} for m, t in self.totals().items()},
            "reduction_factors": {k: fmt(v) for k, v in self.reduction_factors().items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cost_report(layers, strategies=("1",), constants: ModuleCostConstants = DEFAULT_CONSTANTS) -> CostReport:
    """Compare both methods on ``layers``, an iterable of (name, mode, K, C_in, C_out).

    Module counts do not depend on the mapping strategy; a row per strategy is
    emitted only so reports line up with strategy-indexed tables.
    """
    report = CostReport()
    for name, mode, K, C_in, C_out in layers:
        strat = strategies if mode == CONV else ("-",)
        for method in METHODS:
            for s in strat:
                n = dropout_module_count(method, mode, K, C_in, C_out)
                area, power, lat = layer_cost(n, constants)
                report.rows.append(CostRow(name, method, mode, s, n, area, power, lat))
    return report


def network_layers(net):
    """Cost-model layer tuples for the dropout targets of a BinaryConvNet."""
    out = []
    for i in net.placement.targets:
        layer = net.layers[i]
        mode = NETWORK_MODES[net.dropout_mode(i)]
        if mode == CONV:
            C_out, C_in, K, _ = layer.proxy.shape
            out.append((f"layer{i}", mode, K, C_in, C_out))
        else:
            # modules sit on the feature maps feeding the classifier
            prev = next(j for j in range(i - 1, -1, -1) if hasattr(net.layers[j], "proxy") and net.layers[j].proxy.ndim == 4)
            C_out, C_in, K, _ = net.layers[prev].proxy.shape
            out.append((f"layer{i}", mode, K, C_in, C_out))
    return out


def single_layer_report(C_in: int = 256, K: int = 3, C_out: int = 512, constants: ModuleCostConstants = DEFAULT_CONSTANTS) -> CostReport:
    """Overhead table for one layer configuration: conv rows per strategy, then both topology-wise cases."""
    return cost_report(
        [("layer-wise", CONV, K, C_in, C_out),
         ("topology-wise", TOPO_AVGPOOL, K, C_in, C_out),
         ("topology-wise", TOPO_FLATTEN, K, C_in, C_out)],
        strategies=("1", "2"), constants=constants,
    )


@dataclass(frozen=True)
class EnergyRow:
    work: str
    technology: str
    bits: int
    energy_uj: Decimal
    ratio: Decimal | None  # energy / proposed, truncated to 2 decimals


_ENERGY = (
    ("Cai et al.", "FPGA", 8, "18.97"),
    ("Jia et al.", "FPGA", 8, "46.00"),
    ("Awano et al.", "FPGA", 7, "21.09"),
    ("Malhotra et al.", "RRAM", 4, "9.30"),
    ("SpinDrop", "STT-MRAM", 1, "2.00"),
    ("Proposed", "STT-MRAM", 1, "0.68"),
)


def truncate2(x: Decimal) -> Decimal:
    return x.quantize(Decimal("0.01"), rounding=ROUND_DOWN)


def energy_reference_table() -> list:
    """Published per-image energies (quoted data, never simulated) with ratios to the proposed design."""
    proposed = Decimal(_ENERGY[-1][3])
    rows = []
    for work, tech, bits, e in _ENERGY:
        e = Decimal(e)
        ratio = None if work == "Proposed" else truncate2(e / proposed)
        rows.append(EnergyRow(work, tech, bits, e, ratio))
    return rows


def energy_summary() -> str:
    lines = ["work,technology,bits,energy_uJ_per_image,ratio_vs_proposed"]
    for r in energy_reference_table():
        lines.append(f"{r.work},{r.technology},{r.bits},{r.energy_uj},{'' if r.ratio is None else r.ratio}")
    best = max(r.ratio for r in energy_reference_table() if r.ratio is not None)
    lines.append(
        f"# headline factor quoted as {ABSTRACT_ENERGY_FACTOR}x; largest ratio derivable from the rows above is "
        f"{best}x, so the quoted figure does not follow from this table"
    )
    return "\n".join(lines) + "\n"
