"""Operation accounting and the MAC/AC energy model.

Every synaptic operation is classified by the kinds of its two operands:
binary x binary is a bitwise AND, binary or small-integer x real is an
accumulate (one AC per unit of the integer operand), real x real is a MAC.
Energies use the 45 nm figures of 4.6 pJ per 32-bit MAC and 0.9 pJ per AC.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

# Column order of the layer-wise firing-rate table.
FIRING_COLUMNS = ("Q", "K", "V", "Topo Buffer", "Attn Out", "MLP 1", "MLP 2")
# Layers whose synaptic input is spikes (their ops are SOPs).
SPIKE_DRIVEN = ("Q", "K", "V", "Topo Buffer", "MLP 1", "MLP 2")

KINDS = ("binary", "integer", "real")


def classify_op(lhs_kind: str, rhs_kind: str) -> str:
    """Return ``"bitand"``, ``"sop"`` or ``"mac"`` for a product of two operand kinds."""
    for k in (lhs_kind, rhs_kind):
        if k not in KINDS:
            raise ValueError(f"unknown operand kind {k!r}")
    kinds = {lhs_kind, rhs_kind}
    if kinds == {"binary"}:
        return "bitand"
    if "real" in kinds and kinds != {"real"}:
        return "sop"
    if kinds == {"real"}:
        return "mac"
    # integer x binary / integer x integer: still accumulate-only
    return "sop"


@dataclass
class LayerRecord:
    synapses: int = 0  # ops if every input element carried exactly one event
    dense_ops: int = 0  # ANN-equivalent MAC count
    potential_ops: int = 0  # upper bound on executed ops for this input value range
    executed_macs: int = 0
    executed_sops: int = 0
    bitwise_ands: int = 0
    neuron_steps: int = 0
    spike_events: int = 0
    input_events: int = 0
    input_elements: int = 0

    def merge(self, other: "LayerRecord") -> "LayerRecord":
        return LayerRecord(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    @property
    def firing_rate(self) -> float | None:
        if self.neuron_steps == 0:
            return None
        return self.spike_events / self.neuron_steps

    @property
    def input_rate(self) -> float | None:
        if self.input_elements == 0:
            return None
        return self.input_events / self.input_elements


def _count(x: np.ndarray) -> int:
    return int(np.rint(np.sum(x, dtype=np.float64)))


@dataclass
class OpCounter:
    """Per-layer op records keyed ``"<scope>.<layer>"``, e.g. ``"block1.Q"``."""

    records: dict[str, LayerRecord] = field(default_factory=dict)

    def record(self, key: str) -> LayerRecord:
        if key not in self.records:
            self.records[key] = LayerRecord()
        return self.records[key]

    def synapse(self, key: str, x: np.ndarray, fanout, input_kind: str, weight_kind: str = "real", max_value: int = 1):
        """Charge a layer whose input tensor ``x`` drives ``fanout`` synapses per element.

        ``fanout`` is either an int or an array broadcastable to ``x`` (per
        element fan-out, for sparse connectivity).
        """
        r = self.record(key)
        op = classify_op(input_kind, weight_kind)
        fan = np.broadcast_to(np.asarray(fanout, dtype=np.int64), x.shape)
        syn = int(fan.sum())
        r.synapses += syn
        r.dense_ops += syn if np.ndim(fanout) == 0 else int(x.size * np.max(fanout, initial=0))
        if op == "mac":
            r.executed_macs += syn
            r.potential_ops += syn
        elif op == "sop":
            events = x if input_kind != "real" else (x != 0)
            r.executed_sops += int(np.rint(np.sum(events * fan, dtype=np.float64)))
            r.potential_ops += syn * max_value
            r.input_events += _count(events)
            r.input_elements += x.size
        else:
            r.bitwise_ands += x.size
            r.potential_ops += x.size

    def bitand(self, key: str, n: int) -> None:
        r = self.record(key)
        r.bitwise_ands += n
        r.potential_ops += n
        r.dense_ops += n

    def macs(self, key: str, n: int, dense: int | None = None) -> None:
        r = self.record(key)
        r.executed_macs += n
        r.potential_ops += n
        r.dense_ops += n if dense is None else dense

    def acs(self, key: str, n: int, dense: int | None = None) -> None:
        r = self.record(key)
        r.executed_sops += n
        r.potential_ops += n
        r.dense_ops += n if dense is None else dense

    def neurons(self, key: str, spikes: np.ndarray) -> None:
        r = self.record(key)
        r.neuron_steps += spikes.size
        r.spike_events += _count(spikes)

    def merge(self, other: "OpCounter") -> "OpCounter":
        out = OpCounter({k: LayerRecord(**asdict(v)) for k, v in self.records.items()})
        for k, v in other.records.items():
            out.records[k] = out.records[k].merge(v) if k in out.records else LayerRecord(**asdict(v))
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, OpCounter) and {k: asdict(v) for k, v in self.records.items()} == {
            k: asdict(v) for k, v in other.records.items()
        }

    def blocks(self) -> list[int]:
        out = set()
        for k in self.records:
            scope = k.split(".", 1)[0]
            if scope.startswith("block") and scope[5:].isdigit():
                out.add(int(scope[5:]))
        return sorted(out)

    def to_json(self) -> dict:
        return {k: asdict(v) for k, v in self.records.items()}


# --------------------------------------------------------------------------- #


def firing_rates(counter: OpCounter) -> list[dict]:
    """Rows ``{"Block": l, "Q": rate, ...}`` for every block plus a final ``"Avg"`` row.

    A layer that never ran has an undefined rate, reported as ``None``.
    """
    blocks = counter.blocks()
    if not blocks:
        raise ValueError("no block layers recorded; run a forward pass first")
    rows = []
    for b in blocks:
        row: dict = {"Block": b}
        for col in FIRING_COLUMNS:
            rec = counter.records.get(f"block{b}.{col}")
            row[col] = None if rec is None else rec.firing_rate
        rows.append(row)
    avg: dict = {"Block": "Avg"}
    for col in FIRING_COLUMNS:
        vals = [r[col] for r in rows]
        avg[col] = None if any(v is None for v in vals) else float(np.mean(vals))
    rows.append(avg)
    return rows


def firing_rates_csv(rows: list[dict]) -> str:
    """CSV with one row per block and rates in percent (two decimals); undefined rates as ``NA``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Block", *FIRING_COLUMNS])
    for row in rows:
        w.writerow([row["Block"], *("NA" if row[c] is None else f"{100 * row[c]:.2f}" for c in FIRING_COLUMNS)])
    return buf.getvalue()


@dataclass
class EnergyReport:
    e_mac_pj: float
    e_ac_pj: float
    layers: dict[str, dict]
    total_macs: int
    total_sops: int
    total_bitwise_ands: int
    e_snn_j: float
    e_ann_j: float
    snn_to_ann_ratio: float
    sop_rate_check_max_rel_err: float
    firing_rates: list[dict]

    @property
    def e_snn_mj(self) -> float:
        return self.e_snn_j * 1e3

    def to_json(self) -> dict:
        d = asdict(self)
        d["e_snn_mj"] = self.e_snn_mj
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _joules(count: int, pj: float) -> float:
    return count * pj / 1e12


def energy(counter: OpCounter, e_mac_pj: float = E_MAC_PJ, e_ac_pj: float = E_AC_PJ) -> EnergyReport:
    """``E = O_MAC * E_MAC + O_SOP * E_AC`` per layer and in total.

    SOPs are taken from executed event counts.  For every layer fed by events
    the rate-based estimate ``synapses * input_rate`` is computed alongside and
    the worst relative disagreement is reported.
    """
    layers = {}
    total_macs = total_sops = total_and = dense = 0
    worst = 0.0
    for key, r in counter.records.items():
        e = _joules(r.executed_macs, e_mac_pj) + _joules(r.executed_sops, e_ac_pj)
        item = {
            "macs": r.executed_macs,
            "sops": r.executed_sops,
            "bitwise_ands": r.bitwise_ands,
            "dense_ops": r.dense_ops,
            "energy_j": e,
            "firing_rate": r.firing_rate,
        }
        if r.input_elements:
            est = r.synapses * r.input_events / r.input_elements
            item["sops_rate_estimate"] = est
            if r.executed_sops or est:
                worst = max(worst, abs(est - r.executed_sops) / max(abs(est), r.executed_sops))
        layers[key] = item
        total_macs += r.executed_macs
        total_sops += r.executed_sops
        total_and += r.bitwise_ands
        dense += r.dense_ops
    # sum pJ first so whole-network totals are exact products of the constants
    e_snn = (total_macs * e_mac_pj + total_sops * e_ac_pj) / 1e12
    e_ann = dense * e_mac_pj / 1e12
    rows = firing_rates(counter) if counter.blocks() else []
    return EnergyReport(
        e_mac_pj=e_mac_pj,
        e_ac_pj=e_ac_pj,
        layers=layers,
        total_macs=total_macs,
        total_sops=total_sops,
        total_bitwise_ands=total_and,
        e_snn_j=e_snn,
        e_ann_j=e_ann,
        snn_to_ann_ratio=e_snn / e_ann if e_ann else float("nan"),
        sop_rate_check_max_rel_err=worst,
        firing_rates=rows,
    )
