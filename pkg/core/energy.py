"""
Operation counting for dense and event-driven inference.

Every weighted layer has a static MAC count per sample. In a spiking layer
each incoming spike only triggers the accumulations it fans out to, so

    AC = MAC × spikes / input_neurons

with spikes summed over all T timesteps and averaged over the batch. The first
weighted layer sees real-valued pixels and is always counted as MACs.
All counters are per-sample integers.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

from rich.console import Console
from rich.table import Table

from core.arch.layers import InputTrace
from core.arch.model import HEAD_ID
from core.arch.spec import ArchSpec, BlockType, walk
from core.errors import ShapeError, SNEError


@dataclass
class LayerRecord:
    layer_id: str
    mac_ops: int
    ac_ops: int = 0
    spike_count: int = 0
    neuron_count: int = 0
    timesteps: int = 1
    input_layer: bool = False

    def schema(self) -> Tuple[int, int, bool]:
        return self.neuron_count, self.timesteps, self.input_layer


@dataclass
class EnergyLedger:
    records: Dict[str, LayerRecord] = field(default_factory=dict)
    samples: int = 0

    def add(self, record: LayerRecord):
        self.records[record.layer_id] = record

    @property
    def mac_ops(self) -> int:
        return sum(r.mac_ops for r in self.records.values())

    @property
    def ac_ops(self) -> int:
        return sum(r.ac_ops for r in self.records.values())

    @property
    def spike_count(self) -> int:
        return sum(r.spike_count for r in self.records.values())

    @property
    def input_layer_macs(self) -> int:
        return sum(r.mac_ops for r in self.records.values() if r.input_layer)

    @property
    def mean_firing_rate(self) -> float:
        """Spikes per input neuron per timestep over all spiking layers."""
        capacity = sum(r.neuron_count * r.timesteps for r in self.records.values()
                       if not r.input_layer and r.timesteps > 0 and r.layer_id != HEAD_ID)
        return self.spike_count / capacity if capacity else 0.0

    def totals(self) -> Dict[str, float]:
        return {
            "mac_ops": self.mac_ops,
            "ac_ops": self.ac_ops,
            "spike_count": self.spike_count,
            "input_layer_macs": self.input_layer_macs,
            "mean_firing_rate": self.mean_firing_rate,
        }

    def to_rows(self) -> List[dict]:
        return [
            {"layer_id": r.layer_id, "mac_ops": r.mac_ops, "ac_ops": r.ac_ops, "spike_count": r.spike_count,
             "neuron_count": r.neuron_count, "timesteps": r.timesteps, "input_layer": r.input_layer}
            for r in self.records.values()
        ]

    @classmethod
    def from_rows(cls, rows: Iterable[dict], samples: int = 0) -> "EnergyLedger":
        ledger = cls(samples=samples)
        for row in rows:
            ledger.add(LayerRecord(**row))
        return ledger

    def prefixed(self, prefix: str) -> "EnergyLedger":
        ledger = EnergyLedger(samples=self.samples)
        for r in self.records.values():
            ledger.add(replace(r, layer_id=f"{prefix}{r.layer_id}"))
        return ledger


def count_macs(spec: ArchSpec, input_shape: Optional[Tuple[int, int, int]] = None) -> Dict[str, int]:
    """Static per-sample MAC count of every weighted layer, in forward order, head last."""
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if input_shape is not None and tuple(input_shape) != expected:
        raise ShapeError(f"{spec.name} is built for input {expected}, got {tuple(input_shape)}")
    macs: Dict[str, int] = {}
    for shape in walk(spec):
        block = shape.block
        if block.type == BlockType.CONV:
            c_out, h_out, w_out = shape.out_shape
            macs[shape.layer_id] = h_out * w_out * c_out * shape.in_shape[0] * block.kernel * block.kernel
        elif block.type == BlockType.LINEAR:
            macs[shape.layer_id] = shape.in_shape[0] * block.out_features
        elif block.type == BlockType.SKIP_END and shape.projection is not None:
            start_shape, _ = shape.projection
            c_out, h_out, w_out = shape.out_shape
            macs[f"proj{shape.index}"] = h_out * w_out * c_out * start_shape[0]
    if spec.classes:
        macs[HEAD_ID] = spec.feature_dim * spec.classes
    return macs


def input_layer_id(spec: ArchSpec) -> Optional[str]:
    for shape in walk(spec):
        if shape.block.type in (BlockType.CONV, BlockType.LINEAR):
            return shape.layer_id
    return None


def spikes_per_sample(trace: InputTrace) -> int:
    return int(round(trace.spike_sum / max(trace.batch, 1)))


def count_acs(spec: ArchSpec, trace: Dict[str, InputTrace]) -> Dict[str, int]:
    """Per-sample AC count of every weighted layer that receives spikes.

    The input layer and the classification head are excluded.
    """
    macs = count_macs(spec)
    first = input_layer_id(spec)
    acs: Dict[str, int] = {}
    for layer_id, mac in macs.items():
        if layer_id in (first, HEAD_ID):
            continue
        if layer_id not in trace:
            raise SNEError(f"no spike trace recorded for layer '{layer_id}' of {spec.name}")
        record = trace[layer_id]
        acs[layer_id] = int(round(mac * spikes_per_sample(record) / record.neuron_count))
    return acs


def build_ledger(spec: ArchSpec, trace: Dict[str, InputTrace], spiking: bool, samples: int,
                 timesteps: int = 1) -> EnergyLedger:
    """Ledger of one forward pass of one network, from its recorded input trace."""
    macs = count_macs(spec)
    first = input_layer_id(spec)
    acs = count_acs(spec, trace) if spiking else {}
    ledger = EnergyLedger(samples=samples)
    for layer_id, mac in macs.items():
        record = trace.get(layer_id)
        neurons = record.neuron_count if record is not None else 0
        if not spiking or layer_id in (first, HEAD_ID):
            ledger.add(LayerRecord(layer_id, mac, neuron_count=neurons, timesteps=1 if not spiking else timesteps,
                                   input_layer=layer_id == first))
            continue
        ledger.add(LayerRecord(layer_id, mac, ac_ops=acs[layer_id], spike_count=spikes_per_sample(record),
                               neuron_count=neurons, timesteps=timesteps))
    return ledger


def merge_ledgers(ledgers: Iterable[EnergyLedger]) -> EnergyLedger:
    """Sum ledgers of parts of one pass (e.g. students); layers with equal ids are added."""
    merged = EnergyLedger()
    for ledger in ledgers:
        if not ledger.records:
            continue
        merged.samples = max(merged.samples, ledger.samples)
        for r in ledger.records.values():
            existing = merged.records.get(r.layer_id)
            if existing is None:
                merged.add(replace(r))
                continue
            if existing.schema() != r.schema():
                raise SNEError(f"cannot merge layer '{r.layer_id}': schema {existing.schema()} vs {r.schema()}")
            existing.mac_ops += r.mac_ops
            existing.ac_ops += r.ac_ops
            existing.spike_count += r.spike_count
    return merged


def average_ledgers(ledgers: Iterable[EnergyLedger]) -> EnergyLedger:
    """Sample-weighted mean of per-batch ledgers; layers missing from a batch count as zero."""
    ledgers = [l for l in ledgers if l.records and l.samples > 0]
    total = sum(l.samples for l in ledgers)
    averaged = EnergyLedger(samples=total)
    if not ledgers:
        return averaged
    sums: Dict[str, List[float]] = {}
    for ledger in ledgers:
        for r in ledger.records.values():
            if r.layer_id not in averaged.records:
                averaged.add(replace(r, mac_ops=0, ac_ops=0, spike_count=0))
                sums[r.layer_id] = [0.0, 0.0, 0.0]
            elif averaged.records[r.layer_id].schema() != r.schema():
                raise SNEError(f"cannot average layer '{r.layer_id}': schema mismatch")
            acc = sums[r.layer_id]
            acc[0] += r.mac_ops * ledger.samples
            acc[1] += r.ac_ops * ledger.samples
            acc[2] += r.spike_count * ledger.samples
    for layer_id, (mac, ac, spikes) in sums.items():
        record = averaged.records[layer_id]
        record.mac_ops = int(round(mac / total))
        record.ac_ops = int(round(ac / total))
        record.spike_count = int(round(spikes / total))
    return averaged


def render_ledger(ledger: EnergyLedger, title: str = "Operation counts per sample", console: Console | None = None):
    table = Table(title=title)
    table.add_column("Layer", style="cyan")
    table.add_column("MACs", justify="right")
    table.add_column("ACs", justify="right")
    table.add_column("Spikes", justify="right")
    table.add_column("Neurons", justify="right")
    table.add_column("T", justify="right")
    for r in ledger.records.values():
        name = f"{r.layer_id} (input)" if r.input_layer else r.layer_id
        table.add_row(name, f"{r.mac_ops:,}", f"{r.ac_ops:,}", f"{r.spike_count:,}", f"{r.neuron_count:,}",
                      str(r.timesteps))
    table.add_row("total", f"{ledger.mac_ops:,}", f"{ledger.ac_ops:,}", f"{ledger.spike_count:,}", "", "",
                  style="bold")
    (console or Console()).print(table)
