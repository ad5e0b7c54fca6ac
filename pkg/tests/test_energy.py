import io

import numpy as np
import pytest
from rich.console import Console

from core.arch.layers import InputTrace
from core.arch.model import build_model, forward_features
from core.arch.spec import Activation, ArchSpec, BlockSpec, BlockType, ModelKind, vgg_spec
from core.autodiff.tensor import no_grad
from core.energy import (EnergyLedger, LayerRecord, average_ledgers, build_ledger, count_acs, count_macs,
                         merge_ledgers, render_ledger)
from core.errors import ShapeError, SNEError

T, BATCH = 4, 2


@pytest.fixture
def two_layer():
    """1×1 conv (input layer) → LIF → linear 6→3 → LIF, on a 4-channel 1×1 input."""
    blocks = [
        BlockSpec(type=BlockType.CONV, out_channels=6, kernel=1, stride=1, padding=0),
        BlockSpec(type=BlockType.ACT, activation=Activation.LIF),
        BlockSpec(type=BlockType.AVGPOOL),
        BlockSpec(type=BlockType.LINEAR, out_features=3),
        BlockSpec(type=BlockType.ACT, activation=Activation.LIF),
    ]
    return ArchSpec(name="two-layer", kind=ModelKind.SNN, blocks=blocks, in_channels=4, input_size=1,
                    classes=None)


def spike_pattern():
    """[T×B×6] spikes: neurons 0-2 fire on even timesteps, neurons 3-5 never."""
    spikes = np.zeros((T, BATCH, 6))
    spikes[::2, :, :3] = 1.0
    return spikes


def enumerate_events(spikes, fan_out):
    """One accumulate per (spike, outgoing synapse), averaged over the batch."""
    events = sum(fan_out for _ in zip(*np.nonzero(spikes)))
    return events // spikes.shape[1]


def trace_of(spikes):
    return {"linear3": InputTrace(spike_sum=float(spikes.sum()), neuron_count=spikes.shape[2], timesteps=T,
                                  batch=spikes.shape[1])}


class TestCounts:
    def test_static_macs(self, two_layer):
        assert count_macs(two_layer) == {"conv0": 24, "linear3": 18}

    def test_macs_reject_other_input_shape(self, two_layer):
        with pytest.raises(ShapeError):
            count_macs(two_layer, (3, 1, 1))

    def test_acs_equal_event_enumeration(self, two_layer):
        spikes = spike_pattern()
        assert count_acs(two_layer, trace_of(spikes)) == {"linear3": enumerate_events(spikes, fan_out=3)}

    def test_zero_spikes_zero_acs(self, two_layer):
        assert count_acs(two_layer, trace_of(np.zeros((T, BATCH, 6)))) == {"linear3": 0}

    def test_missing_trace(self, two_layer):
        with pytest.raises(SNEError):
            count_acs(two_layer, {})

    def test_ledger_totals(self, two_layer):
        ledger = build_ledger(two_layer, trace_of(spike_pattern()), spiking=True, samples=BATCH, timesteps=T)
        assert ledger.mac_ops == 42
        assert ledger.ac_ops == 18
        assert ledger.input_layer_macs == 24
        assert ledger.records["conv0"].ac_ops == 0
        assert ledger.mean_firing_rate == pytest.approx(6 / (6 * T))

    def test_ann_ledger_has_no_acs(self):
        spec = vgg_spec(5, width_multiplier=1 / 16, input_size=8, in_channels=1, classes=3)
        model = build_model(spec, seed=0)
        with no_grad():
            forward_features(model, np.ones((2, 1, 8, 8), dtype=np.float32), trace=True)
        ledger = build_ledger(spec, model.trace, spiking=False, samples=2)
        assert ledger.ac_ops == 0
        assert ledger.mac_ops == sum(count_macs(spec).values())

    def test_recorded_trace_bounded_by_capacity(self, tiny_vgg, rng):
        spec = tiny_vgg(ModelKind.SNN, classes=None, feature_width=8)
        model = build_model(spec, seed=0, timesteps=T)
        with no_grad():
            forward_features(model, rng.uniform(size=(3, 1, 8, 8)).astype(np.float32), trace=True)
        ledger = build_ledger(spec, model.trace, spiking=True, samples=3, timesteps=T)
        for record in ledger.records.values():
            assert record.ac_ops <= record.mac_ops * T
            assert record.spike_count <= record.neuron_count * T
        assert 0.0 <= ledger.mean_firing_rate <= 1.0


class TestLedgers:
    def test_merge_adds_layers(self, two_layer):
        ledger = build_ledger(two_layer, trace_of(spike_pattern()), spiking=True, samples=BATCH, timesteps=T)
        merged = merge_ledgers([ledger.prefixed("student0."), ledger.prefixed("student1.")])
        assert merged.ac_ops == 2 * ledger.ac_ops
        assert merged.mac_ops == 2 * ledger.mac_ops
        assert set(merged.records) == {"student0.conv0", "student0.linear3", "student1.conv0", "student1.linear3"}

    def test_merge_rejects_schema_mismatch(self):
        a = EnergyLedger(samples=1)
        a.add(LayerRecord("linear3", 10, neuron_count=6, timesteps=4))
        b = EnergyLedger(samples=1)
        b.add(LayerRecord("linear3", 10, neuron_count=5, timesteps=4))
        with pytest.raises(SNEError):
            merge_ledgers([a, b])

    def test_average_is_sample_weighted(self):
        small, large = EnergyLedger(samples=1), EnergyLedger(samples=3)
        small.add(LayerRecord("linear3", 10, ac_ops=10, neuron_count=6, timesteps=4))
        large.add(LayerRecord("linear3", 10, ac_ops=30, neuron_count=6, timesteps=4))
        averaged = average_ledgers([small, large])
        assert averaged.samples == 4
        assert averaged.ac_ops == 25
        assert averaged.mac_ops == 10

    def test_rows_round_trip(self, two_layer):
        ledger = build_ledger(two_layer, trace_of(spike_pattern()), spiking=True, samples=BATCH, timesteps=T)
        assert EnergyLedger.from_rows(ledger.to_rows(), samples=BATCH) == ledger

    def test_render(self, two_layer):
        ledger = build_ledger(two_layer, trace_of(spike_pattern()), spiking=True, samples=BATCH, timesteps=T)
        buffer = io.StringIO()
        render_ledger(ledger, console=Console(file=buffer, width=120))
        assert "linear3" in buffer.getvalue()
        assert "total" in buffer.getvalue()
