import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnergy.instrument import LayerTrace, SpikeTrace, counting, op_scope, count_ops
from snnergy.profiler import (
    E_AC,
    E_MAC,
    PAPER_STAGES,
    PAPER_TABLE,
    complexity_table,
    energy_estimate,
    energy_from_trace,
    loglog_slope,
    measure_firing_rates,
    paper_table_diff,
    scaling_bench,
)
from snnergy.tensor import ContractError


class TestComplexityTable:
    @pytest.mark.parametrize("dim", [192, 96])
    def test_cells(self, dim):
        rep = complexity_table(PAPER_STAGES[dim])
        assert [(s.cmqka_m, s.ssa_m) for s in rep.stages] == PAPER_TABLE[dim]["stages"]
        assert rep.totals == PAPER_TABLE[dim]["totals"]

    def test_no_diffs(self):
        assert paper_table_diff() == []

    def test_single_cells_by_hand(self):
        rep = complexity_table([(1024, 192), (256, 384), (64, 768)])
        assert rep.stages[0].cmqka_m == round(1024 * 192 * 192 / 1e6, 1) == 37.7
        assert rep.stages[0].ssa_m == round(1024 * 1024 * 192 / 1e6, 1) == 201.3

    def test_totals_are_sums_of_selected_cells(self):
        rep = complexity_table([(100, 30), (400, 20), (900, 10)], ("ssa", "cmqka", "ssa"))
        picked = rep.stages[0].ssa_m + rep.stages[1].cmqka_m + rep.stages[2].ssa_m
        assert rep.totals["hybrid"] == pytest.approx(round(picked, 1))
        assert rep.totals["all_ssa"] == pytest.approx(round(sum(s.ssa_m for s in rep.stages), 1))

    def test_text_has_every_cell(self):
        text = complexity_table(PAPER_STAGES[192]).to_text()
        for cell in ("37.7", "201.3", "25.2", "3.1", "78.5", "113.1", "229.6"):
            assert cell in text

    def test_bad_input(self):
        with pytest.raises(ValueError):
            complexity_table([(0, 4), (1, 1), (1, 1)])
        with pytest.raises(ValueError):
            complexity_table([(1, 1)])


class TestEnergy:
    def test_worked_example(self):
        rep = energy_estimate([1e6], [0.1], 6)
        assert rep.energy_snn == pytest.approx(0.54e-6, rel=1e-9)
        assert rep.energy_ann == pytest.approx(4.6e-6, rel=1e-9)
        assert rep.layers[0].sop == pytest.approx(6e5)

    @settings(max_examples=100, deadline=None)
    @given(
        layers=st.lists(
            st.tuples(st.floats(1.0, 1e9), st.floats(0.0, 1.0)),
            min_size=1,
            max_size=12,
        ),
        t=st.integers(1, 8),
    )
    def test_ratio_identity(self, layers, t):
        flops = [f for f, _ in layers]
        rates = [r for _, r in layers]
        rep = energy_estimate(flops, rates, t)
        expect = (E_AC / E_MAC) * sum(r * t * f for f, r in layers) / sum(flops)
        assert rep.energy_snn / rep.energy_ann == pytest.approx(expect, rel=1e-12, abs=1e-300)
        assert all(layer.sop <= t * layer.flops for layer in rep.layers)
        assert rep.energy_snn >= 0 and rep.energy_ann >= 0

    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rate_domain(self, rate):
        with pytest.raises(ValueError, match="outside"):
            energy_estimate([1.0], [rate], 1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            energy_estimate([1.0, 2.0], [0.5], 1)

    def test_from_trace_normalises_per_sample_and_step(self):
        trace = LayerTrace()
        trace.add("conv", 2 * 3 * 100, 1.0)
        trace.add("fc", 2 * 3 * 50, 0.2)
        rep = energy_from_trace(trace, timesteps=2, batch=3)
        assert [layer.flops for layer in rep.layers] == [100, 50]
        assert rep.energy_snn == pytest.approx(E_AC * 2 * (100 + 0.2 * 50))
        assert rep.ratio == pytest.approx(rep.energy_ann / rep.energy_snn)


class TestFiringRates:
    def test_grouping(self):
        trace = SpikeTrace()
        trace.add("stage1.0.v_from_a.spatial.q.lif", "Q", np.array([1.0, 0.0, 0.0, 0.0]))
        trace.add("stage1.0.a_from_v.spatial.q.lif", "Q", np.array([1.0, 1.0, 0.0, 0.0]))
        trace.add("video_stem.out_lif", "SPDS", np.array([1.0, 0.0]))
        stats = measure_firing_rates(trace)
        assert stats.role_rate("stage1", "Q") == pytest.approx(0.375)
        assert stats.role_rate("video", "SPDS") == 0.5
        assert "stage1" in stats.to_text()

    def test_empty_trace(self):
        with pytest.raises(ContractError):
            measure_firing_rates(SpikeTrace())

    def test_non_binary_counted(self):
        trace = SpikeTrace()
        trace.add("x", "SN", np.array([0.0, 0.5, 1.0]))
        assert trace.layers["x"].non_binary == 1


class TestCounters:
    def test_scopes_nest_and_filter(self):
        with counting() as ctr:
            with op_scope("a"):
                count_ops(3)
                with op_scope("b"):
                    count_ops(4)
            count_ops(5)
        assert ctr.total() == 12
        assert ctr.total(contains="b") == 4
        assert ctr.total(exclude="a") == 5


class TestBench:
    def test_loglog_slope_exact(self):
        ns = [64, 256, 1024]
        assert loglog_slope(ns, [n**2 for n in ns]) == pytest.approx(2.0)

    @pytest.mark.parametrize("kind,ratio", [("cmqka", 4.0), ("ssa", 16.0)])
    def test_counter_ratios(self, kind, ratio):
        res = scaling_bench(kind, [16, 64, 256], c=16, repeats=1, heads=2)
        ops = [r.ops for r in res.rows]
        assert ops[1] / ops[0] == ratio and ops[2] / ops[1] == ratio

    def test_outputs(self, tmp_path):
        res = scaling_bench("cmqka", [16, 32, 64], c=8, repeats=1, heads=2)
        res.write_csv(tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "kind,N,C,ops,wall_ns_median,peak_bytes" and len(lines) == 4
        assert set(json.loads(res.to_json())) == {"rows", "slopes"}

    def test_rejects_short_sweep(self):
        with pytest.raises(ValueError):
            scaling_bench("ssa", [64, 16, 256])
        with pytest.raises(ValueError):
            scaling_bench("mlp", [1, 2, 3])
