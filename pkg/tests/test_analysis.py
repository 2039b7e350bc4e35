import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipl import errors, tasks
from ipl.analysis import (
    GateRecord,
    export_gates,
    gate_similarity,
    load_gate_records,
    prompt_length_sweep,
    sweep_csv,
    SweepRow,
)
from ipl.model import ModelConfig
from ipl.train import OptimConfig, build_models

SMALL = ModelConfig(d_e=16, d_ff=32, n_heads=2)


@pytest.fixture(scope="module")
def data():
    return tasks.gen_synthetic_cls(0, 60)


@pytest.fixture(scope="module")
def models():
    return build_models(SMALL, OptimConfig(prompt_length=5, seed=1))


def record(i, t, gates):
    return GateRecord(id=i, type=t, gates=list(gates), correct=True)


class TestExport:
    def test_one_record_per_instance(self, data, models, tmp_path):
        pm, lm = models
        path = str(tmp_path / "gates.jsonl")
        export_gates(data.dev, pm, lm, path, attention_ids=[0, 2])
        lines = [json.loads(l) for l in open(path)]
        assert len(lines) == len(data.dev)
        assert [l["id"] for l in lines] == list(range(len(data.dev)))
        assert all(len(l["gates"]) == pm.length for l in lines)
        assert all(set(l) == {"id", "type", "gates", "correct"} for l in lines)
        attention = [json.loads(l) for l in open(tmp_path / "gates.attention.jsonl")]
        assert [a["id"] for a in attention] == [0, 2]
        for a in attention:
            n = len(tasks.format_pattern(data.dev[a["id"]])[0])
            assert np.array(a["attention"]).shape == (pm.length, n)
            assert np.array(a["relevance"]).shape == (pm.length, n)
            assert np.all(np.array(a["attention"]) >= 0)

    def test_reexport_is_byte_identical(self, data, models, tmp_path):
        pm, lm = models
        a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        export_gates(data.dev, pm, lm, a)
        export_gates(data.dev, pm, lm, b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_duplicate_instances_get_identical_gates(self, data, models, tmp_path):
        pm, lm = models
        inst = data.dev[0]
        records = export_gates([inst, inst], pm, lm, str(tmp_path / "dup.jsonl"))
        assert records[0].gates == records[1].gates

    def test_load_round_trip(self, data, models, tmp_path):
        pm, lm = models
        path = str(tmp_path / "g.jsonl")
        records = export_gates(data.dev, pm, lm, path)
        assert load_gate_records(path) == records


class TestSimilarity:
    def test_identical_gates_are_degenerate(self):
        recs = [record(i, i % 2, [0.3, 0.7]) for i in range(6)]
        sim = gate_similarity(recs)
        assert (sim.within_type_mean_cosine, sim.between_type_mean_cosine, sim.gap) == (1.0, 1.0, 0.0)
        assert sim.degenerate

    def test_orthogonal_types(self):
        recs = [record(i, 0, [1.0, 0.0]) for i in range(3)] + [record(i + 3, 1, [0.0, 2.0]) for i in range(3)]
        sim = gate_similarity(recs)
        assert sim.within_type_mean_cosine == pytest.approx(1.0, abs=1e-15)
        assert sim.between_type_mean_cosine == pytest.approx(0.0, abs=1e-15)
        assert sim.gap == pytest.approx(1.0, abs=1e-15)
        assert not sim.degenerate and not sim.sampled

    def test_matches_pair_loop(self):
        rng = np.random.default_rng(0)
        recs = [record(i, int(rng.integers(2)), rng.random(4)) for i in range(20)]
        recs += [record(20, 0, rng.random(4)), record(21, 1, rng.random(4))]
        within, between = [], []
        for a in range(len(recs)):
            for b in range(a + 1, len(recs)):
                u, v = np.array(recs[a].gates), np.array(recs[b].gates)
                cos = u @ v / np.linalg.norm(u) / np.linalg.norm(v)
                (within if recs[a].type == recs[b].type else between).append(cos)
        sim = gate_similarity(recs)
        assert sim.within_type_mean_cosine == pytest.approx(np.mean(within), abs=1e-12)
        assert sim.between_type_mean_cosine == pytest.approx(np.mean(between), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        recs = [record(i, i % 2, rng.random(3)) for i in range(10)]
        shuffled = [recs[k] for k in rng.permutation(len(recs))]
        assert gate_similarity(recs) == gate_similarity(shuffled)

    def test_sampled_regime(self):
        rng = np.random.default_rng(1)
        recs = [record(i, i % 2, rng.random(3) + (i % 2) * np.array([2.0, 0, 0])) for i in range(1200)]
        sim = gate_similarity(recs, seed=0)
        assert sim.sampled
        exact = gate_similarity(recs, exact_limit=10_000)
        assert not exact.sampled
        assert sim.gap == pytest.approx(exact.gap, abs=0.01)
        assert gate_similarity(recs, seed=0) == sim

    def test_needs_two_types(self):
        with pytest.raises(errors.ContractError):
            gate_similarity([record(i, 0, [i, 1.0]) for i in range(4)])
        with pytest.raises(errors.ContractError):
            gate_similarity([record(0, 0, [1.0, 0]), record(1, 0, [0, 1.0]), record(2, 1, [1.0, 1.0])])


class TestSweep:
    def test_rows_and_csv(self, data, tmp_path):
        path = tmp_path / "sweep.csv"
        cfg = OptimConfig(epochs=1)
        rows = prompt_length_sweep([0, 2], data, SMALL, cfg, seeds=(0, 1), csv_path=str(path))
        assert [(r.length, r.seed) for r in rows] == [(0, 0), (0, 1), (2, 0), (2, 1)]
        lines = path.read_text().splitlines()
        assert lines[0] == "length,seed,dev_metric"
        assert len(lines) == 5
        assert all(0.0 <= r.dev_metric <= 1.0 for r in rows)

    def test_single_length(self, data):
        rows = prompt_length_sweep([0], data, SMALL, OptimConfig(epochs=1))
        assert len(rows) == 1 and rows[0].length == 0

    def test_csv_round_trips_floats(self):
        text = sweep_csv([SweepRow(4, 0, 0.1 + 0.2)])
        assert float(text.splitlines()[1].split(",")[2]) == 0.1 + 0.2

    def test_lengths_must_be_distinct(self, data):
        with pytest.raises(errors.ContractError):
            prompt_length_sweep([2, 2], data, SMALL, OptimConfig(epochs=1))
