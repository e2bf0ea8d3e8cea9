"""Scenario generation, redispatch and corpus persistence."""

import csv
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avc_lab.network import TopologyChange, apply_outage, connected_component
from avc_lab.powerflow import solve
from avc_lab.raw_io import CaseError
from avc_lab.scenario import (MANIFEST_HEADER, CorpusError, ScenarioSpec, case2_pool, corpus_size,
                              generate, load_corpus, multiplier_digest, read_corpus_info,
                              save_corpus, scale_and_redispatch, scenario_filename)


def non_slack_pg(case):
    return sum(g.pg for g in case.gens if g.bus_id != case.slack_bus)


class TestGenerate:
    def test_count_and_bounds(self, ieee14):
        scenarios = list(generate(ScenarioSpec(ieee14, seed=42, count=300)))
        assert [s.index for s in scenarios] == list(range(300))
        for s in scenarios:
            assert len(s.load_multipliers) == 11
            assert all(0.8 <= m <= 1.2 for m in s.load_multipliers)
            assert s.contingency is None

    def test_scaling_applies_to_p_and_q(self, ieee14):
        s = next(iter(generate(ScenarioSpec(ieee14, seed=1, count=1))))
        for base, ld, m in zip(ieee14.loads, s.case.loads, s.load_multipliers):
            assert ld.pd == base.pd * m and ld.qd == base.qd * m

    def test_reproducible(self, ieee14):
        a = list(generate(ScenarioSpec(ieee14, seed=5, count=20)))
        b = list(generate(ScenarioSpec(ieee14, seed=5, count=20)))
        assert a == b

    def test_different_seeds_differ(self, ieee14):
        a = list(generate(ScenarioSpec(ieee14, seed=5, count=5)))
        b = list(generate(ScenarioSpec(ieee14, seed=6, count=5)))
        assert any(x.load_multipliers != y.load_multipliers for x, y in zip(a, b))

    def test_degenerate_range_reproduces_base(self, ieee14):
        for s in generate(ScenarioSpec(ieee14, seed=0, count=5, load_range=(1.0, 1.0))):
            assert s.case == ieee14

    def test_every_scenario_solves(self, ieee14):
        for s in generate(ScenarioSpec(ieee14, seed=3, count=50,
                                       contingency_pool=case2_pool(ieee14))):
            assert solve(s.case).converged

    def test_discards_unsolvable_draws(self, ieee14):
        # Around 1.5-2x load the base setpoints frequently fail to solve.
        spec = ScenarioSpec(ieee14, seed=0, count=10, load_range=(1.4, 2.2))
        stream = generate(spec)
        scenarios = list(stream)
        assert len(scenarios) == 10
        assert stream.discarded > 0
        assert all(solve(s.case).converged for s in scenarios)

    def test_contingency_draw_uniform(self, ieee14):
        spec = ScenarioSpec(ieee14, seed=42, count=2000, contingency_pool=case2_pool(ieee14))
        counts = Counter((s.contingency.from_bus, s.contingency.to_bus) for s in generate(spec))
        assert set(counts) == {(1, 5), (2, 3), (4, 5), (7, 9)}
        for n in counts.values():
            assert abs(n - 500) <= 4 * np.sqrt(2000 * 0.25 * 0.75)

    def test_contingency_applied(self, ieee14):
        spec = ScenarioSpec(ieee14, seed=9, count=10, contingency_pool=case2_pool(ieee14))
        for s in generate(spec):
            out = [br for br in s.case.branches if not br.in_service]
            assert len(out) == 1 and out[0].connects(s.contingency.from_bus, s.contingency.to_bus)

    def test_invalid_spec(self, ieee14):
        with pytest.raises(ValueError):
            ScenarioSpec(ieee14, seed=0, count=0)
        with pytest.raises(ValueError):
            ScenarioSpec(ieee14, seed=0, count=1, load_range=(1.2, 0.8))
        with pytest.raises(CaseError):
            ScenarioSpec(ieee14, seed=0, count=1, contingency_pool=[TopologyChange(1, 14)])


class TestRedispatch:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.8, 1.2), min_size=11, max_size=11))
    def test_balance_identity(self, ieee14, mult):
        case = scale_and_redispatch(ieee14, mult)
        d_load = sum(ld.pd for ld in case.loads) - sum(ld.pd for ld in ieee14.loads)
        d_nonslack = non_slack_pg(case) - non_slack_pg(ieee14)
        d_slack = case.gens[0].pg - ieee14.gens[0].pg
        # Total generation always follows the load change.
        assert d_nonslack + d_slack == pytest.approx(d_load, abs=1e-6)
        # Bus 2 is the only non-slack unit with base output (40 MW, pmin 0):
        # unless a load drop pushes it below zero, it takes the whole change.
        if 40.0 + d_load >= 0.0:
            assert d_nonslack == pytest.approx(d_load, abs=1e-6)
            assert d_slack == 0.0
        else:
            assert case.gens[1].pg == 0.0
            assert d_slack == pytest.approx(d_load + 40.0, abs=1e-6)

    def test_proportional_shares(self, ieee14):
        gens = tuple(replace(g, pg=30.0) if g.bus_id == 3 else g for g in ieee14.gens)
        base = replace(ieee14, gens=gens)
        case = scale_and_redispatch(base, [1.1] * 11)
        delta = 0.1 * 259.0
        pg = {g.bus_id: g.pg for g in case.gens}
        assert pg[2] - 40.0 == pytest.approx(delta * 40 / 70, abs=1e-9)
        assert pg[3] - 30.0 == pytest.approx(delta * 30 / 70, abs=1e-9)

    def test_clipping_residual_to_slack(self, ieee14):
        gens = tuple(replace(g, pmax=45.0) if g.bus_id == 2 else g for g in ieee14.gens)
        base = replace(ieee14, gens=gens)
        case = scale_and_redispatch(base, [1.2] * 11)
        pg = {g.bus_id: g.pg for g in case.gens}
        assert pg[2] == 45.0
        assert pg[1] - 232.4 == pytest.approx(0.2 * 259.0 - 5.0, abs=1e-9)

    def test_wrong_multiplier_count(self, ieee14):
        with pytest.raises(ValueError):
            scale_and_redispatch(ieee14, [1.0] * 3)


class TestCase2Pool:
    def test_four_outages(self, ieee14):
        pool = case2_pool(ieee14)
        assert [(c.from_bus, c.to_bus) for c in pool] == [(1, 5), (2, 3), (4, 5), (7, 9)]

    def test_each_keeps_network_connected(self, ieee14):
        for change in case2_pool(ieee14):
            assert connected_component(apply_outage(ieee14, change), 1) == set(range(1, 15))

    def test_missing_branch(self, ieee14):
        case = replace(ieee14, branches=tuple(br for br in ieee14.branches
                                              if not br.connects(2, 3)))
        with pytest.raises(CaseError):
            case2_pool(case)


class TestCorpus:
    @pytest.fixture(scope="class")
    @staticmethod
    def corpus(ieee14, tmp_path_factory):
        spec = ScenarioSpec(ieee14, seed=11, count=100, contingency_pool=case2_pool(ieee14))
        scenarios = list(generate(spec))
        path = tmp_path_factory.mktemp("corpus")
        save_corpus(scenarios, path, spec)
        return path, scenarios

    def test_roundtrip(self, corpus):
        path, scenarios = corpus
        assert list(load_corpus(path)) == scenarios

    def test_manifest(self, corpus):
        path, scenarios = corpus
        assert corpus_size(path) == len(scenarios) == 100
        with open(path / "manifest.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == MANIFEST_HEADER
        first = scenarios[0]
        assert rows[1] == ["0", str(first.contingency.from_bus), str(first.contingency.to_bus),
                           first.contingency.circuit_id, multiplier_digest(first.load_multipliers)]
        assert len(list(path.glob("scenario_*.raw"))) == 100

    def test_info(self, corpus):
        info = read_corpus_info(corpus[0])
        assert info["seed"] == "11" and info["count"] == "100"
        assert info["contingency_pool"] == "1-5-1;2-3-1;4-5-1;7-9-1"

    def test_corrupt_raw_names_file(self, corpus, tmp_path):
        path, _ = corpus
        for f in path.iterdir():
            (tmp_path / f.name).write_bytes(f.read_bytes())
        bad = tmp_path / scenario_filename(7)
        bad.write_text(bad.read_text().replace("1.06000", "1.0#6000", 1))
        with pytest.raises(CorpusError, match=scenario_filename(7)):
            list(load_corpus(tmp_path))

    def test_missing_raw(self, corpus, tmp_path):
        path, _ = corpus
        for f in path.iterdir():
            (tmp_path / f.name).write_bytes(f.read_bytes())
        (tmp_path / scenario_filename(3)).unlink()
        with pytest.raises(CorpusError, match="missing"):
            list(load_corpus(tmp_path))

    def test_tampered_multipliers(self, corpus, tmp_path):
        path, _ = corpus
        for f in path.iterdir():
            (tmp_path / f.name).write_bytes(f.read_bytes())
        lines = (tmp_path / "multipliers.csv").read_text().splitlines()
        lines[0] = lines[0].rsplit(",", 1)[0] + ",1.0"
        (tmp_path / "multipliers.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="digest"):
            list(load_corpus(tmp_path))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError, match="manifest"):
            list(load_corpus(tmp_path))
