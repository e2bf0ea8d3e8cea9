"""Admittance matrix assembly and branch outages."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avc_lab.network import (IslandingError, TopologyChange, apply_outage, build_ybus,
                             connected_component, is_connected)
from avc_lab.raw_io import BranchRecord, BusRecord, BusType, CaseError, PowerFlowCase
from conftest import make_two_bus
from oracles import ybus_bruteforce


class TestBuildYbus:
    def test_two_bus_lossless_line(self, two_bus):
        Y = build_ybus(two_bus)
        np.testing.assert_allclose(Y.matrix, [[-10j, 10j], [10j, -10j]], atol=1e-12)
        assert Y.n == 2 and Y.bus_index_map == {1: 0, 2: 1}

    def test_ieee14_matches_bruteforce_oracle(self, ieee14):
        Y = build_ybus(ieee14)
        ref, ids = ybus_bruteforce(ieee14)
        assert list(Y.bus_ids) == ids
        assert np.max(np.abs(Y.matrix - ref)) < 1e-9

    def test_symmetric_without_phase_shift(self, ieee14):
        Y = build_ybus(ieee14).matrix
        assert np.array_equal(Y, Y.T)

    def test_phase_shift_breaks_symmetry(self, ieee14):
        branches = list(ieee14.branches)
        k = next(i for i, br in enumerate(branches) if br.is_transformer)
        branches[k] = replace(branches[k], phase_shift=10.0)
        case = replace(ieee14, branches=tuple(branches))
        Y = build_ybus(case).matrix
        assert not np.allclose(Y, Y.T)
        assert np.max(np.abs(Y - ybus_bruteforce(case)[0])) < 1e-9

    def test_zero_row_sums_for_lossless_shunt_free_network(self, ieee14):
        branches = tuple(replace(br, b_charging=0.0, tap_ratio=1.0) for br in ieee14.branches)
        buses = tuple(replace(b, shunt_g=0.0, shunt_b=0.0) for b in ieee14.buses)
        Y = build_ybus(replace(ieee14, branches=branches, buses=buses)).matrix
        assert np.max(np.abs(Y.sum(axis=1))) < 1e-12

    def test_all_branches_out(self, two_bus):
        case = replace(two_bus, branches=(replace(two_bus.branches[0], in_service=False),))
        with pytest.raises(CaseError):
            build_ybus(case)

    def test_zero_impedance(self, two_bus):
        with pytest.raises(CaseError, match="r = x = 0"):
            build_ybus(make_two_bus(x=0.0))

    def test_duplicate_branch_key(self, two_bus):
        case = replace(two_bus, branches=two_bus.branches * 2)
        with pytest.raises(CaseError, match="duplicate"):
            build_ybus(case)

    def test_off_diagonals_only_where_branches_exist(self, ieee14):
        Y = build_ybus(ieee14)
        idx = Y.bus_index_map
        linked = {frozenset((br.from_bus, br.to_bus)) for br in ieee14.branches}
        for a in ieee14.bus_ids:
            for b in ieee14.bus_ids:
                if a != b and Y[idx[a], idx[b]] != 0:
                    assert frozenset((a, b)) in linked

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_random_parameters_match_oracle(self, ieee14, data):
        branches = []
        for br in ieee14.branches:
            branches.append(replace(
                br,
                r=data.draw(st.floats(0.0, 0.3)),
                x=data.draw(st.floats(0.01, 0.5)),
                b_charging=data.draw(st.floats(0.0, 0.1)),
                tap_ratio=data.draw(st.floats(0.85, 1.15)),
                phase_shift=data.draw(st.floats(-30, 30)),
                in_service=data.draw(st.booleans()) or br.from_bus == 1,
            ))
        case = replace(ieee14, branches=tuple(branches))
        assert np.max(np.abs(build_ybus(case).matrix - ybus_bruteforce(case)[0])) < 1e-9


class TestOutages:
    def test_line_1_5_outage(self, ieee14):
        case = apply_outage(ieee14, TopologyChange(1, 5))
        assert sum(br.in_service for br in case.branches) == 19
        assert is_connected(case)

    def test_reverse_orientation_matches(self, ieee14):
        a = apply_outage(ieee14, TopologyChange(5, 1))
        b = apply_outage(ieee14, TopologyChange(1, 5))
        assert a == b

    def test_input_not_mutated_and_one_status_differs(self, ieee14):
        case = apply_outage(ieee14, TopologyChange(7, 9))
        diffs = [(o, n) for o, n in zip(ieee14.branches, case.branches) if o != n]
        assert len(diffs) == 1
        old, new = diffs[0]
        assert old.in_service and not new.in_service and replace(old, in_service=False) == new
        assert all(br.in_service for br in ieee14.branches)

    def test_islanding_two_bus(self, two_bus):
        with pytest.raises(IslandingError, match="island"):
            apply_outage(two_bus, TopologyChange(1, 2))

    def test_islanding_radial_bus_8(self, ieee14):
        # Bus 8 hangs off bus 7 through a single branch.
        with pytest.raises(IslandingError):
            apply_outage(ieee14, TopologyChange(7, 8))

    def test_double_outage_rejected(self, ieee14):
        case = apply_outage(ieee14, TopologyChange(2, 3))
        with pytest.raises(CaseError, match="already out"):
            apply_outage(case, TopologyChange(2, 3))

    def test_missing_branch(self, ieee14):
        with pytest.raises(CaseError, match="not found"):
            apply_outage(ieee14, TopologyChange(1, 14))


class TestConnectivity:
    def test_base_case_all_buses(self, ieee14):
        assert connected_component(ieee14, 1) == set(range(1, 15))

    def test_bus_14_cut_off(self, ieee14):
        branches = tuple(replace(br, in_service=False) if 14 in (br.from_bus, br.to_bus) else br
                         for br in ieee14.branches)
        case = replace(ieee14, branches=branches)
        assert connected_component(case, 1) == set(range(1, 14))
        assert not is_connected(case)

    def test_singleton(self):
        case = PowerFlowCase(100.0, (BusRecord(7, "ONLY", 1.0, BusType.SLACK),))
        assert connected_component(case, 7) == {7}

    def test_unknown_root(self, ieee14):
        with pytest.raises(KeyError):
            connected_component(ieee14, 99)

    def test_parallel_circuit_keeps_connection(self, two_bus):
        extra = BranchRecord(1, 2, 0.0, 0.2, circuit_id="2")
        case = replace(two_bus, branches=two_bus.branches + (extra,))
        out = apply_outage(case, TopologyChange(1, 2, "1"))
        assert is_connected(out)
        np.testing.assert_allclose(build_ybus(out).matrix, [[-5j, 5j], [5j, -5j]], atol=1e-12)
