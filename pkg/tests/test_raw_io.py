"""RAW v33 reading, writing and setpoint edits."""

import io
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from avc_lab.raw_io import (BusType, CaseError, RawFormatError, apply_setpoints, bundled_case_path,
                            format_raw, parse_raw, parse_raw_string, write_raw)

EMPTY_CASE = """0, 100.0, 33, 0, 1, 60.0 / empty
TITLE
SUBTITLE
0 / END OF BUS DATA
0 / END OF LOAD DATA
0 / END OF FIXED SHUNT DATA
0 / END OF GENERATOR DATA
0 / END OF BRANCH DATA
0 / END OF TRANSFORMER DATA
Q
"""


class TestBundledCase:
    def test_counts(self, ieee14):
        assert len(ieee14.buses) == 14
        assert len(ieee14.gens) == 5
        assert len(ieee14.loads) == 11
        assert len(ieee14.branches) == 20
        assert ieee14.base_mva == 100.0

    def test_lines_and_transformers(self, ieee14):
        xfmr = [br for br in ieee14.branches if br.is_transformer]
        assert len(xfmr) == 3
        assert len(ieee14.branches) - len(xfmr) == 17
        taps = {(br.from_bus, br.to_bus): br.tap_ratio for br in xfmr}
        assert taps == {(4, 7): 0.978, (4, 9): 0.969, (5, 6): 0.932}

    def test_total_load(self, ieee14):
        assert sum(ld.pd for ld in ieee14.loads) == pytest.approx(259.0, abs=1e-9)
        assert sum(ld.qd for ld in ieee14.loads) == pytest.approx(73.5, abs=1e-9)

    def test_generators_and_slack(self, ieee14):
        assert ieee14.slack_bus == 1
        assert sorted(g.bus_id for g in ieee14.gens) == [1, 2, 3, 6, 8]
        assert [g.vset for g in sorted(ieee14.gens, key=lambda g: g.bus_id)] == [
            1.06, 1.045, 1.01, 1.07, 1.09]
        pv = sorted(b.bus_id for b in ieee14.buses if b.bus_type == BusType.PV)
        assert pv == [2, 3, 6, 8]

    def test_fixed_shunt_folded_into_bus(self, ieee14):
        assert ieee14.bus(9).shunt_b == pytest.approx(0.19)
        assert all(b.shunt_b == 0 for b in ieee14.buses if b.bus_id != 9)

    def test_referential_integrity(self, ieee14):
        ieee14.validate()


class TestRoundtrip:
    def test_bundled_roundtrip_is_identity(self, ieee14):
        assert parse_raw_string(format_raw(ieee14)) == ieee14

    def test_roundtrip_through_file(self, ieee14, tmp_path):
        path = tmp_path / "case.raw"
        write_raw(ieee14, path)
        assert parse_raw(path) == ieee14

    def test_write_to_stream(self, ieee14):
        buf = io.StringIO()
        write_raw(ieee14, buf)
        assert buf.getvalue() == format_raw(ieee14)

    def test_load_formatted_with_five_decimals(self, ieee14):
        loads = list(ieee14.loads)
        loads[0] = replace(loads[0], pd=25.123)
        text = format_raw(replace(ieee14, loads=tuple(loads)))
        load_line = next(line for line in text.splitlines() if line.startswith("2,'1',"))
        assert "25.12300" in load_line.split(",")

    def test_out_of_service_branch_status_zero(self, ieee14):
        branches = list(ieee14.branches)
        branches[1] = replace(branches[1], in_service=False)
        case = replace(ieee14, branches=tuple(branches))
        line = next(line for line in format_raw(case).splitlines() if line.startswith("1,5,"))
        assert line.split(",")[13] == "0"
        assert parse_raw_string(format_raw(case)) == case

    def test_full_precision_values_survive(self, ieee14):
        loads = tuple(replace(ld, pd=ld.pd * 1.0123456789012345, qd=ld.qd * 0.87654321)
                      for ld in ieee14.loads)
        case = replace(ieee14, loads=loads)
        assert parse_raw_string(format_raw(case)) == case

    @settings(max_examples=40, deadline=None)
    @given(mult=st.lists(st.floats(0.5, 1.5, allow_nan=False), min_size=11, max_size=11),
           vsets=st.lists(st.floats(0.9, 1.1), min_size=5, max_size=5),
           out=st.integers(0, 19), shunt=st.floats(-50, 50))
    def test_roundtrip_property(self, ieee14, mult, vsets, out, shunt):
        loads = tuple(replace(ld, pd=ld.pd * m, qd=ld.qd * m) for ld, m in zip(ieee14.loads, mult))
        gens = tuple(replace(g, vset=v) for g, v in zip(ieee14.gens, vsets))
        branches = list(ieee14.branches)
        branches[out] = replace(branches[out], in_service=False)
        buses = list(ieee14.buses)
        buses[8] = replace(buses[8], shunt_b=shunt / 100.0)
        case = replace(ieee14, loads=loads, gens=gens, branches=tuple(branches), buses=tuple(buses))
        assert parse_raw_string(format_raw(case)) == case


class TestParseErrors:
    def test_zero_buses(self):
        with pytest.raises(RawFormatError, match="zero buses"):
            parse_raw_string(EMPTY_CASE)

    def test_malformed_number_reports_line(self, ieee14):
        lines = format_raw(ieee14).splitlines()
        lines[4] = lines[4].replace("1.04500", "1.0x500")  # bus 2, file line 5
        with pytest.raises(RawFormatError) as err:
            parse_raw_string("\n".join(lines))
        assert err.value.lineno == 5
        assert "line 5" in str(err.value)

    def test_dangling_bus_reference(self, ieee14):
        text = format_raw(ieee14).replace("14,'1',1,1,1,14.90000", "99,'1',1,1,1,14.90000")
        with pytest.raises(RawFormatError, match="99"):
            parse_raw_string(text)

    def test_missing_sentinel(self, ieee14):
        lines = [ln for ln in format_raw(ieee14).splitlines()
                 if not ln.startswith("0 / END OF LOAD DATA")]
        cut = lines.index(next(ln for ln in lines if ln.startswith("0 / END OF GENERATOR")))
        with pytest.raises(RawFormatError):
            parse_raw_string("\n".join(lines[:cut]))

    def test_nonexistent_file(self):
        with pytest.raises(FileNotFoundError):
            parse_raw("no_such_case.raw")

    def test_trailing_sections_skipped(self, ieee14):
        # The writer emits empty sentinels for every later section; the
        # reader must accept and ignore them.
        assert "END OF SWITCHED SHUNT DATA" in format_raw(ieee14)
        assert parse_raw(bundled_case_path()) == ieee14

    def test_space_delimited_input(self, ieee14):
        text = format_raw(ieee14)
        head, _, rest = text.partition("0 / END OF BUS DATA")
        lines = head.splitlines()
        lines[3] = lines[3].replace(",", " ")
        assert parse_raw_string("\n".join(lines) + "\n0 / END OF BUS DATA" + rest) == ieee14


class TestApplySetpoints:
    ACTION = [(1, 1.05), (2, 1.025), (3, 1.0), (6, 0.95), (8, 0.975)]

    def test_setpoints_applied(self, ieee14):
        case = apply_setpoints(ieee14, self.ACTION)
        assert {g.bus_id: g.vset for g in case.gens} == dict(self.ACTION)

    def test_other_fields_untouched(self, ieee14):
        case = apply_setpoints(ieee14, self.ACTION)
        assert case.buses == ieee14.buses and case.loads == ieee14.loads
        assert case.branches == ieee14.branches
        for old, new in zip(ieee14.gens, case.gens):
            assert replace(old, vset=new.vset) == new

    def test_input_not_mutated(self, ieee14):
        before = format_raw(ieee14)
        apply_setpoints(ieee14, self.ACTION)
        assert format_raw(ieee14) == before

    def test_empty_is_identity(self, ieee14):
        assert apply_setpoints(ieee14, []) == ieee14

    def test_out_of_bounds(self, ieee14):
        with pytest.raises(CaseError, match="sanity"):
            apply_setpoints(ieee14, [(1, 2.0)])

    def test_bus_without_generator(self, ieee14):
        with pytest.raises(CaseError, match="no in-service generator"):
            apply_setpoints(ieee14, [(4, 1.0)])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([1, 2, 3, 6, 8]), st.floats(0.5, 1.5)), max_size=8))
    def test_integrity_preserved(self, ieee14, setpoints):
        case = apply_setpoints(ieee14, setpoints)
        case.validate()
        assert len(case.gens) == 5 and len(case.buses) == 14
