"""PSS/E RAW v33 case files: data model, reader and writer.

Only the sections needed to describe a transmission case for AC power flow
are interpreted: bus, load, fixed shunt, generator, non-transformer branch
and two-winding transformer data. Everything after the transformer section
is skipped (with a logged warning when a skipped section carries records).

Power quantities on loads and generators stay in MW/MVAr as in the file.
Bus shunts and branch impedances are held in per-unit on the system base.
"""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, TextIO

logger = logging.getLogger(__name__)

#: Sanity bound for generator voltage setpoints handed to :func:`apply_setpoints`.
SETPOINT_BOUNDS = (0.5, 1.5)


class RawFormatError(ValueError):
    """Malformed or inconsistent RAW input."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class CaseError(ValueError):
    """A case, or an edit to a case, violates the data model invariants."""


class BusType(IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3
    ISOLATED = 4


@dataclass(frozen=True)
class BusRecord:
    bus_id: int
    name: str
    base_kv: float
    bus_type: BusType
    vm: float = 1.0
    va: float = 0.0  # degrees
    area: int = 1
    zone: int = 1
    owner: int = 1
    shunt_g: float = 0.0  # p.u. on system base
    shunt_b: float = 0.0


@dataclass(frozen=True)
class LoadRecord:
    bus_id: int
    pd: float  # MW
    qd: float  # MVAr
    load_id: str = "1"
    in_service: bool = True


@dataclass(frozen=True)
class GenRecord:
    bus_id: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    vset: float
    machine_id: str = "1"
    in_service: bool = True
    pmax: float = 9999.0
    pmin: float = -9999.0
    mbase: float = 100.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    circuit_id: str = "1"
    tap_ratio: float = 1.0
    phase_shift: float = 0.0  # degrees
    in_service: bool = True
    is_transformer: bool = False

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.from_bus, self.to_bus, self.circuit_id)

    def connects(self, a: int, b: int, circuit_id: str | None = None) -> bool:
        """True if this branch joins buses ``a`` and ``b`` (either orientation)."""
        if circuit_id is not None and circuit_id != self.circuit_id:
            return False
        return {self.from_bus, self.to_bus} == {a, b}


@dataclass(frozen=True)
class PowerFlowCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    loads: tuple[LoadRecord, ...] = ()
    gens: tuple[GenRecord, ...] = ()
    branches: tuple[BranchRecord, ...] = ()
    title: str = ""
    subtitle: str = ""
    _bus_lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("buses", "loads", "gens", "branches"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "_bus_lookup", {b.bus_id: b for b in self.buses})

    def bus(self, bus_id: int) -> BusRecord:
        return self._bus_lookup[bus_id]

    def has_bus(self, bus_id: int) -> bool:
        return bus_id in self._bus_lookup

    @property
    def bus_ids(self) -> list[int]:
        return [b.bus_id for b in self.buses]

    @property
    def slack_bus(self) -> int:
        slack = [b.bus_id for b in self.buses if b.bus_type == BusType.SLACK]
        if len(slack) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    def gens_at(self, bus_id: int, in_service_only: bool = True) -> list[GenRecord]:
        return [
            g for g in self.gens
            if g.bus_id == bus_id and (g.in_service or not in_service_only)
        ]

    def validate(self) -> None:
        """Check referential integrity and record invariants; raise CaseError."""
        if not self.buses:
            raise CaseError("zero buses")
        if len(self._bus_lookup) != len(self.buses):
            raise CaseError("duplicate bus ids")
        self.slack_bus
        for b in self.buses:
            if b.vm <= 0:
                raise CaseError(f"bus {b.bus_id}: non-positive vm {b.vm}")
        for rec in (*self.loads, *self.gens):
            if rec.bus_id not in self._bus_lookup:
                raise CaseError(f"{type(rec).__name__} references unknown bus {rec.bus_id}")
        for g in self.gens:
            if g.qmin > g.qmax or g.pmin > g.pmax or g.vset <= 0:
                raise CaseError(f"generator at bus {g.bus_id}: inconsistent limits")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self._bus_lookup:
                    raise CaseError(f"branch {br.key} references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {br.key} is a self-loop")
            if br.r == 0 and br.x == 0:
                raise CaseError(f"branch {br.key} has zero impedance")


def bundled_case_path(name: str = "ieee14.raw") -> Path:
    return Path(__file__).with_name("data") / name


def load_ieee14() -> PowerFlowCase:
    """The bundled IEEE 14-bus case."""
    return parse_raw(bundled_case_path("ieee14.raw"))


# ---------------------------------------------------------------------------
# reading

_SECTIONS = ("bus", "load", "fixed shunt", "generator", "branch", "transformer")


def _split_fields(text: str, lineno: int) -> list[str]:
    """Tokenize one record: comma or blank separated, quotes kept intact,
    anything after an unquoted ``/`` is a comment."""
    fields: list[str] = []
    cur: str | None = None
    got_field = False  # a field was closed since the last comma
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in "'\"":
            end = text.find(c, i + 1)
            if end < 0:
                raise RawFormatError("unterminated quoted string", lineno)
            cur = (cur or "") + text[i + 1:end]
            i = end + 1
            continue
        if c == "/":
            break
        if c == "," or c.isspace():
            if cur is not None:
                fields.append(cur)
                cur = None
                got_field = True
            if c == ",":
                if not got_field:
                    fields.append("")
                got_field = False
        else:
            cur = (cur or "") + c
        i += 1
    if cur is not None:
        fields.append(cur)
    return fields


def _is_sentinel(fields: list[str]) -> bool:
    return bool(fields) and fields[0].strip() in ("0", "Q")


class _Record:
    """Field accessor that reports the source line on conversion errors."""

    def __init__(self, fields: list[str], lineno: int):
        self.fields = fields
        self.lineno = lineno

    def _raw(self, idx: int) -> str | None:
        if idx < len(self.fields):
            s = self.fields[idx].strip()
            return s if s else None
        return None

    def float(self, idx: int, name: str, default: float | None = None) -> float:
        s = self._raw(idx)
        if s is None:
            if default is None:
                raise RawFormatError(f"missing field {name}", self.lineno)
            return default
        try:
            v = float(s)
        except ValueError:
            raise RawFormatError(f"malformed numeric field {name}={s!r}", self.lineno) from None
        if not math.isfinite(v):
            raise RawFormatError(f"non-finite field {name}={s!r}", self.lineno)
        return v

    def int(self, idx: int, name: str, default: int | None = None) -> int:
        s = self._raw(idx)
        if s is None:
            if default is None:
                raise RawFormatError(f"missing field {name}", self.lineno)
            return default
        try:
            return int(s)
        except ValueError:
            try:
                v = float(s)
            except ValueError:
                v = math.nan
            if v.is_integer():
                return int(v)
            raise RawFormatError(f"malformed integer field {name}={s!r}", self.lineno) from None

    def str(self, idx: int, default: str = "") -> str:
        s = self._raw(idx)
        return default if s is None else s


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8", errors="replace"), True
    return source, False


def parse_raw(source: TextIO | str | os.PathLike) -> PowerFlowCase:
    """Read a RAW v33 case.

    Args:
        source: an open text stream, or a filesystem path.

    Returns:
        A validated :class:`PowerFlowCase`. Transformers are folded into
        ``branches`` with ``is_transformer=True``.

    Raises:
        RawFormatError: malformed field, missing section sentinel, dangling bus
            reference, zero buses. The message carries the line number when
            the problem is local to one record.
    """
    stream, owned = _open_text(source)
    try:
        lines = stream.read().splitlines()
    finally:
        if owned:
            stream.close()
    return _parse_lines(lines)


def parse_raw_string(text: str) -> PowerFlowCase:
    return parse_raw(io.StringIO(text))


def _parse_lines(lines: list[str]) -> PowerFlowCase:
    if len(lines) < 3:
        raise RawFormatError("truncated case identification header")
    header = _Record(_split_fields(lines[0], 1), 1)
    base_mva = header.float(1, "SBASE", 100.0)
    if base_mva <= 0:
        raise RawFormatError("SBASE must be positive", 1)
    rev = header.int(2, "REV", 33)
    if rev != 33:
        logger.warning("RAW revision %d declared; reading with v33 layout", rev)
    title, subtitle = lines[1].strip(), lines[2].strip()

    # Collect the records of each interpreted section, checking sentinels.
    sections: dict[str, list[_Record]] = {name: [] for name in _SECTIONS}
    pos = 3
    end_of_data = False
    for name in _SECTIONS:
        while not end_of_data:
            if pos >= len(lines):
                raise RawFormatError(f"missing section sentinel: {name} data not terminated")
            raw_line = lines[pos]
            pos += 1
            if not raw_line.strip() or raw_line.lstrip().startswith("@"):
                continue
            fields = _split_fields(raw_line, pos)
            if not fields:
                continue
            if _is_sentinel(fields):
                if fields[0].strip() == "Q":
                    end_of_data = True
                break
            if name == "transformer":
                rec_lines = [_Record(fields, pos)]
                for _ in range(3):
                    if pos >= len(lines):
                        raise RawFormatError("truncated transformer record", pos)
                    rec_lines.append(_Record(_split_fields(lines[pos], pos + 1), pos + 1))
                    pos += 1
                if rec_lines[0].int(2, "K", 0) != 0:
                    raise RawFormatError("three-winding transformers are not supported", rec_lines[0].lineno)
                sections[name].append(rec_lines)  # type: ignore[arg-type]
            else:
                sections[name].append(_Record(fields, pos))

    # Everything after the transformer section is skipped.
    skipped = 0
    for raw_line in lines[pos:]:
        fields = _split_fields(raw_line, 0) if raw_line.strip() else []
        if not fields or _is_sentinel(fields):
            if fields and fields[0].strip() == "Q":
                break
            continue
        skipped += 1
    if skipped:
        logger.warning("skipped %d records in unsupported RAW sections", skipped)

    buses = [_read_bus(r) for r in sections["bus"]]
    if not buses:
        raise RawFormatError("zero buses")
    bus_ids = {b.bus_id for b in buses}
    if len(bus_ids) != len(buses):
        raise RawFormatError("duplicate bus ids")

    def check_bus(bus_id: int, rec: _Record):
        if bus_id not in bus_ids:
            raise RawFormatError(f"dangling bus reference {bus_id}", rec.lineno)

    loads = []
    for r in sections["load"]:
        ld = _read_load(r)
        check_bus(ld.bus_id, r)
        loads.append(ld)

    shunt_g: dict[int, float] = {}
    shunt_b: dict[int, float] = {}
    for r in sections["fixed shunt"]:
        bus_id = r.int(0, "I")
        check_bus(bus_id, r)
        if r.int(2, "STATUS", 1) == 0:
            continue
        shunt_g[bus_id] = shunt_g.get(bus_id, 0.0) + r.float(3, "GL", 0.0)
        shunt_b[bus_id] = shunt_b.get(bus_id, 0.0) + r.float(4, "BL", 0.0)
    buses = [
        replace(b, shunt_g=shunt_g.get(b.bus_id, 0.0) / base_mva,
                shunt_b=shunt_b.get(b.bus_id, 0.0) / base_mva)
        if b.bus_id in shunt_g else b
        for b in buses
    ]

    gens = []
    for r in sections["generator"]:
        g = _read_gen(r)
        check_bus(g.bus_id, r)
        gens.append(g)

    branches = []
    for r in sections["branch"]:
        br = _read_branch(r)
        check_bus(br.from_bus, r)
        check_bus(br.to_bus, r)
        branches.append(br)
    bus_kv = {b.bus_id: b.base_kv for b in buses}
    for recs in sections["transformer"]:
        br = _read_transformer(recs, base_mva, bus_kv)  # type: ignore[arg-type]
        check_bus(br.from_bus, recs[0])  # type: ignore[index]
        check_bus(br.to_bus, recs[0])  # type: ignore[index]
        branches.append(br)

    case = PowerFlowCase(base_mva, tuple(buses), tuple(loads), tuple(gens), tuple(branches),
                         title=title, subtitle=subtitle)
    try:
        case.validate()
    except CaseError as exc:
        raise RawFormatError(str(exc)) from None
    return case


def _read_bus(r: _Record) -> BusRecord:
    bus_id = r.int(0, "I")
    if bus_id <= 0:
        raise RawFormatError(f"bus id must be positive, got {bus_id}", r.lineno)
    ide = r.int(3, "IDE", 1)
    try:
        bus_type = BusType(ide)
    except ValueError:
        raise RawFormatError(f"unknown bus type IDE={ide}", r.lineno) from None
    vm = r.float(7, "VM", 1.0)
    if vm <= 0:
        raise RawFormatError(f"non-positive VM {vm}", r.lineno)
    return BusRecord(
        bus_id=bus_id,
        name=r.str(1),
        base_kv=r.float(2, "BASKV", 0.0),
        bus_type=bus_type,
        vm=vm,
        va=r.float(8, "VA", 0.0),
        area=r.int(4, "AREA", 1),
        zone=r.int(5, "ZONE", 1),
        owner=r.int(6, "OWNER", 1),
    )


def _read_load(r: _Record) -> LoadRecord:
    for idx, name in ((7, "IP"), (8, "IQ"), (9, "YP"), (10, "YQ")):
        if r.float(idx, name, 0.0) != 0.0:
            logger.warning("line %d: non-constant-power load component %s ignored", r.lineno, name)
    return LoadRecord(
        bus_id=r.int(0, "I"),
        load_id=r.str(1, "1"),
        in_service=r.int(2, "STATUS", 1) != 0,
        pd=r.float(5, "PL", 0.0),
        qd=r.float(6, "QL", 0.0),
    )


def _read_gen(r: _Record) -> GenRecord:
    return GenRecord(
        bus_id=r.int(0, "I"),
        machine_id=r.str(1, "1"),
        pg=r.float(2, "PG", 0.0),
        qg=r.float(3, "QG", 0.0),
        qmax=r.float(4, "QT", 9999.0),
        qmin=r.float(5, "QB", -9999.0),
        vset=r.float(6, "VS", 1.0),
        mbase=r.float(8, "MBASE", 100.0),
        in_service=r.int(14, "STAT", 1) != 0,
        pmax=r.float(16, "PT", 9999.0),
        pmin=r.float(17, "PB", -9999.0),
    )


def _read_branch(r: _Record) -> BranchRecord:
    return BranchRecord(
        from_bus=abs(r.int(0, "I")),
        to_bus=abs(r.int(1, "J")),
        circuit_id=r.str(2, "1"),
        r=r.float(3, "R"),
        x=r.float(4, "X"),
        b_charging=r.float(5, "B", 0.0),
        in_service=r.int(13, "ST", 1) != 0,
    )


def _read_transformer(recs: list[_Record], base_mva: float, bus_kv: dict[int, float]) -> BranchRecord:
    head, imp, w1, w2 = recs
    i, j = abs(head.int(0, "I")), abs(head.int(1, "J"))
    cw, cz = head.int(4, "CW", 1), head.int(5, "CZ", 1)
    if head.float(7, "MAG1", 0.0) != 0.0 or head.float(8, "MAG2", 0.0) != 0.0:
        logger.warning("line %d: transformer magnetizing admittance ignored", head.lineno)
    r12, x12 = imp.float(0, "R1-2", 0.0), imp.float(1, "X1-2")
    if cz == 2:
        sbase12 = imp.float(2, "SBASE1-2", base_mva)
        r12, x12 = r12 * base_mva / sbase12, x12 * base_mva / sbase12
    elif cz != 1:
        raise RawFormatError(f"transformer impedance code CZ={cz} not supported", imp.lineno)
    windv1, windv2 = w1.float(0, "WINDV1", 1.0), w2.float(0, "WINDV2", 1.0)
    if cw == 2:
        nomv1 = w1.float(1, "NOMV1", 0.0) or bus_kv.get(i, 1.0)
        nomv2 = w2.float(1, "NOMV2", 0.0) or bus_kv.get(j, 1.0)
        windv1, windv2 = windv1 / nomv1, windv2 / nomv2
    elif cw != 1:
        raise RawFormatError(f"transformer winding code CW={cw} not supported", head.lineno)
    return BranchRecord(
        from_bus=i,
        to_bus=j,
        circuit_id=head.str(3, "1"),
        r=r12,
        x=x12,
        b_charging=0.0,
        tap_ratio=windv1 / windv2,
        phase_shift=w1.float(2, "ANG1", 0.0),
        in_service=head.int(11, "STAT", 1) != 0,
        is_transformer=True,
    )


# ---------------------------------------------------------------------------
# writing

def _fmt(x: float) -> str:
    """At least five decimals, and always round-trips exactly through float()."""
    s = f"{x:.5f}"
    if float(s) == x:
        return s
    return repr(float(x))


def _scaled(x: float, base: float) -> float:
    """A float ``y`` near ``x * base`` with ``y / base == x`` whenever one exists."""
    y = x * base
    if y / base == x:
        return y
    lo = hi = y
    for _ in range(8):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        for cand in (lo, hi):
            if cand / base == x:
                return cand
    return y


def _q(s: str) -> str:
    return "'" + s.replace("'", "") + "'"


def write_raw(case: PowerFlowCase, sink: TextIO | str | os.PathLike) -> None:
    """Emit ``case`` as comma-delimited RAW v33 text accepted by :func:`parse_raw`."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_raw(case))
        return
    sink.write(format_raw(case))


def format_raw(case: PowerFlowCase) -> str:
    out: list[str] = []
    w = out.append
    w(f"0,{_fmt(case.base_mva)},33,0,1,60.00     / PSS/E-33 RAW")
    w(case.title.replace("\n", " "))
    w(case.subtitle.replace("\n", " "))
    for b in case.buses:
        w(",".join([
            str(b.bus_id), _q(b.name), _fmt(b.base_kv), str(int(b.bus_type)),
            str(b.area), str(b.zone), str(b.owner), _fmt(b.vm), _fmt(b.va),
            "1.10000", "0.90000", "1.10000", "0.90000",
        ]))
    w("0 / END OF BUS DATA, BEGIN LOAD DATA")
    for ld in case.loads:
        bus = case.bus(ld.bus_id)
        w(",".join([
            str(ld.bus_id), _q(ld.load_id), "1" if ld.in_service else "0",
            str(bus.area), str(bus.zone), _fmt(ld.pd), _fmt(ld.qd),
            "0.00000", "0.00000", "0.00000", "0.00000", str(bus.owner), "1", "0",
        ]))
    w("0 / END OF LOAD DATA, BEGIN FIXED SHUNT DATA")
    for b in case.buses:
        if b.shunt_g != 0.0 or b.shunt_b != 0.0:
            gl, bl = _scaled(b.shunt_g, case.base_mva), _scaled(b.shunt_b, case.base_mva)
            w(f"{b.bus_id},'1',1,{_fmt(gl)},{_fmt(bl)}")
    w("0 / END OF FIXED SHUNT DATA, BEGIN GENERATOR DATA")
    for g in case.gens:
        w(",".join([
            str(g.bus_id), _q(g.machine_id), _fmt(g.pg), _fmt(g.qg), _fmt(g.qmax), _fmt(g.qmin),
            _fmt(g.vset), "0", _fmt(g.mbase), "0.00000", "1.00000", "0.00000", "0.00000",
            "1.00000", "1" if g.in_service else "0", "100.00000", _fmt(g.pmax), _fmt(g.pmin),
            "1", "1.00000",
        ]))
    w("0 / END OF GENERATOR DATA, BEGIN BRANCH DATA")
    for br in case.branches:
        if br.is_transformer:
            continue
        w(",".join([
            str(br.from_bus), str(br.to_bus), _q(br.circuit_id), _fmt(br.r), _fmt(br.x),
            _fmt(br.b_charging), "0.00000", "0.00000", "0.00000",
            "0.00000", "0.00000", "0.00000", "0.00000", "1" if br.in_service else "0",
            "1", "0.00000", "1", "1.00000",
        ]))
    w("0 / END OF BRANCH DATA, BEGIN TRANSFORMER DATA")
    for br in case.branches:
        if not br.is_transformer:
            continue
        w(",".join([
            str(br.from_bus), str(br.to_bus), "0", _q(br.circuit_id), "1", "1", "1",
            "0.00000", "0.00000", "2", "''", "1" if br.in_service else "0", "1", "1.00000",
        ]))
        w(f"{_fmt(br.r)},{_fmt(br.x)},{_fmt(case.base_mva)}")
        w(",".join([
            _fmt(br.tap_ratio), "0.00000", _fmt(br.phase_shift), "0.00000", "0.00000", "0.00000",
            "0", "0", "1.10000", "0.90000", "1.10000", "0.90000", "33", "0",
            "0.00000", "0.00000", "0.00000",
        ]))
        w("1.00000,0.00000")
    w("0 / END OF TRANSFORMER DATA, BEGIN AREA DATA")
    for tail in ("AREA", "TWO-TERMINAL DC", "VSC DC LINE", "IMPEDANCE CORRECTION",
                 "MULTI-TERMINAL DC", "MULTI-SECTION LINE", "ZONE", "INTER-AREA TRANSFER",
                 "OWNER", "FACTS DEVICE", "SWITCHED SHUNT", "GNE", "INDUCTION MACHINE"):
        w(f"0 / END OF {tail} DATA")
    w("Q")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# edits

def apply_setpoints(case: PowerFlowCase, setpoints: Iterable[tuple[int, float]]) -> PowerFlowCase:
    """Return a copy of ``case`` with generator voltage setpoints replaced.

    Every in-service generator at a listed bus receives the new setpoint.
    """
    new_vset: dict[int, float] = {}
    lo, hi = SETPOINT_BOUNDS
    for bus_id, vset in setpoints:
        if not case.gens_at(bus_id):
            raise CaseError(f"bus {bus_id} has no in-service generator")
        if not lo <= vset <= hi:
            raise CaseError(f"setpoint {vset} at bus {bus_id} outside sanity bound [{lo}, {hi}]")
        new_vset[bus_id] = float(vset)
    if not new_vset:
        return case
    gens = tuple(
        replace(g, vset=new_vset[g.bus_id]) if g.in_service and g.bus_id in new_vset else g
        for g in case.gens
    )
    return replace(case, gens=gens)
