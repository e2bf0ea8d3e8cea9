"""Randomized operating conditions: load scaling, redispatch, N-1 outages.

A corpus on disk is a directory with one RAW file per scenario plus
``manifest.csv`` (index, contingency, multiplier digest), ``multipliers.csv``
(the per-load factors) and ``corpus.cfg`` (generation parameters).
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .network import IslandingError, TopologyChange, apply_outage, find_branch
from .powerflow import SolverConfig, solve
from .raw_io import CaseError, PowerFlowCase, RawFormatError, parse_raw, write_raw

logger = logging.getLogger(__name__)

#: Line outages used for the contingency case studies.
CASE2_OUTAGES = ((1, 5), (2, 3), (4, 5), (7, 9))

MANIFEST_HEADER = ("index", "contingency_from", "contingency_to", "circuit", "multiplier_digest")
MAX_REDRAWS = 1000


class CorpusError(RuntimeError):
    """Corpus directory is inconsistent or unreadable."""


@dataclass(frozen=True)
class ScenarioSpec:
    base_case: PowerFlowCase
    seed: int
    count: int
    load_range: tuple[float, float] = (0.8, 1.2)
    contingency_pool: tuple[TopologyChange, ...] = ()
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        low, high = self.load_range
        if not 0 < low <= high:
            raise ValueError(f"invalid load range {self.load_range}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        object.__setattr__(self, "contingency_pool", tuple(self.contingency_pool))
        for change in self.contingency_pool:
            find_branch(self.base_case, change)


@dataclass(frozen=True)
class Scenario:
    index: int
    load_multipliers: tuple[float, ...]
    contingency: TopologyChange | None
    case: PowerFlowCase


def case2_pool(case: PowerFlowCase) -> list[TopologyChange]:
    """The four single-line outages of the contingency studies, as present in ``case``."""
    pool = []
    for a, b in CASE2_OUTAGES:
        k = find_branch(case, TopologyChange(a, b, circuit_id=_circuit_of(case, a, b)))
        br = case.branches[k]
        pool.append(TopologyChange(br.from_bus, br.to_bus, br.circuit_id))
    return pool


def _circuit_of(case: PowerFlowCase, a: int, b: int) -> str:
    for br in case.branches:
        if br.connects(a, b):
            return br.circuit_id
    raise CaseError(f"branch {a}-{b} not found in case")


def scale_and_redispatch(base: PowerFlowCase, multipliers) -> PowerFlowCase:
    """Scale every load (P and Q alike) and share the net change in demand
    over non-slack generators in proportion to their base output.

    Each share is clipped to the unit's [pmin, pmax]; whatever the clipping
    removes, plus the whole change when no unit has base output, lands on
    the slack generator(s).
    """
    if len(multipliers) != len(base.loads):
        raise ValueError("one multiplier per load required")
    loads = tuple(replace(ld, pd=ld.pd * m, qd=ld.qd * m) for ld, m in zip(base.loads, multipliers))
    delta = (sum(ld.pd for ld in loads if ld.in_service)
             - sum(ld.pd for ld in base.loads if ld.in_service))

    slack = base.slack_bus
    movable = [k for k, g in enumerate(base.gens)
               if g.in_service and g.bus_id != slack and g.pg > 0]
    total_pg = sum(base.gens[k].pg for k in movable)
    gens = list(base.gens)
    residual = delta
    if total_pg > 0:
        for k in movable:
            g = gens[k]
            target = g.pg + delta * g.pg / total_pg
            new_pg = min(max(target, g.pmin), g.pmax)
            residual -= new_pg - g.pg
            gens[k] = replace(g, pg=new_pg)
    slack_units = [k for k, g in enumerate(gens) if g.in_service and g.bus_id == slack]
    if slack_units and residual != 0.0:
        share = residual / len(slack_units)
        for k in slack_units:
            gens[k] = replace(gens[k], pg=gens[k].pg + share)
    return replace(base, loads=loads, gens=tuple(gens))


class ScenarioStream:
    """Deterministic iterator over scenarios of a :class:`ScenarioSpec`.

    Draws that island the grid or whose power flow fails to converge at the
    stored generator setpoints are rejected and redrawn; ``discarded`` counts
    them.
    """

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.discarded = 0
        self._rng = np.random.default_rng(spec.seed)

    def __iter__(self) -> Iterator[Scenario]:
        spec = self.spec
        low, high = spec.load_range
        n_loads = len(spec.base_case.loads)
        for index in range(spec.count):
            for _ in range(MAX_REDRAWS):
                mult = self._rng.uniform(low, high, n_loads)
                contingency = None
                if spec.contingency_pool:
                    contingency = spec.contingency_pool[self._rng.integers(len(spec.contingency_pool))]
                case = scale_and_redispatch(spec.base_case, mult)
                try:
                    if contingency is not None:
                        case = apply_outage(case, contingency)
                except IslandingError:
                    self.discarded += 1
                    continue
                if not solve(case, spec.solver).converged:
                    self.discarded += 1
                    continue
                yield Scenario(index, tuple(float(m) for m in mult), contingency, case)
                break
            else:
                raise RuntimeError(f"no acceptable draw for scenario {index} after {MAX_REDRAWS} tries")
        if self.discarded:
            logger.info("discarded %d draws (islanding or non-convergent)", self.discarded)


def generate(spec: ScenarioSpec) -> ScenarioStream:
    return ScenarioStream(spec)


# ---------------------------------------------------------------------------
# corpus on disk

def multiplier_digest(multipliers) -> str:
    text = ",".join(repr(float(m)) for m in multipliers)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def scenario_filename(index: int) -> str:
    return f"scenario_{index:06d}.raw"


def save_corpus(scenarios: Iterable[Scenario], directory, spec: ScenarioSpec | None = None) -> list[tuple]:
    """Write scenarios to ``directory``; returns the manifest rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(directory / "manifest.csv", "w", newline="") as mf, \
            open(directory / "multipliers.csv", "w", newline="") as xf:
        manifest = csv.writer(mf, lineterminator="\n")
        mults = csv.writer(xf, lineterminator="\n")
        manifest.writerow(MANIFEST_HEADER)
        for sc in scenarios:
            write_raw(sc.case, directory / scenario_filename(sc.index))
            c = sc.contingency
            row = (sc.index, c.from_bus if c else "", c.to_bus if c else "",
                   c.circuit_id if c else "", multiplier_digest(sc.load_multipliers))
            manifest.writerow(row)
            mults.writerow([sc.index, *(repr(m) for m in sc.load_multipliers)])
            rows.append(row)
    if spec is not None:
        discarded = getattr(scenarios, "discarded", 0)
        with open(directory / "corpus.cfg", "w") as fh:
            fh.write(f"seed = {spec.seed}\n")
            fh.write(f"count = {len(rows)}\n")
            fh.write(f"load_low = {spec.load_range[0]!r}\n")
            fh.write(f"load_high = {spec.load_range[1]!r}\n")
            pool = ";".join(f"{c.from_bus}-{c.to_bus}-{c.circuit_id}" for c in spec.contingency_pool)
            fh.write(f"contingency_pool = {pool}\n")
            fh.write(f"discarded = {discarded}\n")
    return rows


def read_corpus_info(directory) -> dict[str, str]:
    path = Path(directory) / "corpus.cfg"
    if not path.exists():
        return {}
    info = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            info[k.strip()] = v.strip()
    return info


def corpus_size(directory) -> int:
    with open(Path(directory) / "manifest.csv", newline="") as fh:
        return sum(1 for _ in fh) - 1


def load_corpus(directory) -> Iterator[Scenario]:
    """Stream scenarios back from ``directory`` in manifest order.

    Raises:
        CorpusError: missing/corrupt manifest or RAW file (message names the
            file), or multipliers that do not match the manifest digest.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.csv"
    if not manifest_path.exists():
        raise CorpusError(f"{manifest_path}: manifest missing")
    mult_rows: dict[int, tuple[float, ...]] = {}
    mult_path = directory / "multipliers.csv"
    if mult_path.exists():
        with open(mult_path, newline="") as fh:
            for row in csv.reader(fh):
                if row:
                    mult_rows[int(row[0])] = tuple(float(v) for v in row[1:])

    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise CorpusError(f"{manifest_path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise CorpusError(f"{manifest_path}: malformed row {row}")
            index = int(row[0])
            raw_path = directory / scenario_filename(index)
            if not raw_path.exists():
                raise CorpusError(f"{raw_path}: listed in manifest but missing")
            try:
                case = parse_raw(raw_path)
            except (RawFormatError, CaseError, UnicodeDecodeError) as exc:
                raise CorpusError(f"{raw_path}: {exc}") from exc
            contingency = None
            if row[1]:
                contingency = TopologyChange(int(row[1]), int(row[2]), row[3])
            mult = mult_rows.get(index)
            if mult is None or multiplier_digest(mult) != row[4]:
                raise CorpusError(f"{raw_path}: load multipliers do not match manifest digest")
            yield Scenario(index, mult, contingency, case)
