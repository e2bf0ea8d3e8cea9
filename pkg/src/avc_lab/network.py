"""Nodal admittance matrix and topology edits."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .raw_io import BranchRecord, CaseError, PowerFlowCase


class IslandingError(CaseError):
    """Topology change or case splits the grid; the scenario must be discarded."""


class TopologyKind(Enum):
    BRANCH_OUTAGE = "branch_outage"


@dataclass(frozen=True)
class TopologyChange:
    from_bus: int
    to_bus: int
    circuit_id: str = "1"
    kind: TopologyKind = TopologyKind.BRANCH_OUTAGE

    def __str__(self) -> str:
        return f"{self.from_bus}-{self.to_bus}({self.circuit_id})"


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense complex Ybus in per-unit, indexed by position in ``bus_ids``."""

    matrix: np.ndarray
    bus_ids: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def bus_index_map(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    def __getitem__(self, ij):
        return self.matrix[ij]


def branch_stamp(br: BranchRecord) -> tuple[complex, complex, complex, complex]:
    """(Yff, Yft, Ytf, Ytt) of the pi model with the off-nominal tap on the from side."""
    if br.r == 0 and br.x == 0:
        raise CaseError(f"branch {br.key} has r = x = 0")
    ys = 1.0 / complex(br.r, br.x)
    bc = 0.5j * br.b_charging
    tap = br.tap_ratio * np.exp(1j * np.deg2rad(br.phase_shift))
    yff = (ys + bc) / (tap * tap.conjugate())
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    ytt = ys + bc
    return complex(yff), complex(yft), complex(ytf), complex(ytt)


def build_ybus(case: PowerFlowCase) -> AdmittanceMatrix:
    bus_ids = tuple(sorted(case.bus_ids))
    index = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    Y = np.zeros((n, n), dtype=complex)

    seen: set[tuple[int, int, str]] = set()
    active = 0
    for br in case.branches:
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus), br.circuit_id)
        if key in seen:
            raise CaseError(f"duplicate branch {br.from_bus}-{br.to_bus} circuit {br.circuit_id!r}")
        seen.add(key)
        if not br.in_service:
            continue
        active += 1
        f, t = index[br.from_bus], index[br.to_bus]
        yff, yft, ytf, ytt = branch_stamp(br)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    if active == 0:
        raise CaseError("no in-service branches")

    for bus in case.buses:
        if bus.shunt_g or bus.shunt_b:
            i = index[bus.bus_id]
            Y[i, i] += complex(bus.shunt_g, bus.shunt_b)
    return AdmittanceMatrix(Y, bus_ids)


def connected_component(case: PowerFlowCase, root: int) -> set[int]:
    if not case.has_bus(root):
        raise KeyError(root)
    adj: dict[int, list[int]] = {b: [] for b in case.bus_ids}
    for br in case.branches:
        if br.in_service:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {root}
    queue = deque([root])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen


def is_connected(case: PowerFlowCase) -> bool:
    return len(connected_component(case, case.slack_bus)) == len(case.buses)


def find_branch(case: PowerFlowCase, change: TopologyChange) -> int:
    """Index of the branch named by ``change``; either orientation matches."""
    for k, br in enumerate(case.branches):
        if br.connects(change.from_bus, change.to_bus, change.circuit_id):
            return k
    raise CaseError(f"branch {change} not found in case")


def apply_outage(case: PowerFlowCase, change: TopologyChange) -> PowerFlowCase:
    """Copy of ``case`` with the named branch switched out.

    Raises:
        CaseError: branch missing or already out of service.
        IslandingError: the outage disconnects some bus from the slack bus.
    """
    if change.kind is not TopologyKind.BRANCH_OUTAGE:
        raise CaseError(f"unsupported topology change {change.kind}")
    k = find_branch(case, change)
    if not case.branches[k].in_service:
        raise CaseError(f"branch {change} is already out of service")
    branches = list(case.branches)
    branches[k] = replace(branches[k], in_service=False)
    out = replace(case, branches=tuple(branches))
    if not is_connected(out):
        raise IslandingError(f"islanding: outage of {change} splits the network; scenario must be discarded")
    return out
