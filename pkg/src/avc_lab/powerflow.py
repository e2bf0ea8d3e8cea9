"""Polar Newton-Raphson AC power flow.

Non-convergence is reported through ``SolvedState.converged`` rather than an
exception: the control environment treats a diverged solve as an outcome.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .network import AdmittanceMatrix, IslandingError, branch_stamp, build_ybus, is_connected
from .raw_io import BusType, CaseError, PowerFlowCase

#: Voltage magnitudes outside this band during iteration count as divergence.
VM_DIVERGENCE_BAND = (0.3, 2.0)
_QLIM_EPS = 1e-7  # MVAr


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 20
    enforce_q_limits: bool = True
    flat_start: bool = True

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(eq=False)
class SolvedState:
    """Power flow solution (or last iterate when ``converged`` is False).

    Bus arrays follow ``bus_ids`` (ascending). Branch arrays follow
    ``case.branches`` order, with zeros in out-of-service slots; flows in MW
    and MVAr. ``gen_q`` follows ``case.gens`` order.
    """

    bus_ids: tuple[int, ...]
    vm: np.ndarray
    va: np.ndarray  # radians
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    gen_q: np.ndarray
    slack_p: float
    converged: bool
    iterations: int
    max_mismatch: float
    q_limited: tuple[int, ...] = field(default=())

    @property
    def losses(self) -> np.ndarray:
        return self.p_from + self.p_to

    def vm_of(self, bus_id: int) -> float:
        return float(self.vm[self.bus_ids.index(bus_id)])


# ---------------------------------------------------------------------------
# mismatch equations

def power_injection(Y: np.ndarray, V: np.ndarray) -> np.ndarray:
    return V * np.conj(Y @ V)


def mismatch(Y, Sbus, va, vm, pvpq, pq) -> np.ndarray:
    """Stacked [dP at PV+PQ buses, dQ at PQ buses] in per-unit."""
    V = vm * np.exp(1j * va)
    mis = power_injection(Y, V) - Sbus
    return np.concatenate([mis.real[pvpq], mis.imag[pq]])


def jacobian(Y, va, vm, pvpq, pq) -> np.ndarray:
    """Analytic Jacobian of :func:`mismatch` w.r.t. [va at PV+PQ, vm at PQ]."""
    V = vm * np.exp(1j * va)
    Ibus = Y @ V
    Vnorm = V / vm
    dS_dva = 1j * V[:, None] * np.conj(np.diag(Ibus) - Y * V[None, :])
    dS_dvm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(Ibus) * Vnorm)
    J11 = dS_dva.real[np.ix_(pvpq, pvpq)]
    J12 = dS_dvm.real[np.ix_(pvpq, pq)]
    J21 = dS_dva.imag[np.ix_(pq, pvpq)]
    J22 = dS_dvm.imag[np.ix_(pq, pq)]
    return np.block([[J11, J12], [J21, J22]])


def newton_raphson(Y, Sbus, V0, pv, pq, tolerance, max_iterations):
    """Plain NR loop. Returns (V, converged, iterations, max_mismatch)."""
    pvpq = np.concatenate([pv, pq]).astype(int)
    pq = np.asarray(pq, dtype=int)
    va, vm = np.angle(V0), np.abs(V0)
    npvpq = len(pvpq)
    lo, hi = VM_DIVERGENCE_BAND

    F = mismatch(Y, Sbus, va, vm, pvpq, pq)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    while norm >= tolerance:
        if it >= max_iterations:
            return vm * np.exp(1j * va), False, it, norm
        J = jacobian(Y, va, vm, pvpq, pq)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return vm * np.exp(1j * va), False, it, norm
        if not np.all(np.isfinite(dx)):
            return vm * np.exp(1j * va), False, it, norm
        it += 1
        va_new, vm_new = va.copy(), vm.copy()
        va_new[pvpq] += dx[:npvpq]
        vm_new[pq] += dx[npvpq:]
        if np.any(vm_new < lo) or np.any(vm_new > hi):
            F = mismatch(Y, Sbus, va_new, vm_new, pvpq, pq)
            return vm_new * np.exp(1j * va_new), False, it, float(np.max(np.abs(F)))
        va, vm = va_new, vm_new
        F = mismatch(Y, Sbus, va, vm, pvpq, pq)
        norm = float(np.max(np.abs(F)))
    return vm * np.exp(1j * va), True, it, norm


# ---------------------------------------------------------------------------
# case preparation

@dataclass
class _Prepared:
    bus_ids: tuple[int, ...]
    index: dict[int, int]
    ref: int
    pv: list[int]
    pq: list[int]
    vset: np.ndarray
    p_spec: np.ndarray  # per-unit net injection, generation minus load
    q_load: np.ndarray  # per-unit
    q_fixed_gen: np.ndarray  # per-unit, gens at buses not regulating voltage
    qmax: np.ndarray  # MVAr, aggregated per bus
    qmin: np.ndarray


def _prepare(case: PowerFlowCase, bus_ids) -> _Prepared:
    index = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    base = case.base_mva
    p_spec = np.zeros(n)
    q_load = np.zeros(n)
    q_fixed_gen = np.zeros(n)
    qmax = np.zeros(n)
    qmin = np.zeros(n)
    vset = np.array([case.bus(b).vm for b in bus_ids], dtype=float)
    has_gen = np.zeros(n, dtype=bool)
    first_gen_seen = np.zeros(n, dtype=bool)

    for ld in case.loads:
        if ld.in_service:
            i = index[ld.bus_id]
            p_spec[i] -= ld.pd / base
            q_load[i] += ld.qd / base
    for g in case.gens:
        if not g.in_service:
            continue
        i = index[g.bus_id]
        p_spec[i] += g.pg / base
        qmax[i] += g.qmax
        qmin[i] += g.qmin
        has_gen[i] = True
        if not first_gen_seen[i]:
            vset[i] = g.vset
            first_gen_seen[i] = True

    ref = index[case.slack_bus]
    pv, pq = [], []
    for b in bus_ids:
        i = index[b]
        if i == ref:
            continue
        btype = case.bus(b).bus_type
        if btype == BusType.PV and has_gen[i]:
            pv.append(i)
        else:
            pq.append(i)
            if has_gen[i]:
                q_fixed_gen[i] = sum(g.qg for g in case.gens_at(b)) / base
    return _Prepared(tuple(bus_ids), index, ref, pv, pq, vset, p_spec, q_load,
                     q_fixed_gen, qmax, qmin)


def _share(total: float, gens, limited_at: float | None = None) -> list[float]:
    """Split a bus reactive output over its in-service generators."""
    if limited_at is not None:
        return [g.qmax if limited_at > 0 else g.qmin for g in gens]
    if len(gens) == 1:
        return [total]
    spans = np.array([g.qmax - g.qmin for g in gens], dtype=float)
    if np.all(np.isfinite(spans)) and spans.sum() > 0:
        weights = spans / spans.sum()
    else:
        weights = np.full(len(gens), 1.0 / len(gens))
    return list(total * weights)


# ---------------------------------------------------------------------------
# solve

def solve(case: PowerFlowCase, config: SolverConfig | None = None,
          ybus: AdmittanceMatrix | None = None) -> SolvedState:
    """Solve the AC power flow of ``case``.

    PV buses regulate to their generator setpoint. With ``enforce_q_limits``
    a PV bus whose generators leave [qmin, qmax] is pinned at the violated
    limit and treated as PQ; it may return to voltage control once.

    Args:
        case: a connected case with exactly one slack bus.
        config: solver options; defaults to :class:`SolverConfig()`.
        ybus: optional prebuilt admittance matrix for ``case`` (reused across
            solves that only change setpoints or injections).

    Raises:
        IslandingError: some bus is not connected to the slack bus.
        CaseError: no (or several) slack buses.
    """
    config = config or SolverConfig()
    case.slack_bus
    if not is_connected(case):
        raise IslandingError("islanding: case is not a single connected component")
    if ybus is None:
        ybus = build_ybus(case)
    Y = ybus.matrix
    prep = _prepare(case, ybus.bus_ids)
    n = len(prep.bus_ids)
    base = case.base_mva

    pv = list(prep.pv)
    pq = list(prep.pq)
    q_pinned = prep.q_fixed_gen.copy()  # generator Q at PQ-type buses
    limited: dict[int, float] = {}  # bus index -> +1 at qmax, -1 at qmin
    released: set[int] = set()

    if config.flat_start:
        vm0 = np.ones(n)
        va0 = np.zeros(n)
    else:
        vm0 = np.array([case.bus(b).vm for b in prep.bus_ids], dtype=float)
        va0 = np.deg2rad([case.bus(b).va for b in prep.bus_ids])
    for i in [prep.ref, *pv]:
        vm0[i] = prep.vset[i]
    V = vm0 * np.exp(1j * va0)

    total_its = 0
    converged = False
    norm = np.inf
    for _ in range(2 * len(pv) + 2):
        Sbus = prep.p_spec + 1j * (q_pinned - prep.q_load)
        V, converged, its, norm = newton_raphson(
            Y, Sbus, V, np.array(pv, dtype=int), np.array(pq, dtype=int),
            config.tolerance, config.max_iterations)
        total_its += its
        if not converged or not config.enforce_q_limits:
            break
        S = power_injection(Y, V)
        qg = (S.imag + prep.q_load) * base
        changed = False
        for i in list(pv):
            if qg[i] > prep.qmax[i] + _QLIM_EPS or qg[i] < prep.qmin[i] - _QLIM_EPS:
                sign = 1.0 if qg[i] > prep.qmax[i] else -1.0
                q_pinned[i] = (prep.qmax[i] if sign > 0 else prep.qmin[i]) / base
                limited[i] = sign
                pv.remove(i)
                pq.append(i)
                changed = True
        for i, sign in list(limited.items()):
            if i in released or i in pv:
                continue
            vm_i = abs(V[i])
            if (sign > 0 and vm_i > prep.vset[i]) or (sign < 0 and vm_i < prep.vset[i]):
                released.add(i)
                del limited[i]
                q_pinned[i] = 0.0
                pq.remove(i)
                pv.append(i)
                V[i] = prep.vset[i] * np.exp(1j * np.angle(V[i]))
                changed = True
        if not changed:
            break
        pv.sort()
        pq.sort()

    return _assemble(case, prep, Y, V, converged, total_its, norm,
                     tuple(prep.bus_ids[i] for i in sorted(limited)), limited)


def _assemble(case, prep, Y, V, converged, iterations, norm, q_limited, limited) -> SolvedState:
    base = case.base_mva
    if not np.all(np.isfinite(V)):
        V = np.where(np.isfinite(V), V, 1.0 + 0j)
    S = power_injection(Y, V)
    nbr = len(case.branches)
    p_from, q_from, p_to, q_to = (np.zeros(nbr) for _ in range(4))
    for k, br in enumerate(case.branches):
        if not br.in_service:
            continue
        f, t = prep.index[br.from_bus], prep.index[br.to_bus]
        yff, yft, ytf, ytt = branch_stamp(br)
        sf = V[f] * np.conj(yff * V[f] + yft * V[t]) * base
        st = V[t] * np.conj(ytf * V[f] + ytt * V[t]) * base
        p_from[k], q_from[k], p_to[k], q_to[k] = sf.real, sf.imag, st.real, st.imag

    gen_q = np.zeros(len(case.gens))
    bus_q_total = (S.imag + prep.q_load) * base
    pv_like = set(prep.pv) | {prep.ref}
    for b in prep.bus_ids:
        i = prep.index[b]
        gens = case.gens_at(b)
        if not gens:
            continue
        if i in limited:
            shares = _share(0.0, gens, limited_at=limited[i])
        elif i in pv_like:
            shares = _share(float(bus_q_total[i]), gens)
        else:
            shares = [g.qg for g in gens]
        it = iter(shares)
        for k, g in enumerate(case.gens):
            if g.in_service and g.bus_id == b:
                gen_q[k] = next(it)

    ref = prep.ref
    slack_load_p = -prep.p_spec[ref] * base + sum(g.pg for g in case.gens_at(prep.bus_ids[ref]))
    slack_p = float(S.real[ref] * base + slack_load_p)

    return SolvedState(
        bus_ids=prep.bus_ids,
        vm=np.abs(V),
        va=np.angle(V),
        p_from=p_from, q_from=q_from, p_to=p_to, q_to=q_to,
        gen_q=gen_q,
        slack_p=slack_p,
        converged=bool(converged),
        iterations=int(iterations),
        max_mismatch=float(norm),
        q_limited=q_limited,
    )


# ---------------------------------------------------------------------------
# observation

def canonical_branch_order(case: PowerFlowCase) -> list[int]:
    return sorted(range(len(case.branches)), key=lambda k: case.branches[k].key)


def observation_size(case: PowerFlowCase) -> int:
    return 2 * len(case.branches) + 2 * len(case.buses)


def observe(state: SolvedState, case: PowerFlowCase) -> np.ndarray:
    """Flat state vector: from-end P, Q per branch (p.u., canonical order,
    zero when out of service), then bus vm (p.u.), then bus va (rad)."""
    order = canonical_branch_order(case)
    base = case.base_mva
    flows = np.empty(2 * len(order))
    flows[0::2] = state.p_from[order] / base
    flows[1::2] = state.q_from[order] / base
    return np.concatenate([flows, state.vm, state.va])


# ---------------------------------------------------------------------------
# debug tables

BUS_COLUMNS = ("bus", "type", "vm_pu", "va_deg", "p_inj_mw", "q_inj_mvar")
BRANCH_COLUMNS = ("from_bus", "to_bus", "circuit", "status", "p_from_mw", "q_from_mvar",
                  "p_to_mw", "q_to_mvar", "loss_mw")


def bus_table(state: SolvedState, case: PowerFlowCase) -> list[tuple]:
    V = state.vm * np.exp(1j * state.va)
    S = power_injection(build_ybus(case).matrix, V) * case.base_mva
    rows = []
    for i, b in enumerate(state.bus_ids):
        btype = case.bus(b).bus_type.name
        if b in state.q_limited:
            btype += "*"
        rows.append((b, btype, float(state.vm[i]), float(np.rad2deg(state.va[i])),
                     float(S[i].real), float(S[i].imag)))
    return rows


def branch_table(state: SolvedState, case: PowerFlowCase) -> list[tuple]:
    rows = []
    for k in canonical_branch_order(case):
        br = case.branches[k]
        rows.append((br.from_bus, br.to_bus, br.circuit_id, int(br.in_service),
                     float(state.p_from[k]), float(state.q_from[k]), float(state.p_to[k]),
                     float(state.q_to[k]), float(state.p_from[k] + state.p_to[k])))
    return rows


def write_state_csv(state: SolvedState, case: PowerFlowCase, sink: TextIO) -> None:
    """Bus table, a blank line, then branch table; both with header rows."""
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(BUS_COLUMNS)
    for row in bus_table(state, case):
        w.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}", f"{row[4]:.6f}", f"{row[5]:.6f}"])
    w.writerow([])
    w.writerow(BRANCH_COLUMNS)
    for row in branch_table(state, case):
        w.writerow([*row[:4], *(f"{v:.6f}" for v in row[4:])])


def check_solvable(case: PowerFlowCase) -> None:
    """Raise CaseError/IslandingError when ``case`` violates solve preconditions."""
    case.slack_bus
    if not is_connected(case):
        raise IslandingError("islanding: case is not a single connected component")
    if not any(br.in_service for br in case.branches):
        raise CaseError("no in-service branches")
