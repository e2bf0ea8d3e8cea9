"""Voltage-control environment: discrete setpoint actions, zone rewards, episodes.

An episode starts from a solved operating condition with voltage violations.
Each step assigns one voltage setpoint to every controllable generator,
re-solves the power flow and scores the resulting voltage profile. The
episode ends when every bus is back in the normal band, when the power flow
diverges (or a bus falls in the diverged zone), or after
``max_control_iters`` steps.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, TextIO

import numpy as np

from .network import build_ybus
from .powerflow import SolvedState, SolverConfig, observe, solve
from .raw_io import PowerFlowCase, apply_setpoints
from .scenario import Scenario

DEFAULT_LEVELS = (0.95, 0.975, 1.0, 1.025, 1.05)
NORMAL_BAND = (0.95, 1.05)
VIOLATION_BAND = (0.8, 1.25)


class Zone(Enum):
    NORMAL = "normal"
    VIOLATION = "violation"
    DIVERGED = "diverged"


def zone_of(vm: float) -> Zone:
    """Closed normal band [0.95, 1.05]; violation up to and including 0.8 and 1.25."""
    if NORMAL_BAND[0] <= vm <= NORMAL_BAND[1]:
        return Zone.NORMAL
    if VIOLATION_BAND[0] <= vm <= VIOLATION_BAND[1]:
        return Zone.VIOLATION
    return Zone.DIVERGED


def zone_counts(vm) -> tuple[int, int, int]:
    """(normal, violation, diverged) bus counts."""
    vm = np.asarray(vm, dtype=float)
    normal = (vm >= NORMAL_BAND[0]) & (vm <= NORMAL_BAND[1])
    inside = (vm >= VIOLATION_BAND[0]) & (vm <= VIOLATION_BAND[1])
    return int(normal.sum()), int((inside & ~normal).sum()), int((~inside).sum())


# ---------------------------------------------------------------------------
# actions

class ActionMode(Enum):
    PERMUTATION = "permutation"
    COMBINATION = "combination"


class ActionSpace:
    """Enumerated assignments of setpoint levels to generator buses.

    PERMUTATION: action ids index the lexicographic permutations of the
    levels, assigned positionally to ``gen_buses``.
    COMBINATION: action id is a little-endian mixed-radix number whose k-th
    digit selects the level of ``gen_buses[k]``.
    """

    def __init__(self, mode: ActionMode | str, gen_buses: Sequence[int],
                 levels: Sequence[float] = DEFAULT_LEVELS):
        self.mode = ActionMode(mode)
        self.gen_buses = tuple(gen_buses)
        self.levels = tuple(float(v) for v in levels)
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if not self.gen_buses or not self.levels:
            raise ValueError("need at least one generator and one level")
        if self.mode is ActionMode.PERMUTATION:
            if len(self.levels) != len(self.gen_buses):
                raise ValueError("PERMUTATION mode needs as many levels as generators")
            self._perms = list(itertools.permutations(range(len(self.levels))))
            self._perm_index = {p: a for a, p in enumerate(self._perms)}
            self.size = len(self._perms)
        else:
            self.size = len(self.levels) ** len(self.gen_buses)

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"ActionSpace({self.mode.value}, gen_buses={self.gen_buses}, size={self.size})"

    def level_indices(self, action: int) -> tuple[int, ...]:
        if not 0 <= action < self.size:
            raise IndexError(f"action {action} outside [0, {self.size})")
        if self.mode is ActionMode.PERMUTATION:
            return self._perms[action]
        radix = len(self.levels)
        return tuple((action // radix ** k) % radix for k in range(len(self.gen_buses)))

    def decode(self, action: int) -> list[tuple[int, float]]:
        """[(bus_id, vset), ...] for ``action``."""
        return [(b, self.levels[i]) for b, i in zip(self.gen_buses, self.level_indices(action))]

    def encode(self, setpoints: Sequence[float]) -> int:
        """Inverse of :meth:`decode`, from per-generator setpoint values."""
        if len(setpoints) != len(self.gen_buses):
            raise ValueError("one setpoint per controllable generator required")
        try:
            idx = tuple(self._level_index(v) for v in setpoints)
        except ValueError:
            raise ValueError(f"setpoints {tuple(setpoints)} are not on the level grid") from None
        if self.mode is ActionMode.PERMUTATION:
            if idx not in self._perm_index:
                raise ValueError(f"setpoints {tuple(setpoints)} are not a permutation of the levels")
            return self._perm_index[idx]
        radix = len(self.levels)
        return sum(i * radix ** k for k, i in enumerate(idx))

    def _level_index(self, v: float) -> int:
        for i, lv in enumerate(self.levels):
            if math.isclose(v, lv, abs_tol=1e-9):
                return i
        raise ValueError(v)


def build_action_space(mode, gen_buses, levels=DEFAULT_LEVELS) -> ActionSpace:
    return ActionSpace(mode, gen_buses, levels)


def controllable_generators(case: PowerFlowCase) -> list[int]:
    """Buses with an in-service generator, ascending."""
    return sorted({g.bus_id for g in case.gens if g.in_service})


# ---------------------------------------------------------------------------
# rewards

class RewardVariant(Enum):
    AVERAGED = "averaged"
    ONE_SHOT = "one_shot"


class Outcome(Enum):
    FIXED = "FIXED"
    DIVERGED = "DIVERGED"
    MAX_ITERS = "MAX_ITERS"


@dataclass(frozen=True)
class RewardScheme:
    variant: RewardVariant = RewardVariant.AVERAGED
    normal_reward: float = 100.0
    violation_reward: float = -50.0
    diverged_penalty: float = -100.0
    one_shot_bonus: float = 200.0

    @classmethod
    def averaged(cls) -> "RewardScheme":
        return cls(RewardVariant.AVERAGED)

    @classmethod
    def one_shot(cls) -> "RewardScheme":
        return cls(RewardVariant.ONE_SHOT)


def step_reward(state: SolvedState | Sequence[float] | None, scheme: RewardScheme,
                diverged: bool = False) -> float:
    """Score one control iteration.

    ``state`` may be a SolvedState or a plain array of bus voltage magnitudes;
    ``None`` or ``diverged=True`` means the power flow failed.
    Precedence: diverged > violation > normal.
    """
    if state is None:
        diverged = True
    elif isinstance(state, SolvedState):
        diverged = diverged or not state.converged
        vm = state.vm
    else:
        vm = state
    if diverged:
        return scheme.diverged_penalty
    _, n_violation, n_diverged = zone_counts(vm)
    if n_diverged:
        return scheme.diverged_penalty
    if n_violation:
        return 0.0 if scheme.variant is RewardVariant.ONE_SHOT else scheme.violation_reward
    return scheme.normal_reward


@dataclass
class StepRecord:
    observation: np.ndarray  # observation after the action
    action: int
    reward: float
    zones: tuple[int, int, int]  # (normal, violation, diverged) bus counts


@dataclass
class EpisodeLog:
    scenario_index: int
    steps: list[StepRecord] = field(default_factory=list)
    outcome: Outcome | None = None
    final_reward: float | None = None

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    @property
    def skipped(self) -> bool:
        """True when the initial condition needed no control."""
        return self.n == 0


def episode_final_reward(log: EpisodeLog, scheme: RewardScheme) -> float:
    if log.n < 1:
        raise ValueError("final reward undefined for an episode without control iterations")
    if (scheme.variant is RewardVariant.ONE_SHOT and log.outcome is Outcome.FIXED
            and log.n == 1):
        return scheme.one_shot_bonus
    return float(sum(log.rewards) / log.n)


def write_episode_csv(logs, sink: TextIO, episode_offset: int = 0) -> None:
    """``episode,step,action_id,reward,outcome,final_reward``: one row per
    step, then a summary row with an empty step/action/reward."""
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(("episode", "step", "action_id", "reward", "outcome", "final_reward"))
    for k, log in enumerate(logs):
        ep = episode_offset + k + 1
        for j, st in enumerate(log.steps, start=1):
            w.writerow((ep, j, st.action, repr(st.reward), "", ""))
        fr = "" if log.final_reward is None else repr(log.final_reward)
        w.writerow((ep, "", "", "", log.outcome.value if log.outcome else "", fr))


# ---------------------------------------------------------------------------
# environment

class EpisodeDone(RuntimeError):
    """step() called on a finished (or never started) episode."""


class VoltageControlEnv:
    """One episode at a time over scenarios supplied to :meth:`reset`."""

    def __init__(self, action_space: ActionSpace, scheme: RewardScheme | None = None,
                 solver: SolverConfig | None = None, max_control_iters: int = 10):
        if max_control_iters < 1:
            raise ValueError("max_control_iters must be >= 1")
        self.action_space = action_space
        self.scheme = scheme or RewardScheme()
        self.solver = solver or SolverConfig()
        self.max_control_iters = max_control_iters
        self.solve_count = 0
        self.log: EpisodeLog | None = None
        self.done = True
        self._case: PowerFlowCase | None = None
        self._ybus = None
        self._obs: np.ndarray | None = None

    def reset(self, scenario: Scenario) -> tuple[np.ndarray, bool]:
        """Solve the scenario as stored; returns (observation, has_violation).

        A violation-free start finishes the episode at once (FIXED, n = 0,
        no final reward).
        """
        self._case = scenario.case
        self._ybus = build_ybus(self._case)
        state = self._solve(self._case)
        self._obs = observe(state, self._case)
        self.initial_state = state
        self.log = EpisodeLog(scenario.index)
        violation = not (state.converged and zone_counts(state.vm)[0] == len(state.vm))
        self.done = not violation
        if self.done:
            self.log.outcome = Outcome.FIXED
        return self._obs.copy(), violation

    def step(self, action: int) -> tuple[np.ndarray, float, bool, Outcome | None]:
        """Apply ``action``; returns (observation, reward, done, outcome).

        On divergence the observation is the last one before the action.
        """
        if self.done or self.log is None:
            raise EpisodeDone("episode is finished; call reset() first")
        case = apply_setpoints(self._case, self.action_space.decode(action))
        state = self._solve(case)
        reward = step_reward(state, self.scheme)
        zones = zone_counts(state.vm)
        diverged = not state.converged or zones[2] > 0
        if not state.converged:
            obs = self._obs
        else:
            obs = observe(state, case)
        self.last_state = state
        self._obs = obs
        self.log.steps.append(StepRecord(obs.copy(), int(action), reward, zones))

        outcome = None
        if diverged:
            outcome = Outcome.DIVERGED
        elif zones[0] == len(state.vm):
            outcome = Outcome.FIXED
        elif self.log.n >= self.max_control_iters:
            outcome = Outcome.MAX_ITERS
        if outcome is not None:
            self.done = True
            self.log.outcome = outcome
            self.log.final_reward = episode_final_reward(self.log, self.scheme)
        return obs.copy(), reward, self.done, outcome

    def _solve(self, case: PowerFlowCase) -> SolvedState:
        self.solve_count += 1
        return solve(case, self.solver, ybus=self._ybus)
