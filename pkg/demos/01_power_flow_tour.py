"""Power-flow tour of the bundled 14-bus case.

Solves the base case, shows which bus voltages sit outside the normal
band, and then tries a few generator-setpoint assignments from the
permutation action space to see which of them clear every violation.

Run:  python3 demos/01_power_flow_tour.py
"""

# %% imports
import numpy as np

from avc_lab.env import ActionMode, ActionSpace, Zone, controllable_generators, step_reward, zone_of
from avc_lab.env import RewardScheme
from avc_lab.network import build_ybus
from avc_lab.powerflow import SolverConfig, observe, solve
from avc_lab.raw_io import apply_setpoints, load_ieee14

# %% the case and its admittance matrix
case = load_ieee14()
Y = build_ybus(case)
print(f"{len(case.buses)} buses, {len(case.branches)} branches, {len(case.gens)} generators")
print(f"Ybus: {Y.n}x{Y.n}, {np.count_nonzero(Y.matrix)} non-zeros "
      f"({np.count_nonzero(Y.matrix) / Y.n ** 2:.0%} dense)")

# %% base-case solve
state = solve(case)
print(f"\nNewton-Raphson: converged={state.converged} after {state.iterations} iterations, "
      f"max mismatch {state.max_mismatch:.1e} p.u.")
print(" bus     vm   zone")
for bus, vm in zip(state.bus_ids, state.vm):
    zone = zone_of(vm)
    flag = "" if zone is Zone.NORMAL else "  <--"
    print(f"{bus:4d} {vm:7.4f}  {zone.value}{flag}")
print(f"step reward at the initial state: {step_reward(state, RewardScheme()):+.0f}")

# %% what the agent observes
obs = observe(state, case)
print(f"\nobservation: {obs.size} entries = 2 x {len(case.branches)} branch flows "
      f"+ {state.vm.size} magnitudes + {state.va.size} angles")

# %% the action space
gens = controllable_generators(case)
space = ActionSpace(ActionMode.PERMUTATION, gens)
print(f"\n{space.size} permutation actions over generator buses {gens}")
candidates = [(1.05, 1.025, 1.0, 0.95, 0.975),
              (1.025, 0.975, 0.95, 1.0, 1.05),
              (0.975, 1.0, 0.95, 1.025, 1.05)]

# %% try each candidate with and without reactive-power limits
for limits in (True, False):
    solver = SolverConfig(enforce_q_limits=limits)
    print(f"\nreactive limits {'on' if limits else 'off'}:")
    for setpoints in candidates:
        a = space.encode(setpoints)
        after = solve(apply_setpoints(case, space.decode(a)), solver)
        worst = max(abs(after.vm - 1.0))
        print(f"  action {a:3d} {setpoints}: reward {step_reward(after, RewardScheme()):+4.0f}, "
              f"|V| range [{after.vm.min():.4f}, {after.vm.max():.4f}], "
              f"worst deviation {worst:.4f}, limited buses {list(after.q_limited)}")

# %% how many of the 120 actions fix the base case?
for limits in (True, False):
    solver = SolverConfig(enforce_q_limits=limits)
    fixing = [a for a in range(space.size)
              if step_reward(solve(apply_setpoints(case, space.decode(a)), solver),
                             RewardScheme()) == 100]
    print(f"reactive limits {'on ' if limits else 'off'}: {len(fixing):3d} of 120 actions fix "
          f"the base case")
