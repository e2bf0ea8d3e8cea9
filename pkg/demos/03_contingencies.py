"""Line outages, reactive limits, and the one-shot evaluation.

First looks at each of the four single-line outages on the base case:
how far voltages move and how many of the 120 actions still clear every
violation with generator reactive limits on and off. Then trains a
Case III agent briefly and evaluates it on a held-out contingency corpus
with near-zero exploration.

Run:  python3 demos/03_contingencies.py
"""

# %% imports
import tempfile
from collections import Counter
from pathlib import Path

from avc_lab.env import ActionMode, ActionSpace, RewardScheme, controllable_generators, step_reward
from avc_lab.harness import CaseId, ExperimentConfig, evaluate, generate_corpus, train
from avc_lab.network import apply_outage
from avc_lab.powerflow import SolverConfig, solve
from avc_lab.raw_io import apply_setpoints, load_ieee14
from avc_lab.scenario import case2_pool

TRAIN_EPISODES = 1000
EVAL_EPISODES = 300

# %% outage survey on the base load
base = load_ieee14()
space = ActionSpace(ActionMode.PERMUTATION, controllable_generators(base))
print("outage   min|V|  max|V|   fixing actions (limits on / off)")
for change in case2_pool(base):
    case = apply_outage(base, change)
    state = solve(case)
    counts = []
    for limits in (True, False):
        solver = SolverConfig(enforce_q_limits=limits)
        counts.append(sum(step_reward(solve(apply_setpoints(case, space.decode(a)), solver),
                                      RewardScheme()) == 100 for a in range(space.size)))
    print(f"{change.from_bus:>2}-{change.to_bus:<4} {state.vm.min():7.4f} {state.vm.max():7.4f}"
          f"   {counts[0]:3d} / {counts[1]:3d}")
print("(with reactive limits on, the synchronous condensers cannot hold the low setpoints "
      "under some outages; the contingency presets therefore solve without limits)")

# %% Case III: train on one contingency corpus, evaluate on another
config = ExperimentConfig.for_case(CaseId.CASE3)
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    generate_corpus(config, tmp / "train", count=TRAIN_EPISODES)
    generate_corpus(config, tmp / "heldout", seed=config.eval_corpus_seed, count=EVAL_EPISODES)
    trained = train(config, tmp / "train", tmp / "run")
    print(f"\ntrained {len(trained.rows)} episodes in {trained.wall_time:.1f} s; "
          f"final epsilon {trained.agent.epsilon:.3f}")
    result = evaluate(trained.checkpoint, tmp / "heldout", config, tmp / "eval.csv")

# %% evaluation summary
s = result.summary
print(f"evaluation on {s['episodes']} held-out episodes (epsilon {config.agent.eval_epsilon}):")
print(f"  one-shot reward 200: {s['fraction_reward_200']:.1%}")
print(f"  fixed within two actions: {s['fraction_fixed_in_le2']:.1%}, diverged: {s['diverged']}")
print("  episode lengths:", dict(sorted(Counter(log.n for log in result.logs).items())))
