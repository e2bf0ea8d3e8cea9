"""A short Case I training run, start to finish, in a temporary directory.

Generates a load-scaling corpus, trains the DQN agent with the Case I
preset for 600 episodes and prints how the final reward and the number
of control actions per episode evolve. The acceptance suite runs the
same pipeline for 2,000 episodes.

Run:  python3 demos/02_learning_curve.py
"""

# %% imports
import tempfile
from collections import Counter
from pathlib import Path

from avc_lab.env import Outcome
from avc_lab.harness import CaseId, ExperimentConfig, generate_corpus, sparkline, summarize, train

EPISODES = 600
BLOCK = 100

# %% corpus and training
config = ExperimentConfig.for_case(CaseId.CASE1)
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    discarded = generate_corpus(config, tmp / "corpus", count=EPISODES)
    print(f"corpus: {EPISODES} scenarios, loads scaled per bus in "
          f"[{config.load_low}, {config.load_high}], {discarded} unsolvable draws discarded")
    result = train(config, tmp / "corpus", tmp / "run")
    print(f"trained {len(result.rows)} episodes with {result.solves} power-flow solves "
          f"in {result.wall_time:.1f} s")
    print("files:", sorted(p.name for p in (tmp / "run").iterdir()))

# %% reward curve
rows = result.rows
print("\nfinal reward per episode:")
print("  " + sparkline([r.final_reward for r in rows]))

# %% per-block summary: exploration falls, rewards rise, episodes shorten
print("\nepisodes   epsilon   mean reward   fixed in 1   fixed in <=2   diverged")
for start in range(0, len(rows), BLOCK):
    block = rows[start:start + BLOCK]
    s = summarize(block)
    print(f"{start + 1:4d}-{start + len(block):<4d}  {block[0].epsilon:7.3f}   {s['mean_final_reward']:11.2f}"
          f"   {s['fraction_fixed_in_1']:10.2f}   {s['fraction_fixed_in_le2']:12.2f}   {s['diverged']:8d}")

# %% which outcomes remain at the end?
tail = Counter(r.outcome for r in rows[-BLOCK:])
print("\nlast", BLOCK, "episodes:", {o.value: tail.get(o, 0) for o in Outcome})
