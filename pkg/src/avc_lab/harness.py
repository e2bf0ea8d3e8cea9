"""Case-study orchestration: corpus generation, training, evaluation, metrics.

Configs are flat ``key = value`` files; every key of :class:`ExperimentConfig`
and :class:`~avc_lab.agent.AgentConfig` may appear. ``data/reference.cfg``
lists them all with their defaults.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .agent import AgentConfig, DQNAgent, Mode, read_kv
from .env import (ActionMode, ActionSpace, DEFAULT_LEVELS, EpisodeLog, Outcome, RewardScheme,
                  RewardVariant, VoltageControlEnv, controllable_generators)
from .powerflow import SolverConfig, observation_size
from .qnet import TrainingDiverged
from .raw_io import PowerFlowCase, bundled_case_path, parse_raw
from .scenario import (ScenarioSpec, case2_pool, corpus_size, generate, load_corpus,
                       read_corpus_info, save_corpus)

logger = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "final_reward", "outcome", "n", "epsilon", "rolling_mean")


class NumericalFailure(RuntimeError):
    """Training blew up (non-finite loss)."""


class CaseId(Enum):
    CASE1 = "CASE1"
    CASE2 = "CASE2"
    CASE3 = "CASE3"


@dataclass(frozen=True)
class ExperimentConfig:
    case_id: CaseId = CaseId.CASE1
    case_file: str = "ieee14.raw"
    corpus_seed: int = 42
    eval_corpus_seed: int = 4242
    agent_seed: int = 0
    eval_seed: int = 0
    count: int = 10_000
    load_low: float = 0.8
    load_high: float = 1.2
    action_mode: ActionMode = ActionMode.PERMUTATION
    reward: RewardVariant = RewardVariant.AVERAGED
    enforce_q_limits: bool = True
    max_control_iters: int = 10
    rolling_window: int = 200
    checkpoint_every: int = 500
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.rolling_window < 1 or self.checkpoint_every < 1:
            raise ValueError("rolling_window and checkpoint_every must be >= 1")

    @property
    def uses_contingencies(self) -> bool:
        return self.case_id is not CaseId.CASE1

    @property
    def scheme(self) -> RewardScheme:
        return RewardScheme(self.reward)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(enforce_q_limits=self.enforce_q_limits)

    @classmethod
    def for_case(cls, case_id: CaseId | str, **overrides) -> "ExperimentConfig":
        """Settings used for the three case studies.

        Case I keeps generator reactive limits; Cases II and III drop them
        because under the listed outages the condensers' limits leave most
        scenarios without any fixing action. Case III scores with the
        one-shot reward.
        """
        case_id = CaseId(case_id)
        base = dict(
            case_id=case_id,
            enforce_q_limits=case_id is CaseId.CASE1,
            reward=RewardVariant.ONE_SHOT if case_id is CaseId.CASE3 else RewardVariant.AVERAGED,
            agent=AgentConfig(epsilon_decay=0.998),
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# config files

_ENUMS = {"case_id": CaseId, "action_mode": ActionMode, "reward": RewardVariant}
_AGENT_FIELDS = {f.name for f in fields(AgentConfig)}


def _coerce(name: str, text: str, default):
    if name in _ENUMS:
        cls = _ENUMS[name]
        try:
            return cls(text)
        except ValueError:
            return cls(text.lower())
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(h) for h in text.split(",") if h.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_from_mapping(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string overrides. A ``case_id`` key starts from that case's preset."""
    if base is None:
        base = ExperimentConfig.for_case(values["case_id"]) if "case_id" in values else ExperimentConfig()
    top, agent = {}, {}
    top_defaults = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    agent_defaults = asdict(base.agent)
    for key, text in values.items():
        if key in _AGENT_FIELDS:
            agent[key] = _coerce(key, text, agent_defaults[key])
        elif key in top_defaults and key != "agent":
            top[key] = _coerce(key, text, top_defaults[key])
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(base, agent=replace(base.agent, **agent), **top)


def load_config(path: str | os.PathLike, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return config_from_mapping(read_kv(path), base)


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "agent":
            continue
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {v.value if isinstance(v, Enum) else _fmt(v)}")
    for k, v in asdict(config.agent).items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve_case_path(name: str | os.PathLike) -> Path:
    """``name`` as given if it exists, else the bundled case of that file name."""
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_case_path(path.name)
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"case file not found: {name}")


# ---------------------------------------------------------------------------
# building blocks

def build_action_space(config: ExperimentConfig, case: PowerFlowCase) -> ActionSpace:
    return ActionSpace(config.action_mode, controllable_generators(case), DEFAULT_LEVELS)


def build_env(config: ExperimentConfig, case: PowerFlowCase) -> VoltageControlEnv:
    return VoltageControlEnv(build_action_space(config, case), config.scheme, config.solver,
                             config.max_control_iters)


def scenario_spec(config: ExperimentConfig, base_case: PowerFlowCase, seed: int,
                  count: int | None = None) -> ScenarioSpec:
    pool = case2_pool(base_case) if config.uses_contingencies else ()
    return ScenarioSpec(base_case, seed=seed, count=count or config.count,
                        load_range=(config.load_low, config.load_high),
                        contingency_pool=pool, solver=config.solver)


def generate_corpus(config: ExperimentConfig, directory, seed: int | None = None,
                    count: int | None = None, base_case: PowerFlowCase | None = None) -> int:
    """Write a corpus; returns the number of discarded draws."""
    base_case = base_case or parse_raw(resolve_case_path(config.case_file))
    spec = scenario_spec(config, base_case, config.corpus_seed if seed is None else seed, count)
    stream = generate(spec)
    save_corpus(stream, directory, spec)
    return stream.discarded


def rolling_mean(values, window: int) -> list[float | None]:
    """Trailing mean; None until ``window`` values are available."""
    values = [float(v) for v in values]
    return [None if k + 1 < window else math.fsum(values[k + 1 - window:k + 1]) / window
            for k in range(len(values))]


@dataclass
class EpisodeRow:
    episode: int
    final_reward: float
    outcome: Outcome
    n: int
    epsilon: float
    rolling_mean: float | None = None


def write_metrics(rows: list[EpisodeRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow((r.episode, repr(float(r.final_reward)), r.outcome.value, r.n,
                        repr(float(r.epsilon)), "" if r.rolling_mean is None else repr(r.rolling_mean)))


def read_metrics(path) -> list[EpisodeRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != METRICS_HEADER:
            raise ValueError(f"{path}: not a metrics file")
        for rec in reader:
            rows.append(EpisodeRow(int(rec[0]), float(rec[1]), Outcome(rec[2]), int(rec[3]),
                                   float(rec[4]), float(rec[5]) if rec[5] else None))
    return rows


def _fill_rolling(rows: list[EpisodeRow], window: int) -> None:
    means = rolling_mean([r.final_reward for r in rows], window)
    for r, m in zip(rows, means):
        r.rolling_mean = m


def sparkline(values, width: int = 60) -> str:
    """Unicode block sparkline of ``values`` averaged into ``width`` bins."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return ""
    bins = np.array_split(values, min(width, values.size))
    means = np.array([b.mean() for b in bins])
    lo, hi = means.min(), means.max()
    blocks = "▁▂▃▄▅▆▇█"
    if hi == lo:
        return blocks[3] * len(means)
    idx = ((means - lo) / (hi - lo) * (len(blocks) - 1)).round().astype(int)
    return "".join(blocks[i] for i in idx)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    rows: list[EpisodeRow]
    agent: DQNAgent
    checkpoint: Path
    skipped: int
    solves: int
    wall_time: float
    # corpus index of each row's scenario (None for rows carried over on resume)
    scenario_indices: list[int | None] = field(default_factory=list)


def train(config: ExperimentConfig, corpus_dir, out_dir, episodes: int | None = None,
          resume: str | os.PathLike | None = None) -> TrainResult:
    """Train on ``corpus_dir`` in corpus order; write metrics and checkpoints.

    Outputs in ``out_dir``: ``metrics.csv``, ``run.cfg``, ``agent.qnet`` (+
    ``.agent`` sidecar), ``checkpoints/ckpt_NNNNNN.qnet`` every
    ``checkpoint_every`` episodes, ``summary.txt``.

    Raises:
        NumericalFailure: non-finite training loss; the last periodic
            checkpoint and the metrics up to the failure are kept.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    info = read_corpus_info(corpus_dir)
    total = corpus_size(corpus_dir)
    episodes = total if episodes is None else episodes
    if episodes > total:
        raise ValueError(f"{episodes} episodes requested, corpus holds {total} scenarios")
    (out_dir / "run.cfg").write_text(format_config(config))

    scenarios = load_corpus(corpus_dir)
    first = next(iter(load_corpus(corpus_dir)))
    env = build_env(config, first.case)
    rows: list[EpisodeRow] = []
    start_pos = 0
    if resume is not None:
        agent, side = DQNAgent.load(resume, seed=config.agent_seed)
        start_pos = int(side.get("scenario_position", 0))
        done_eps = int(side.get("episode", 0))
        if (out_dir / "metrics.csv").exists():
            rows = [r for r in read_metrics(out_dir / "metrics.csv") if r.episode <= done_eps]
    else:
        agent = DQNAgent(observation_size(first.case), env.action_space.size, config.agent,
                         seed=config.agent_seed)
    if agent.n_actions != env.action_space.size:
        raise ValueError("checkpoint action count does not match the action space")
    indices: list[int | None] = [None] * len(rows)

    meta = {"corpus_dir": str(corpus_dir.resolve()), "corpus_seed": info.get("seed", "")}
    skipped = 0
    t0 = time.perf_counter()
    last_ckpt = Path(resume) if resume else None
    pos = 0
    failure = None
    for pos, scenario in enumerate(scenarios):
        if pos < start_pos:
            continue
        if len(rows) >= episodes:
            break
        epsilon = agent.epsilon
        try:
            log = agent.run_episode(env, scenario, Mode.TRAIN)
        except TrainingDiverged as exc:
            failure = exc
            break
        if log.skipped:
            skipped += 1
            continue
        rows.append(EpisodeRow(len(rows) + 1, log.final_reward, log.outcome, log.n, epsilon))
        indices.append(scenario.index)
        if len(rows) % config.checkpoint_every == 0:
            last_ckpt = out_dir / "checkpoints" / f"ckpt_{len(rows):06d}.qnet"
            agent.save(last_ckpt, {**meta, "episode": len(rows), "scenario_position": pos + 1})
    wall = time.perf_counter() - t0

    _fill_rolling(rows, config.rolling_window)
    write_metrics(rows, out_dir / "metrics.csv")
    if failure is not None:
        raise NumericalFailure(f"training diverged at episode {len(rows) + 1}: {failure}; "
                               f"last checkpoint {last_ckpt}")
    final = out_dir / "agent.qnet"
    agent.save(final, {**meta, "episode": len(rows), "scenario_position": pos + 1})
    summary = summarize(rows)
    summary.update(skipped=skipped, solves=env.solve_count, wall_time_s=round(wall, 3))
    _write_summary(out_dir / "summary.txt", summary)
    return TrainResult(rows, agent, final, skipped, env.solve_count, wall, indices)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    rows: list[EpisodeRow]
    logs: list[EpisodeLog]
    summary: dict


def summarize(rows: list[EpisodeRow]) -> dict:
    n = len(rows)
    if n == 0:
        return {"episodes": 0}
    fixed1 = sum(r.outcome is Outcome.FIXED and r.n == 1 for r in rows)
    fixed2 = sum(r.outcome is Outcome.FIXED and r.n <= 2 for r in rows)
    return {
        "episodes": n,
        "mean_final_reward": sum(r.final_reward for r in rows) / n,
        "fraction_fixed_in_1": fixed1 / n,
        "fraction_fixed_in_le2": fixed2 / n,
        "fixed": sum(r.outcome is Outcome.FIXED for r in rows),
        "diverged": sum(r.outcome is Outcome.DIVERGED for r in rows),
        "max_iters": sum(r.outcome is Outcome.MAX_ITERS for r in rows),
    }


def _write_summary(path, summary: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in summary.items()))


def check_disjoint(checkpoint_sidecar: dict[str, str], corpus_dir) -> None:
    """Refuse to evaluate on the training corpus (same directory or seed)."""
    corpus_dir = Path(corpus_dir).resolve()
    train_dir = checkpoint_sidecar.get("corpus_dir")
    if train_dir and Path(train_dir) == corpus_dir:
        raise ValueError(f"evaluation corpus {corpus_dir} is the training corpus")
    train_seed = checkpoint_sidecar.get("corpus_seed")
    eval_seed = read_corpus_info(corpus_dir).get("seed")
    if train_seed and eval_seed and train_seed == eval_seed:
        raise ValueError(f"evaluation corpus seed {eval_seed} equals the training corpus seed")


def evaluate(checkpoint, corpus_dir, config: ExperimentConfig, out_path=None,
             episodes: int | None = None) -> EvalResult:
    """Run EVAL-mode episodes (epsilon = ``agent.eval_epsilon``) over a held-out corpus."""
    agent, sidecar = DQNAgent.load(checkpoint, seed=config.eval_seed)
    check_disjoint(sidecar, corpus_dir)
    agent = DQNAgent(agent.qnet.spec.input_dim, agent.n_actions,
                     replace(agent.config, eval_epsilon=config.agent.eval_epsilon),
                     seed=config.eval_seed, qnet=agent.qnet)
    rows, logs = [], []
    env = None
    for scenario in load_corpus(corpus_dir):
        if episodes is not None and len(rows) >= episodes:
            break
        if env is None:
            env = build_env(config, scenario.case)
            if env.action_space.size != agent.n_actions:
                raise ValueError(f"checkpoint has {agent.n_actions} outputs, action space has "
                                 f"{env.action_space.size}")
            if observation_size(scenario.case) != agent.qnet.spec.input_dim:
                raise ValueError("checkpoint input size does not match the case observation")
        log = agent.run_episode(env, scenario, Mode.EVAL)
        if log.skipped:
            continue
        logs.append(log)
        rows.append(EpisodeRow(len(rows) + 1, log.final_reward, log.outcome, log.n,
                               agent.config.eval_epsilon))
    _fill_rolling(rows, config.rolling_window)
    summary = summarize(rows)
    if config.reward is RewardVariant.ONE_SHOT and rows:
        summary["fraction_reward_200"] = sum(r.final_reward == 200.0 for r in rows) / len(rows)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out_path)
        _write_summary(out_path.with_suffix(".summary.txt"), summary)
    return EvalResult(rows, logs, summary)
