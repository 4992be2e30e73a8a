"""Episode loop, learning-rate schedules, oracles and multi-seed comparisons."""

from __future__ import annotations

import itertools
import math
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from qsteer.envs import Environment, EnvStep
from qsteer.rl import (
    PolicyTable,
    QTable,
    StrategyConfig,
    _draw,
    _normalize,
    _softmax_weights,
    greedy_action,
    selection_probabilities,
    table_entropies,
)

SCHEDULES = ("constant", "harmonic", "power")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Learning rate as a function of the visit count ``n >= 1`` of a state-action pair.

    ``constant``: ``c``. ``harmonic``: ``min(1, c / n)``. ``power``:
    ``min(1, c / n**rho)``. The cap keeps every step size in (0, 1] when
    ``c > 1``; it only affects the first few visits.
    """

    kind: str = "constant"
    c: float = 0.01
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.kind == "constant":
            if not 0.0 < self.c <= 1.0:
                raise ConfigError(f"constant learning rate must lie in (0, 1], got {self.c}")
        elif not (self.c > 0.0 and math.isfinite(self.c)):
            raise ConfigError(f"learning rate scale must be positive, got {self.c}")
        if self.kind == "power" and not (self.rho > 0.0 and math.isfinite(self.rho)):
            raise ConfigError(f"power schedule exponent must be positive, got {self.rho}")

    def rate(self, n: int) -> float:
        if self.kind == "constant":
            return self.c
        if self.kind == "harmonic":
            return min(1.0, self.c / n)
        return min(1.0, self.c / n**self.rho)

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """``0.01`` | ``constant(0.01)`` | ``harmonic(1)`` | ``power(1, 0.7)``."""
        text = text.strip()
        try:
            return cls("constant", float(text))
        except ValueError:
            pass
        if "(" not in text or not text.endswith(")"):
            raise ConfigError(f"cannot parse learning-rate schedule {text!r}")
        kind, args = text[:-1].split("(", 1)
        vals = [float(x) for x in args.split(",") if x.strip()]
        kind = kind.strip()
        if kind == "power":
            if len(vals) != 2:
                raise ConfigError("power schedule takes (c, rho)")
            return cls(kind, vals[0], vals[1])
        if len(vals) != 1:
            raise ConfigError(f"{kind} schedule takes exactly one argument")
        return cls(kind, vals[0])

    def __str__(self) -> str:
        if self.kind == "power":
            return f"power({self.c!r}, {self.rho!r})"
        return f"{self.kind}({self.c!r})"


@dataclass(frozen=True)
class RobbinsMonroVerdict:
    schedule: Schedule
    sum_diverges: bool
    square_summable: bool

    @property
    def passes(self) -> bool:
        return self.sum_diverges and self.square_summable

    @property
    def message(self) -> str:
        if self.passes:
            return f"{self.schedule}: step sizes satisfy sum a = inf, sum a^2 < inf"
        broken = []
        if not self.sum_diverges:
            broken.append("sum of step sizes converges")
        if not self.square_summable:
            broken.append("sum of squared step sizes diverges")
        return f"{self.schedule}: convergence guarantee does not apply ({'; '.join(broken)})"


def check_robbins_monro(schedule: Schedule | str) -> RobbinsMonroVerdict:
    """Analytic series test of a schedule against the stochastic-approximation conditions.

    A constant rate only triggers a warning: it is the setting used for the
    quantum control experiments.
    """
    if isinstance(schedule, str):
        schedule = Schedule.parse(schedule)
    if schedule.kind == "constant":
        verdict = RobbinsMonroVerdict(schedule, True, False)
        warnings.warn(verdict.message, RuntimeWarning, stacklevel=2)
        return verdict
    if schedule.kind == "harmonic":
        return RobbinsMonroVerdict(schedule, True, True)
    # c / n^rho: sum diverges iff rho <= 1, squares converge iff rho > 1/2
    return RobbinsMonroVerdict(schedule, schedule.rho <= 1.0, schedule.rho > 0.5)


@dataclass(frozen=True)
class TrainConfig:
    strategy: StrategyConfig
    alpha: float | Schedule = 0.01
    gamma: float = 0.99
    max_episodes: int = 500
    step_cap: int = 10_000
    seed: int = 0
    convergence_window: int = 20
    # None picks the environment's default: 0 extra steps, or 0.01 fidelity.
    convergence_tolerance: float | None = None
    # Optional budget on environment steps summed over all episodes.
    max_total_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1) for Q-learning to converge")
        sched = self.alpha if isinstance(self.alpha, Schedule) else Schedule("constant", float(self.alpha))
        object.__setattr__(self, "alpha", sched)
        if self.max_episodes < 0:
            raise ConfigError("max_episodes must be >= 0")
        if self.step_cap < 1:
            raise ConfigError("step_cap must be >= 1")
        if self.convergence_window < 1:
            raise ConfigError("convergence_window must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.max_total_steps is not None and self.max_total_steps < 1:
            raise ConfigError("max_total_steps must be >= 1")

    @property
    def schedule(self) -> Schedule:
        return self.alpha  # type: ignore[return-value]


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    steps: int
    total_reward: float
    terminal_fidelity: float | None
    mean_entropy: float
    truncated: bool
    success: bool = False


@dataclass
class RunResult:
    records: list[EpisodeRecord]
    q: QTable
    policy: PolicyTable | None
    convergence_episode: int | None
    wall_time: float = 0.0
    config: TrainConfig | None = None
    extra: dict = field(default_factory=dict)

    @property
    def cumulative_steps(self) -> int:
        return sum(r.steps for r in self.records)


@dataclass(frozen=True)
class TrajectoryStep:
    state: int
    action: int
    reward: float
    fidelity: float | None
    amplitudes: np.ndarray


@dataclass(frozen=True)
class TargetChange:
    """Swap the environment's target before episode ``episode`` starts."""

    episode: int
    target: object


class UniformStream:
    """Buffered uniform draws from a counter-based (Philox) generator.

    The Philox key is the run seed and the episode index selects a disjoint
    block of the counter space, so an episode's draws never depend on how
    many numbers earlier episodes consumed. :meth:`restart` re-targets the
    same generator at another episode without rebuilding it.
    """

    _FIRST_BLOCK = 32
    _MAX_BLOCK = 1024

    def __init__(self, seed: int, episode: int = 0):
        self._bitgen = np.random.Philox(key=seed)
        self._key = self._bitgen.state["state"]["key"]
        self._gen = np.random.Generator(self._bitgen)
        self.restart(episode)

    def _blocks(self):
        n = self._FIRST_BLOCK
        while True:
            yield self._gen.random(n).tolist()
            n = min(2 * n, self._MAX_BLOCK)

    def restart(self, episode: int) -> "UniformStream":
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array([0, 0, episode, 0], dtype=np.uint64), "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        # bound C-level __next__: the cheapest per-draw call available
        self.random = itertools.chain.from_iterable(self._blocks()).__next__
        return self


def episode_rng(seed: int, episode: int) -> UniformStream:
    return UniformStream(seed, episode)


class _Rows(dict):
    """Lazily materialized Python-list rows of a 2-D array, written back on flush."""

    def __init__(self, arr: np.ndarray):
        super().__init__()
        self.arr = arr

    def __missing__(self, s: int) -> list[float]:
        row = self.arr[s].tolist()
        self[s] = row
        return row

    def flush(self) -> None:
        for s, row in self.items():
            self.arr[s] = row


def is_success(env: Environment, st: EnvStep) -> bool:
    if not st.terminal or st.truncated:
        return False
    threshold = getattr(getattr(env, "config", None), "success_fidelity", None)
    if env.progress_metric == "fidelity" and threshold is not None:
        return st.fidelity is not None and st.fidelity >= threshold
    return True


def _check_compatible(env: Environment, q: QTable, p: PolicyTable | None, strategy: StrategyConfig) -> None:
    if strategy.kind == "fidelity_probabilistic" and not env.supports_fidelity:
        raise ConfigError(f"fidelity-based strategy needs a fidelity signal; {type(env).__name__} has none")
    if q.values.shape != (env.n_states, env.n_actions):
        raise ConfigError(f"Q-table {q.values.shape} does not match environment ({env.n_states}, {env.n_actions})")
    if strategy.uses_policy_table:
        if p is None:
            raise ConfigError(f"strategy {strategy.kind} needs a policy table")
        if p.probs.shape != q.values.shape:
            raise ConfigError(f"policy table {p.probs.shape} does not match Q-table {q.values.shape}")


def run_episode(
    env: Environment,
    q: QTable,
    p: PolicyTable | None,
    cfg: TrainConfig,
    rng,
    visits: np.ndarray | None = None,
    episode: int = 0,
    step_cap: int | None = None,
    entropies: list[float] | None = None,
) -> tuple[EpisodeRecord, QTable, PolicyTable | None]:
    """One episode of Q-learning under the configured exploration strategy.

    Probabilistic strategies also update the taken action's selection
    probability after every backup: by ``k (r + max Q')`` for PQL, and by
    ``k (r + max Q' + F')`` for the fidelity-based variant, where ``F'`` is
    the successor's fidelity to the target. Tables are updated in place.
    ``rng`` needs only a ``random()`` method; ``step_cap`` tightens
    ``cfg.step_cap`` for this episode. ``entropies``, if given, is a per-state
    cache of selection entropies kept current across calls; only the rows
    this episode touched are recomputed.
    """
    strat = cfg.strategy
    cap = cfg.step_cap if step_cap is None else min(step_cap, cfg.step_cap)
    _check_compatible(env, q, p, strat)
    sched = cfg.schedule
    if sched.kind != "constant" and visits is None:
        visits = np.zeros(q.values.shape, dtype=np.int64)
    rate = sched.rate
    gamma = cfg.gamma
    kind = strat.kind
    eps, tau, k = strat.epsilon, strat.tau, strat.k
    m = env.n_actions
    fidelity_based = kind == "fidelity_probabilistic"
    update_policy = p is not None and strat.uses_policy_table and k > 0.0
    p_min = p.p_min if p is not None else 0.0
    qrows = _Rows(q.values)
    prows = _Rows(p.probs) if p is not None else None
    vrows = _Rows(visits) if visits is not None else None
    draw = rng.random

    s = env.reset()
    steps = 0
    total = 0.0
    truncated = False
    try:
        while True:
            qs = qrows[s]
            if kind == "epsilon_greedy":
                if draw() < eps:
                    a = min(int(draw() * m), m - 1)
                else:
                    a = qs.index(max(qs))
            elif prows is not None and strat.uses_policy_table:
                a = _draw(prows[s], draw())
            elif kind == "softmax":
                a = _draw(_softmax_weights(qs, tau), draw())
            else:
                a = qs.index(max(qs))

            st = env.step(a)
            steps += 1
            r = st.reward
            if not math.isfinite(r):
                raise ValueError(f"environment returned non-finite reward {r}")
            total += r
            s2 = st.next_state
            absorbed = st.terminal and not st.truncated

            if vrows is not None:
                vs = vrows[s]
                vs[a] += 1
                alpha = rate(vs[a])
            else:
                alpha = sched.c
            max_next = 0.0 if absorbed else max(qrows[s2])
            qs[a] += alpha * (r + gamma * max_next - qs[a])

            if update_policy:
                # successor value after the backup, as in the algorithm listing
                max_next = 0.0 if absorbed else max(qrows[s2])
                delta = r + max_next
                if fidelity_based:
                    delta += st.fidelity
                row = prows[s]
                row[a] += k * delta
                prows[s] = _normalize(row, p_min)

            if st.terminal:
                truncated = st.truncated
                break
            if steps >= cap:
                truncated = True
                break
            s = s2
    finally:
        qrows.flush()
        if prows is not None:
            prows.flush()
        if vrows is not None:
            vrows.flush()

    if entropies is None:
        mean_entropy = float(table_entropies(selection_probabilities(q, strat, p)).mean())
    else:
        if prows is not None and strat.uses_policy_table:
            for s_, row in prows.items():
                entropies[s_] = _entropy_bits(row)
        elif kind == "softmax":
            for s_, row in qrows.items():
                w = _softmax_weights(row, tau)
                z = sum(w)
                entropies[s_] = _entropy_bits([x / z for x in w])
        mean_entropy = math.fsum(entropies) / len(entropies)
    record = EpisodeRecord(
        episode=episode,
        steps=steps,
        total_reward=total,
        terminal_fidelity=st.fidelity,
        mean_entropy=mean_entropy,
        truncated=truncated,
        success=(not truncated) and is_success(env, st),
    )
    return record, q, p


def _entropy_bits(row: list[float]) -> float:
    return max(0.0, -sum(x * math.log2(x) for x in row if x > 0.0))


def default_tolerance(env: Environment) -> float:
    return 0.01 if env.progress_metric == "fidelity" else 0.0


def convergence_episode(
    records: Sequence[EpisodeRecord],
    window: int,
    tolerance: float,
    metric: str = "steps",
    start: int = 0,
) -> int | None:
    """First episode from which ``window`` consecutive episodes all succeed and agree.

    For ``metric="steps"`` every episode in the window must be within
    ``tolerance`` steps of the window's shortest; for ``"fidelity"`` within
    ``tolerance`` of the window's highest terminal fidelity. Returns the
    episode index (not the list position), or ``None``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    recs = [r for r in records if r.episode >= start]
    n = len(recs)
    ok = [r.success and not r.truncated for r in recs]
    for i in range(n - window + 1):
        chunk = recs[i : i + window]
        if not all(ok[i : i + window]):
            continue
        if metric == "steps":
            best = min(r.steps for r in chunk)
            if all(r.steps <= best + tolerance for r in chunk):
                return chunk[0].episode
        elif metric == "fidelity":
            fids = [r.terminal_fidelity or 0.0 for r in chunk]
            best = max(fids)
            if all(f >= best - tolerance for f in fids):
                return chunk[0].episode
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return None


def new_tables(env: Environment, strategy: StrategyConfig) -> tuple[QTable, PolicyTable | None]:
    q = QTable.zeros(env.n_states, env.n_actions)
    p = PolicyTable.uniform(env.n_states, env.n_actions, strategy.p_min) if strategy.uses_policy_table else None
    return q, p


def train(
    env: Environment,
    cfg: TrainConfig,
    target_change: TargetChange | None = None,
    q: QTable | None = None,
    p: PolicyTable | None = None,
) -> RunResult:
    """Run up to ``cfg.max_episodes`` episodes from fresh (or given) tables.

    Training also stops once ``cfg.max_total_steps`` environment steps have
    been taken, cutting the last episode short if needed.
    """
    t0 = time.perf_counter()
    fresh_q, fresh_p = new_tables(env, cfg.strategy)
    q = q if q is not None else fresh_q
    p = p if p is not None else fresh_p
    _check_compatible(env, q, p, cfg.strategy)
    env.seed(cfg.seed)
    visits = None if cfg.schedule.kind == "constant" else np.zeros(q.values.shape, dtype=np.int64)
    entropies = table_entropies(selection_probabilities(q, cfg.strategy, p)).tolist()
    stream = UniformStream(cfg.seed)
    records: list[EpisodeRecord] = []
    remaining = cfg.max_total_steps
    for e in range(cfg.max_episodes):
        if remaining is not None and remaining <= 0:
            break
        if target_change is not None and e == target_change.episode:
            env.set_target(target_change.target)
        rec, q, p = run_episode(
            env, q, p, cfg, stream.restart(e), visits, episode=e, step_cap=remaining, entropies=entropies
        )
        records.append(rec)
        if remaining is not None:
            remaining -= rec.steps
    tol = cfg.convergence_tolerance if cfg.convergence_tolerance is not None else default_tolerance(env)
    conv = convergence_episode(records, cfg.convergence_window, tol, env.progress_metric)
    return RunResult(records, q, p, conv, time.perf_counter() - t0, cfg)


def evaluate_policy(
    env: Environment,
    q: QTable,
    mode: str = "greedy",
    p: PolicyTable | None = None,
    max_steps: int | None = None,
) -> list[TrajectoryStep]:
    """Roll out once without learning.

    ``greedy`` follows argmax Q; ``policy`` follows the most probable action
    of each policy-table row. Both are deterministic.
    """
    if mode not in ("greedy", "policy"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "policy" and p is None:
        raise ValueError("policy mode needs a policy table")
    if q.values.shape != (env.n_states, env.n_actions):
        raise ConfigError(f"Q-table {q.values.shape} does not match environment ({env.n_states}, {env.n_actions})")
    if p is not None and p.probs.shape != q.values.shape:
        raise ConfigError(f"policy table {p.probs.shape} does not match Q-table {q.values.shape}")
    s = env.reset()
    out: list[TrajectoryStep] = []
    while True:
        a = int(np.argmax(p.probs[s])) if mode == "policy" else greedy_action(q, s)
        st = env.step(a)
        amps = env.amplitudes.copy() if hasattr(env, "amplitudes") else np.zeros(0, dtype=complex)
        out.append(TrajectoryStep(s, a, st.reward, st.fidelity, amps))
        if st.terminal or (max_steps is not None and len(out) >= max_steps):
            return out
        s = st.next_state


def value_iteration(
    transitions: np.ndarray, rewards: np.ndarray, gamma: float, tol: float = 1e-10, max_iter: int = 100_000
) -> QTable:
    """Optimal action values of a finite MDP by repeated Bellman backups."""
    transitions = np.asarray(transitions, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if transitions.shape != rewards.shape + (rewards.shape[0],):
        raise ValueError(f"transition shape {transitions.shape} does not match rewards {rewards.shape}")
    if np.any(transitions < 0) or np.any(np.abs(transitions.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("transition rows must be probability distributions")
    qv = np.zeros_like(rewards)
    for _ in range(max_iter):
        new = rewards + gamma * transitions @ qv.max(axis=1)
        change = np.max(np.abs(new - qv))
        qv = new
        if change < tol:
            break
    return QTable(qv)


def bellman_residual(q: QTable, transitions: np.ndarray, rewards: np.ndarray, gamma: float) -> float:
    backup = rewards + gamma * transitions @ q.values.max(axis=1)
    return float(np.max(np.abs(backup - q.values)))


# --------------------------------------------------------------------------
# multi-seed comparisons


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    seed_count: int
    median_convergence_episode: float
    success_rate: float
    median_cumulative_steps: float


def _median_episode(values: Sequence[int | None]) -> float:
    return float(statistics.median(math.inf if v is None else v for v in values))


def aggregate(strategy: str, results: Sequence[RunResult]) -> ComparisonRow:
    convs = [r.convergence_episode for r in results]
    return ComparisonRow(
        strategy=strategy,
        seed_count=len(results),
        median_convergence_episode=_median_episode(convs),
        success_rate=sum(c is not None for c in convs) / len(results),
        median_cumulative_steps=float(statistics.median(r.cumulative_steps for r in results)),
    )


def _run_one(args) -> RunResult:
    env_factory, cfg, target_change = args
    return train(env_factory(), cfg, target_change)


def _run_one_safe(args) -> RunResult | Exception:
    try:
        return _run_one(args)
    except Exception as exc:  # reported per run by the caller
        return exc


def run_many(
    env_factory: Callable[[], Environment],
    configs: Sequence[TrainConfig],
    target_change: TargetChange | None = None,
    jobs: int = 1,
    capture_errors: bool = False,
) -> list[RunResult | Exception]:
    """Train one fresh environment per config, optionally across worker processes.

    Results come back in input order. With ``capture_errors`` a failing run
    yields its exception instead of aborting the batch.
    """
    work = [(env_factory, c, target_change) for c in configs]
    fn = _run_one_safe if capture_errors else _run_one
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, work))
    return [fn(w) for w in work]


def compare_strategies(
    env_factory: Callable[[], Environment],
    strategies: dict[str, StrategyConfig],
    seeds: Sequence[int],
    cfg: TrainConfig,
    target_change: TargetChange | None = None,
    jobs: int = 1,
) -> tuple[list[ComparisonRow], dict[tuple[str, int], RunResult]]:
    """Train every (strategy, seed) pair independently and aggregate per strategy.

    Rows come back sorted by strategy name, so the result does not depend on
    the order strategies or seeds were listed in.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    pairs = [(name, seed) for name in sorted(strategies) for seed in sorted(seeds)]
    outs = run_many(
        env_factory,
        [replace(cfg, strategy=strategies[name], seed=seed) for name, seed in pairs],
        target_change,
        jobs,
    )
    runs = dict(zip(pairs, outs))
    rows = [aggregate(name, [runs[(name, s)] for s in sorted(seeds)]) for name in sorted(strategies)]
    return rows, runs
