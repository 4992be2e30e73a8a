"""Tabular value and policy tables, action selection and update rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

P_MIN = 1e-6
ROW_TOL = 1e-6
STRATEGIES = ("greedy", "epsilon_greedy", "softmax", "probabilistic", "fidelity_probabilistic")


class QTable:
    """``n_states x n_actions`` action-value table."""

    def __init__(self, values: np.ndarray):
        values = np.array(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("Q-table must be 2-D")
        if not np.all(np.isfinite(values)):
            raise ValueError("Q-table has non-finite values")
        self.values = values

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "QTable":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "QTable":
        return QTable(self.values)


class PolicyTable:
    """Per-state action-selection probabilities; every row lies on the simplex."""

    def __init__(self, probs: np.ndarray, p_min: float = P_MIN):
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D")
        if not 0.0 <= p_min < 1.0 / probs.shape[1]:
            raise ValueError(f"p_min must lie in [0, 1/{probs.shape[1]})")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("policy rows must sum to 1")
        self.probs = probs
        self.p_min = p_min

    @classmethod
    def uniform(cls, n_states: int, n_actions: int, p_min: float = P_MIN) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions), p_min)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.probs, self.p_min)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    epsilon: float = 0.1
    tau: float = 1.0
    k: float = 0.01
    p_min: float = P_MIN

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.k >= 0:
            raise ValueError("k must be >= 0")

    @property
    def uses_policy_table(self) -> bool:
        return self.kind in ("probabilistic", "fidelity_probabilistic")

    @property
    def label(self) -> str:
        return {
            "greedy": "QL-greedy",
            "epsilon_greedy": "QL",
            "softmax": "QL-softmax",
            "probabilistic": "PQL",
            "fidelity_probabilistic": "FPQL",
        }[self.kind]


def _check_index(i: int, n: int, what: str) -> None:
    if not 0 <= i < n:
        raise IndexError(f"{what} {i} outside [0, {n})")


def q_update(
    q: QTable,
    s: int,
    a: int,
    r: float,
    s_next: int,
    alpha: float,
    gamma: float,
    terminal: bool,
) -> QTable:
    """One-step Q-learning backup, in place. Terminal successors bootstrap from 0."""
    _check_index(s, q.n_states, "state")
    _check_index(a, q.n_actions, "action")
    _check_index(s_next, q.n_states, "next state")
    if not math.isfinite(r):
        raise ValueError("reward must be finite")
    future = 0.0 if terminal else float(q.values[s_next].max())
    q.values[s, a] = (1.0 - alpha) * q.values[s, a] + alpha * (r + gamma * future)
    return q


def _argmax(row: list[float]) -> int:
    return row.index(max(row))


def _draw(weights: list[float], u: float) -> int:
    """Inverse-CDF index for a uniform ``u`` in [0, 1) over unnormalized ``weights``."""
    target = u * sum(weights)
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if target < acc:
            return i
    return len(weights) - 1


def _softmax_weights(row: list[float], tau: float) -> list[float]:
    top = max(row)
    return [math.exp((x - top) / tau) for x in row]


def _normalize(row: list[float], p_min: float) -> list[float]:
    out = [x if x > p_min else p_min for x in row]
    total = sum(out)
    out = [x / total for x in out]
    if p_min > 0.0 and min(out) < p_min:
        pinned = [False] * len(out)
        for _ in range(len(out)):
            low = [i for i, x in enumerate(out) if x < p_min and not pinned[i]]
            if not low:
                break
            for i in low:
                pinned[i] = True
                out[i] = p_min
            free = sum(x for x, pin in zip(out, pinned) if not pin)
            scale = (1.0 - p_min * sum(pinned)) / free
            out = [x if pin else x * scale for x, pin in zip(out, pinned)]
    return out


def greedy_action(q: QTable, s: int) -> int:
    """Argmax of row ``s``; ties go to the lowest action index."""
    return int(np.argmax(q.values[s]))


def epsilon_greedy_select(q: QTable, s: int, epsilon: float, rng) -> int:
    """Uniform random action with probability ``epsilon``, else the greedy one.

    ``rng`` is anything with a ``random()`` method returning floats in [0, 1).
    """
    if rng.random() < epsilon:
        return min(int(rng.random() * q.n_actions), q.n_actions - 1)
    return greedy_action(q, s)


def softmax_probs(row, tau: float) -> np.ndarray:
    w = _softmax_weights(list(map(float, row)), tau)
    total = sum(w)
    return np.array([x / total for x in w])


def softmax_select(q: QTable, s: int, tau: float, rng) -> int:
    """Boltzmann draw with weights ``exp(Q/tau)``, max-shifted against overflow."""
    return _draw(_softmax_weights(q.values[s].tolist(), tau), rng.random())


def probabilistic_select(p: PolicyTable, s: int, rng) -> int:
    """Inverse-CDF draw from row ``s`` of the policy table."""
    row = p.probs[s].tolist()
    total = sum(row)
    if abs(total - 1.0) > ROW_TOL:
        raise ValueError(f"policy row {s} is not normalized (sum {total:.9g})")
    return _draw(row, rng.random())


def normalize_row(row, p_min: float = P_MIN) -> np.ndarray:
    """Project a raw probability row back onto the simplex with a floor.

    Entries are clamped below at ``p_min`` and divided by their sum. If that
    division pushes a small entry under ``p_min`` again (the raw row summed to
    more than one), the offending entries are pinned at ``p_min`` and the rest
    rescaled to absorb the difference.
    """
    row = [float(x) for x in row]
    m = len(row)
    if not all(math.isfinite(x) for x in row):
        raise ValueError("row has non-finite entries")
    if not 0.0 <= p_min < 1.0 / m:
        raise ValueError(f"p_min must lie in [0, 1/{m})")
    return np.array(_normalize(row, p_min))


def _apply_increment(p: PolicyTable, s: int, a: int, delta: float, k: float) -> PolicyTable:
    _check_index(s, p.n_states, "state")
    _check_index(a, p.n_actions, "action")
    if not k >= 0:
        raise ValueError("k must be >= 0")
    if not math.isfinite(delta):
        raise ValueError("policy increment must be finite")
    if k == 0.0:
        return p
    row = p.probs[s].tolist()
    row[a] += k * delta
    p.probs[s] = _normalize(row, p.p_min)
    return p


def policy_update_pql(
    p: PolicyTable, s: int, a: int, r: float, max_q_next: float, k: float
) -> PolicyTable:
    """``p(s,a) += k (r + max Q(s',.))`` then renormalize row ``s``, in place."""
    return _apply_increment(p, s, a, r + max_q_next, k)


def policy_update_fpql(
    p: PolicyTable,
    s: int,
    a: int,
    r: float,
    max_q_next: float,
    fidelity_next: float,
    k: float,
) -> PolicyTable:
    """As :func:`policy_update_pql` with the successor's fidelity added to the increment."""
    if not 0.0 <= fidelity_next <= 1.0:
        raise ValueError(f"fidelity {fidelity_next} outside [0, 1]")
    return _apply_increment(p, s, a, r + max_q_next + fidelity_next, k)


def row_entropy(row) -> float:
    row = np.asarray(row, dtype=float)
    nz = row[row > 0]
    return float(-(nz * np.log2(nz)).sum()) if nz.size else 0.0


def exploration_entropy(p: PolicyTable, s: int) -> float:
    """Shannon entropy (bits) of the action distribution at state ``s``."""
    return max(0.0, row_entropy(p.probs[s]))


def table_entropies(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log2(probs), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


def mean_exploration_entropy(p: PolicyTable) -> float:
    return float(table_entropies(p.probs).mean())


def selection_probabilities(q: QTable, strategy: StrategyConfig, p: PolicyTable | None = None) -> np.ndarray:
    """Full action distribution each state's selector currently samples from.

    Used to report exploration entropy for strategies that keep no policy
    table of their own.
    """
    if strategy.uses_policy_table:
        if p is None:
            raise ValueError("policy table required")
        return p.probs
    n, m = q.values.shape
    if strategy.kind == "softmax":
        z = (q.values - q.values.max(axis=1, keepdims=True)) / strategy.tau
        w = np.exp(z)
        return w / w.sum(axis=1, keepdims=True)
    eps = strategy.epsilon if strategy.kind == "epsilon_greedy" else 0.0
    out = np.full((n, m), eps / m)
    out[np.arange(n), q.values.argmax(axis=1)] += 1.0 - eps
    return out
