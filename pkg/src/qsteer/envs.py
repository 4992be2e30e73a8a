"""Discrete control environments.

Two quantum tasks (a spin-1/2 driven by three fixed rotations, and a
three-level Lambda system driven by 41 pulse amplitudes) plus seeded random
finite MDPs whose exact tables feed the value-iteration oracle.

The quantum environments keep their propagators as plain Python complex
tuples and step with scalar arithmetic; that is several times faster than
numpy for 2x2/3x3 products and the step loop is the hot path of every
experiment.
"""

from __future__ import annotations

import bisect
import cmath
import itertools
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from qsteer.linalg import expm_hermitian
from qsteer.quantum import (
    TWO_PI,
    BlochAngles,
    Propagator,
    as_state,
    bloch_to_state,
    fidelity,
    normalized,
    state_to_bloch,
)

I_Z = np.array([[0.5, 0.0], [0.0, -0.5]], dtype=complex)
I_X = np.array([[0.0, 0.5], [0.5, 0.0]], dtype=complex)
SPIN_STEP_ANGLE = math.pi / 15

LAMBDA_H0 = np.diag([1.5, 1.0, 0.0]).astype(complex)
LAMBDA_H1 = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=complex)

REWARD_MODES = ("binary", "fidelity_squared")


class EpisodeOver(RuntimeError):
    """Raised by ``step`` after a terminal transition until ``reset`` is called."""


class EnvStep(NamedTuple):
    next_state: int
    reward: float
    terminal: bool
    fidelity: float | None = None
    # True when the episode ended on the step cap rather than on its own terms.
    truncated: bool = False


class Environment(ABC):
    """Finite MDP with a fixed action set shared by every state."""

    n_states: int
    n_actions: int
    supports_fidelity: bool = False
    # Which per-episode quantity summarizes learning progress: "steps" or "fidelity".
    progress_metric: str = "steps"

    @abstractmethod
    def reset(self) -> int: ...

    @abstractmethod
    def step(self, action: int) -> EnvStep: ...

    def seed(self, seed: int) -> None:
        """Seed any internal randomness. Deterministic environments ignore this."""

    def _check_action(self, action: int) -> int:
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action {action} outside [0, {self.n_actions})")
        return action


def _matrix_tuple(m: np.ndarray) -> tuple[complex, ...]:
    return tuple(complex(x) for x in np.asarray(m).ravel())


def _target_vector(target, dim: int) -> np.ndarray:
    """Plain 2-tuples of reals are Bloch angles; anything else is an amplitude vector."""
    if (
        dim == 2
        and isinstance(target, tuple)
        and len(target) == 2
        and all(isinstance(x, (int, float)) for x in target)
    ):
        return bloch_to_state(BlochAngles(*target))
    psi = as_state(np.asarray(target, dtype=complex))
    if psi.shape[0] != dim:
        raise ValueError(f"target has dimension {psi.shape[0]}, environment has {dim}")
    return psi


# --------------------------------------------------------------------------
# spin-1/2


def build_spin_propagators() -> list[Propagator]:
    """No pulse, positive pulse and negative pulse rotations, in action order."""
    return [
        Propagator(expm_hermitian(I_Z, SPIN_STEP_ANGLE), "U1"),
        Propagator(expm_hermitian(I_Z + 0.5 * I_X, SPIN_STEP_ANGLE), "U2"),
        Propagator(expm_hermitian(I_Z - 0.5 * I_X, SPIN_STEP_ANGLE), "U3"),
    ]


# Cell coordinates this close below a grid line count as on it, so states
# sitting exactly on a line (like the default initial state) do not flicker
# between cells through roundoff.
GRID_SNAP = 1e-12


def _grid_floor(x: float) -> int:
    return math.floor(x + GRID_SNAP)


def bloch_discretize(angles: BlochAngles | tuple[float, float], theta_bins: int, phi_bins: int) -> int:
    """Row-major (theta, phi) grid cell of a Bloch point."""
    theta, phi = angles
    row = _grid_floor(theta / math.pi * theta_bins)
    row = min(max(row, 0), theta_bins - 1)
    col = _grid_floor(phi / TWO_PI * phi_bins) % phi_bins
    return row * phi_bins + col


@dataclass(frozen=True)
class SpinHalfEnvConfig:
    theta_bins: int = 60
    phi_bins: int = 60
    initial: BlochAngles = BlochAngles(math.pi / 60, math.pi / 30)
    target: BlochAngles = BlochAngles(41 * math.pi / 60, 29 * math.pi / 30)
    success_fidelity: float = 0.999
    step_cap: int = 10_000
    step_reward: float = -1.0
    goal_reward: float = 1000.0

    def __post_init__(self):
        if self.theta_bins < 2 or self.phi_bins < 2:
            raise ValueError("theta_bins and phi_bins must be >= 2")
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")
        if not 0.0 < self.success_fidelity <= 1.0:
            raise ValueError("success_fidelity must lie in (0, 1]")
        object.__setattr__(self, "initial", BlochAngles(*self.initial))
        object.__setattr__(self, "target", BlochAngles(*self.target))


class SpinHalfEnv(Environment):
    """Steer a spin-1/2 across the Bloch sphere with three fixed rotations.

    The agent sees the (theta, phi) grid cell of the state while the dynamics
    evolve the exact amplitudes, so the cell index is only approximately
    Markov.
    """

    supports_fidelity = True
    progress_metric = "steps"

    def __init__(self, config: SpinHalfEnvConfig | None = None):
        self.config = config or SpinHalfEnvConfig()
        self.propagators = build_spin_propagators()
        self._u = [_matrix_tuple(p.matrix) for p in self.propagators]
        self.n_states = self.config.theta_bins * self.config.phi_bins
        self.n_actions = len(self.propagators)
        self._initial = bloch_to_state(self.config.initial)
        self.target_state = bloch_to_state(self.config.target)
        self._t0, self._t1 = (complex(x).conjugate() for x in self.target_state)
        self._c0 = self._c1 = 0j
        self.steps = 0
        self.done = True
        self.reset()

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([self._c0, self._c1])

    @property
    def initial_state(self) -> np.ndarray:
        return self._initial.copy()

    def _cell(self) -> int:
        c0, c1 = self._c0, self._c1
        r0, r1 = abs(c0), abs(c1)
        theta = 2.0 * math.atan2(r1, r0)
        if r0 <= 1e-12 or r1 <= 1e-12:
            phi = 0.0
        else:
            phi = (cmath.phase(c1) - cmath.phase(c0)) % TWO_PI
        cfg = self.config
        row = min(max(_grid_floor(theta / math.pi * cfg.theta_bins), 0), cfg.theta_bins - 1)
        return row * cfg.phi_bins + _grid_floor(phi / TWO_PI * cfg.phi_bins) % cfg.phi_bins

    def reset(self) -> int:
        self._c0, self._c1 = (complex(x) for x in self._initial)
        self.steps = 0
        self.done = False
        return self._cell()

    def step(self, action: int) -> EnvStep:
        if self.done:
            raise EpisodeOver("episode has terminated; call reset()")
        u00, u01, u10, u11 = self._u[self._check_action(action)]
        c0, c1 = self._c0, self._c1
        self._c0, self._c1 = u00 * c0 + u01 * c1, u10 * c0 + u11 * c1
        self.steps += 1
        fid = min(1.0, abs(self._t0 * self._c0 + self._t1 * self._c1))
        cfg = self.config
        if fid >= cfg.success_fidelity:
            self.done = True
            return EnvStep(self._cell(), cfg.goal_reward, True, fid)
        if self.steps >= cfg.step_cap:
            self.done = True
            return EnvStep(self._cell(), cfg.step_reward, True, fid, truncated=True)
        return EnvStep(self._cell(), cfg.step_reward, False, fid)

    def current_fidelity(self) -> float:
        return fidelity(self.amplitudes, self.target_state)

    def bloch_angles(self) -> BlochAngles:
        return state_to_bloch(normalized(self.amplitudes))

    def set_target(self, target) -> "SpinHalfEnv":
        psi = _target_vector(target, 2)
        self.target_state = psi
        self._t0, self._t1 = (complex(x).conjugate() for x in psi)
        if isinstance(target, tuple):
            self.config = replace(self.config, target=BlochAngles(*target))
        else:
            self.config = replace(self.config, target=state_to_bloch(psi))
        return self


# --------------------------------------------------------------------------
# Lambda-type three-level system


def build_lambda_propagators(bound: int = 20, dt: float = 0.1, coupling: float = 0.1) -> list[Propagator]:
    """``exp(-i dt (H0 + coupling * E * H1))`` for E = -bound .. bound, in action order."""
    return [
        Propagator(expm_hermitian(LAMBDA_H0 + coupling * e * LAMBDA_H1, dt), f"E={e}")
        for e in range(-bound, bound + 1)
    ]


@dataclass(frozen=True)
class LambdaEnvConfig:
    horizon: int = 100
    pulse_amplitudes: int = 20
    dt: float = 0.1
    success_fidelity: float = 0.99
    goal_reward: float = 1000.0
    coupling: float = 0.1
    reward_mode: str = "binary"
    initial: tuple[complex, ...] = (1.0, 0.0, 0.0)
    target: tuple[complex, ...] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.pulse_amplitudes < 1:
            raise ValueError("pulse_amplitudes must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.success_fidelity <= 1.0:
            raise ValueError("success_fidelity must lie in (0, 1]")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")


class LambdaEnv(Environment):
    """Fixed-horizon population transfer in a three-level Lambda system.

    The MDP state is the control-step counter, so a learned policy is an
    open-loop pulse schedule. Reward is paid only at the horizon.
    """

    supports_fidelity = True
    progress_metric = "fidelity"

    def __init__(self, config: LambdaEnvConfig | None = None):
        self.config = config or LambdaEnvConfig()
        cfg = self.config
        self.propagators = build_lambda_propagators(cfg.pulse_amplitudes, cfg.dt, cfg.coupling)
        self._u = [_matrix_tuple(p.matrix) for p in self.propagators]
        self.n_states = cfg.horizon + 1
        self.n_actions = len(self.propagators)
        self._initial = as_state(np.asarray(cfg.initial, dtype=complex))
        self.target_state = as_state(np.asarray(cfg.target, dtype=complex))
        self._tconj = tuple(complex(x).conjugate() for x in self.target_state)
        self._c = (0j, 0j, 0j)
        self.steps = 0
        self.done = True
        self.reset()

    def pulse(self, action: int) -> int:
        """Pulse count E for an action index."""
        return int(action) - self.config.pulse_amplitudes

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array(self._c)

    @property
    def initial_state(self) -> np.ndarray:
        return self._initial.copy()

    def reset(self) -> int:
        self._c = tuple(complex(x) for x in self._initial)
        self.steps = 0
        self.done = False
        return 0

    def step(self, action: int) -> EnvStep:
        if self.done:
            raise EpisodeOver("episode has terminated; call reset()")
        u = self._u[self._check_action(action)]
        a, b, c = self._c
        self._c = (
            u[0] * a + u[1] * b + u[2] * c,
            u[3] * a + u[4] * b + u[5] * c,
            u[6] * a + u[7] * b + u[8] * c,
        )
        self.steps += 1
        t = self._tconj
        fid = min(1.0, abs(t[0] * self._c[0] + t[1] * self._c[1] + t[2] * self._c[2]))
        cfg = self.config
        if self.steps < cfg.horizon:
            return EnvStep(self.steps, 0.0, False, fid)
        self.done = True
        if cfg.reward_mode == "binary":
            reward = cfg.goal_reward if fid >= cfg.success_fidelity else 0.0
        else:
            reward = cfg.goal_reward * fid * fid
        return EnvStep(self.steps, reward, True, fid)

    def current_fidelity(self) -> float:
        return fidelity(self.amplitudes, self.target_state)

    def set_target(self, target) -> "LambdaEnv":
        psi = _target_vector(target, 3)
        self.target_state = psi
        self._tconj = tuple(complex(x).conjugate() for x in psi)
        self.config = replace(self.config, target=tuple(complex(x) for x in psi))
        return self


# --------------------------------------------------------------------------
# random finite MDPs


@dataclass
class RandomMDP(Environment):
    """Seeded finite MDP with one absorbing terminal state (the last index).

    ``transitions[s, a, s']`` and ``rewards[s, a]`` are exposed for the
    value-iteration oracle. Episodes start from a uniformly drawn
    non-terminal state.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    mdp_seed: int = 0
    _uniform: object = field(init=False, repr=False)
    _state: int = field(init=False, default=0)

    supports_fidelity = False
    progress_metric = "steps"

    def __post_init__(self):
        self.n_states, self.n_actions = self.rewards.shape
        self.terminal_state = self.n_states - 1
        cdf = np.cumsum(self.transitions, axis=2)
        self._cdf = [[row.tolist() for row in per_state] for per_state in cdf]
        self._r = self.rewards.tolist()
        self.done = True
        self.seed(0)

    def seed(self, seed: int) -> None:
        rng = np.random.default_rng([self.mdp_seed, seed])
        self._uniform = itertools.chain.from_iterable(iter(lambda: rng.random(256).tolist(), None)).__next__

    def reset(self) -> int:
        self._state = min(int(self._uniform() * (self.n_states - 1)), self.n_states - 2)
        self.done = False
        return self._state

    def step(self, action: int) -> EnvStep:
        if self.done:
            raise EpisodeOver("episode has terminated; call reset()")
        action = self._check_action(action)
        s = self._state
        cdf = self._cdf[s][action]
        nxt = min(bisect.bisect_right(cdf, self._uniform() * cdf[-1]), self.n_states - 1)
        self._state = nxt
        terminal = nxt == self.terminal_state
        self.done = terminal
        return EnvStep(nxt, self._r[s][action], terminal)


def make_random_mdp(n_states: int, n_actions: int, seed: int) -> RandomMDP:
    if n_states < 2 or n_actions < 2:
        raise ValueError("need at least 2 states and 2 actions")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(size=(n_states, n_actions, n_states))
    transitions = raw / raw.sum(axis=2, keepdims=True)
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    term = n_states - 1
    transitions[term] = 0.0
    transitions[term, :, term] = 1.0
    rewards[term] = 0.0
    return RandomMDP(transitions, rewards, mdp_seed=seed)


def set_target(env: Environment, new_target) -> Environment:
    """Swap the target state of a quantum environment in place.

    The state space, action set and any learned tables are unaffected; only
    subsequent fidelity and success checks change.
    """
    if not env.supports_fidelity or not hasattr(env, "set_target"):
        raise TypeError(f"{type(env).__name__} has no target state")
    return env.set_target(new_target)


def apply_pulse_indices(env: Environment, actions: Sequence[int]) -> list[Propagator]:
    """Propagators for a sequence of action indices, validated against ``env``."""
    props = env.propagators
    out = []
    for i, a in enumerate(actions):
        if not 0 <= a < len(props):
            raise IndexError(f"action {a} at position {i} outside [0, {len(props)})")
        out.append(props[a])
    return out
