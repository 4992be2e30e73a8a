"""Tabular Q-learning with probability-table and fidelity-guided exploration,
plus small quantum control environments to run it on."""

from pathlib import Path

from qsteer.envs import (
    EnvStep,
    Environment,
    LambdaEnv,
    LambdaEnvConfig,
    RandomMDP,
    SpinHalfEnv,
    SpinHalfEnvConfig,
    make_random_mdp,
    set_target,
)
from qsteer.quantum import BlochAngles, Propagator, fidelity, transition_landscape
from qsteer.rl import PolicyTable, QTable, StrategyConfig
from qsteer.trainer import (
    EpisodeRecord,
    RunResult,
    Schedule,
    TargetChange,
    TrainConfig,
    compare_strategies,
    evaluate_policy,
    train,
    value_iteration,
)

__version__ = "0.1.0"

CONFIG_DIR = Path(__file__).parent / "configs"


def shipped_config(name: str) -> Path:
    """Path of a bundled config such as ``"spin.cfg"``."""
    path = CONFIG_DIR / name
    if not path.is_file():
        raise FileNotFoundError(f"no shipped config {name!r}; have {sorted(p.name for p in CONFIG_DIR.glob('*.cfg'))}")
    return path


__all__ = [
    "BlochAngles",
    "EnvStep",
    "Environment",
    "EpisodeRecord",
    "LambdaEnv",
    "LambdaEnvConfig",
    "PolicyTable",
    "Propagator",
    "QTable",
    "RandomMDP",
    "RunResult",
    "Schedule",
    "SpinHalfEnv",
    "SpinHalfEnvConfig",
    "StrategyConfig",
    "TargetChange",
    "TrainConfig",
    "compare_strategies",
    "evaluate_policy",
    "fidelity",
    "make_random_mdp",
    "set_target",
    "shipped_config",
    "train",
    "transition_landscape",
    "value_iteration",
]
