"""Experiment configuration files.

A config is a flat INI file::

    [environment]
    kind = spin_half

    [training]
    alpha = 0.01
    gamma = 0.99

    [strategies]
    kinds = fpql, pql, ql

    [seeds]
    values = 0..19

Every key except ``environment.kind``, ``strategies.kinds`` and
``seeds.values`` has a default. Unknown sections and keys are rejected.
"""

from __future__ import annotations

import ast
import configparser
import math
import operator
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from qsteer.envs import (
    REWARD_MODES,
    Environment,
    LambdaEnv,
    LambdaEnvConfig,
    SpinHalfEnv,
    SpinHalfEnvConfig,
    make_random_mdp,
)
from qsteer.quantum import BlochAngles
from qsteer.rl import P_MIN, STRATEGIES, StrategyConfig
from qsteer.trainer import ConfigError, Schedule, TargetChange, TrainConfig

ENV_KINDS = ("spin_half", "lambda", "random_mdp")

STRATEGY_ALIASES = {
    "fpql": "fidelity_probabilistic",
    "pql": "probabilistic",
    "ql": "epsilon_greedy",
    "softmax": "softmax",
    "greedy": "greedy",
}
STRATEGY_ALIASES.update({k: k for k in STRATEGIES})

REQUIRED = (("environment", "kind"), ("strategies", "kinds"), ("seeds", "values"))


# --------------------------------------------------------------------------
# value parsers

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}


def _eval_number(node: ast.AST) -> float:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_number(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_number(node.left), _eval_number(node.right))
    raise ValueError("only numbers, pi and + - * / are allowed")


def parse_real(text: str) -> float:
    """A float literal or a small arithmetic expression such as ``41*pi/60``."""
    try:
        value = float(text)
    except ValueError:
        value = None
    if value is None:
        try:
            value = _eval_number(ast.parse(text.strip(), mode="eval").body)
        except (SyntaxError, ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a number: {text!r}") from exc
    if not math.isfinite(value):
        raise ValueError(f"not a finite number: {text!r}")
    return value


def parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ValueError(f"not an integer: {text!r}") from None


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_complex_list(text: str) -> tuple[complex, ...]:
    try:
        return tuple(complex(x.strip().replace(" ", "")) for x in text.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"not a comma-separated list of complex numbers: {text!r}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    """Comma-separated integers and inclusive ranges ``a..b``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (parse_int(x) for x in part.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(parse_int(part))
    if not out:
        raise ValueError("no seeds given")
    if len(set(out)) != len(out):
        raise ValueError("duplicate seeds")
    if any(not 0 <= s < 2**64 for s in out):
        raise ValueError("seeds must be 64-bit unsigned integers")
    return tuple(out)


def parse_strategy_kinds(text: str) -> tuple[str, ...]:
    kinds = []
    for name in (x.strip().lower() for x in text.split(",")):
        if not name:
            continue
        if name not in STRATEGY_ALIASES:
            raise ValueError(f"unknown strategy {name!r}; expected one of {sorted(STRATEGY_ALIASES)}")
        kinds.append(STRATEGY_ALIASES[name])
    if not kinds:
        raise ValueError("no strategies given")
    if len(set(kinds)) != len(kinds):
        raise ValueError("duplicate strategies")
    return tuple(kinds)


# --------------------------------------------------------------------------
# schema: section -> key -> (parser, default text)

Parser = Callable[[str], Any]

_SPIN_KEYS: dict[str, tuple[Parser, str]] = {
    "theta_bins": (parse_int, "60"),
    "phi_bins": (parse_int, "60"),
    "initial_theta": (parse_real, "pi/60"),
    "initial_phi": (parse_real, "pi/30"),
    "target_theta": (parse_real, "41*pi/60"),
    "target_phi": (parse_real, "29*pi/30"),
    "success_fidelity": (parse_real, "0.999"),
    "step_cap": (parse_int, "10000"),
    "step_reward": (parse_real, "-1"),
    "goal_reward": (parse_real, "1000"),
}
_LAMBDA_KEYS: dict[str, tuple[Parser, str]] = {
    "horizon": (parse_int, "100"),
    "pulse_amplitudes": (parse_int, "20"),
    "dt": (parse_real, "0.1"),
    "success_fidelity": (parse_real, "0.99"),
    "goal_reward": (parse_real, "1000"),
    "coupling": (parse_real, "0.1"),
    "reward_mode": (str, "binary"),
    "initial": (parse_complex_list, "1, 0, 0"),
    "target": (parse_complex_list, "0, 0, 1"),
}
_MDP_KEYS: dict[str, tuple[Parser, str]] = {
    "n_states": (parse_int, "6"),
    "n_actions": (parse_int, "3"),
    "mdp_seed": (parse_int, "0"),
}
ENV_KEYS = {"spin_half": _SPIN_KEYS, "lambda": _LAMBDA_KEYS, "random_mdp": _MDP_KEYS}

TRAINING_KEYS: dict[str, tuple[Parser, str]] = {
    "alpha": (Schedule.parse, "0.01"),
    "gamma": (parse_real, "0.99"),
    "max_episodes": (parse_int, "500"),
    "step_cap": (parse_int, "10000"),
    "convergence_window": (parse_int, "20"),
    "convergence_tolerance": (parse_real, ""),
    "max_total_steps": (parse_int, ""),
}
STRATEGY_KEYS: dict[str, tuple[Parser, str]] = {
    "kinds": (parse_strategy_kinds, ""),
    "epsilon": (parse_real, "0.1"),
    "tau": (parse_real, "1.0"),
    "k": (parse_real, "0.01"),
    "p_min": (parse_real, repr(P_MIN)),
}
SEED_KEYS: dict[str, tuple[Parser, str]] = {"values": (parse_seeds, "")}
OUTPUT_KEYS: dict[str, tuple[Parser, str]] = {"dir": (str, ""), "plots": (parse_bool, "true")}
CHANGE_KEYS_SPIN: dict[str, tuple[Parser, str]] = {
    "episode": (parse_int, ""),
    "target_theta": (parse_real, ""),
    "target_phi": (parse_real, ""),
}
CHANGE_KEYS_LAMBDA: dict[str, tuple[Parser, str]] = {
    "episode": (parse_int, ""),
    "target": (parse_complex_list, ""),
}

SECTIONS = ("environment", "training", "strategies", "seeds", "output", "environment_change")


@dataclass(frozen=True)
class RandomMDPSpec:
    n_states: int = 6
    n_actions: int = 3
    mdp_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    env_kind: str
    env_config: SpinHalfEnvConfig | LambdaEnvConfig | RandomMDPSpec
    training: TrainConfig
    strategies: dict[str, StrategyConfig]
    seeds: tuple[int, ...]
    output_dir: str | None = None
    plots: bool = True
    environment_change: TargetChange | None = None
    # effective key/value text of every section, defaults filled in
    echo: dict[str, dict[str, str]] = field(default_factory=dict)

    def make_env(self) -> Environment:
        return build_env(self.env_kind, self.env_config)

    @property
    def strategy_names(self) -> list[str]:
        return list(self.strategies)

    def train_config(self, strategy: str | None = None, seed: int | None = None) -> TrainConfig:
        name = strategy if strategy is not None else self.strategy_names[0]
        return replace(
            self.training,
            strategy=self.strategies[name],
            seed=self.seeds[0] if seed is None else seed,
        )


def build_env(kind: str, cfg) -> Environment:
    """Module-level factory so worker processes can rebuild environments."""
    if kind == "spin_half":
        return SpinHalfEnv(cfg)
    if kind == "lambda":
        return LambdaEnv(cfg)
    if kind == "random_mdp":
        return make_random_mdp(cfg.n_states, cfg.n_actions, cfg.mdp_seed)
    raise ConfigError(f"unknown environment kind {kind!r}")


# --------------------------------------------------------------------------
# reading


def read_sections(path: str | Path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def apply_overrides(sections: dict[str, dict[str, str]], overrides: Mapping[str, str]) -> dict[str, dict[str, str]]:
    """Apply ``section.key -> value`` overrides, returning a new mapping."""
    out = {s: dict(kv) for s, kv in sections.items()}
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})[key] = value
    return out


def _take(section: str, given: dict[str, str], schema: dict[str, tuple[Parser, str]]) -> tuple[dict[str, Any], dict[str, str]]:
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(
            f"unknown key {unknown[0]!r} in [{section}]; allowed keys: {', '.join(sorted(schema))}"
        )
    values: dict[str, Any] = {}
    echo: dict[str, str] = {}
    for key, (parse, default) in schema.items():
        text = given.get(key, default).strip()
        if text == "":
            values[key] = None
            continue
        try:
            values[key] = parse(text)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None
        echo[key] = text
    return values, echo


def _range_error(section: str, key: str, value, rule: str) -> ConfigError:
    return ConfigError(f"[{section}] {key} = {value!r} out of range: {rule}")


def config_from_sections(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    """Validate raw section text and build an :class:`ExperimentConfig`."""
    extra = sorted(set(sections) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown section [{extra[0]}]; allowed sections: {', '.join(SECTIONS)}")
    missing = [f"[{s}] {k}" for s, k in REQUIRED if not sections.get(s, {}).get(k, "").strip()]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    env_sec = dict(sections["environment"])
    kind = env_sec.pop("kind").strip()
    if kind not in ENV_KINDS:
        raise ConfigError(f"[environment] kind = {kind!r}: expected one of {', '.join(ENV_KINDS)}")
    env_vals, env_echo = _take("environment", env_sec, ENV_KEYS[kind])
    env_echo = {"kind": kind, **env_echo}
    env_config = _env_config(kind, env_vals)

    tr, tr_echo = _take("training", sections.get("training", {}), TRAINING_KEYS)
    if not 0.0 <= tr["gamma"] < 1.0:
        raise _range_error(
            "training", "gamma", tr["gamma"],
            "the discount factor must satisfy 0 <= gamma < 1 for Q-learning to converge",
        )
    if tr["max_episodes"] < 0:
        raise _range_error("training", "max_episodes", tr["max_episodes"], "must be >= 0")
    if tr["step_cap"] < 1:
        raise _range_error("training", "step_cap", tr["step_cap"], "must be >= 1")
    if tr["convergence_window"] < 1:
        raise _range_error("training", "convergence_window", tr["convergence_window"], "must be >= 1")
    if tr["max_total_steps"] is not None and tr["max_total_steps"] < 1:
        raise _range_error("training", "max_total_steps", tr["max_total_steps"], "must be >= 1")
    if tr["convergence_tolerance"] is not None and tr["convergence_tolerance"] < 0:
        raise _range_error("training", "convergence_tolerance", tr["convergence_tolerance"], "must be >= 0")

    st, st_echo = _take("strategies", sections["strategies"], STRATEGY_KEYS)
    if not 0.0 <= st["epsilon"] < 1.0:
        raise _range_error("strategies", "epsilon", st["epsilon"], "must lie in [0, 1)")
    if not st["tau"] > 0:
        raise _range_error("strategies", "tau", st["tau"], "must be > 0")
    if not st["k"] >= 0:
        raise _range_error("strategies", "k", st["k"], "must be >= 0")
    strategies = {}
    for kind_name in st["kinds"]:
        sc = StrategyConfig(kind_name, st["epsilon"], st["tau"], st["k"], st["p_min"])
        strategies[sc.label] = sc
    if kind == "random_mdp" and "fidelity_probabilistic" in st["kinds"]:
        raise ConfigError("[strategies] kinds: fpql needs a fidelity signal, which random_mdp does not provide")
    n_actions = _n_actions(kind, env_config)
    if not 0.0 <= st["p_min"] < 1.0 / n_actions:
        raise _range_error("strategies", "p_min", st["p_min"], f"must lie in [0, 1/{n_actions})")

    sd, sd_echo = _take("seeds", sections["seeds"], SEED_KEYS)
    out, out_echo = _take("output", sections.get("output", {}), OUTPUT_KEYS)

    change = None
    change_echo: dict[str, str] = {}
    if "environment_change" in sections:
        if kind == "random_mdp":
            raise ConfigError("[environment_change] needs an environment with a target state")
        schema = CHANGE_KEYS_SPIN if kind == "spin_half" else CHANGE_KEYS_LAMBDA
        ch, change_echo = _take("environment_change", sections["environment_change"], schema)
        absent = [k for k, v in ch.items() if v is None]
        if absent:
            raise ConfigError("missing required keys: " + ", ".join(f"[environment_change] {k}" for k in absent))
        if ch["episode"] < 0:
            raise _range_error("environment_change", "episode", ch["episode"], "must be >= 0")
        if kind == "spin_half":
            target: Any = (ch["target_theta"], ch["target_phi"])
        else:
            target = ch["target"]
            if len(target) != 3 or abs(sum(abs(c) ** 2 for c in target) - 1.0) > 1e-6:
                raise ConfigError("[environment_change] target must be a unit vector of 3 amplitudes")
        change = TargetChange(ch["episode"], target)

    training = TrainConfig(
        strategy=next(iter(strategies.values())),
        alpha=tr["alpha"],
        gamma=tr["gamma"],
        max_episodes=tr["max_episodes"],
        step_cap=tr["step_cap"],
        seed=sd["values"][0],
        convergence_window=tr["convergence_window"],
        convergence_tolerance=tr["convergence_tolerance"],
        max_total_steps=tr["max_total_steps"],
    )
    echo = {
        "environment": env_echo,
        "training": tr_echo,
        "strategies": st_echo,
        "seeds": sd_echo,
        "output": out_echo,
    }
    if change is not None:
        echo["environment_change"] = change_echo
    return ExperimentConfig(
        env_kind=kind,
        env_config=env_config,
        training=training,
        strategies=strategies,
        seeds=sd["values"],
        output_dir=out["dir"],
        plots=out["plots"],
        environment_change=change,
        echo=echo,
    )


def _env_config(kind: str, v: dict[str, Any]):
    try:
        if kind == "spin_half":
            return SpinHalfEnvConfig(
                theta_bins=v["theta_bins"],
                phi_bins=v["phi_bins"],
                initial=BlochAngles(v["initial_theta"], v["initial_phi"]),
                target=BlochAngles(v["target_theta"], v["target_phi"]),
                success_fidelity=v["success_fidelity"],
                step_cap=v["step_cap"],
                step_reward=v["step_reward"],
                goal_reward=v["goal_reward"],
            )
        if kind == "lambda":
            if v["reward_mode"] not in REWARD_MODES:
                raise ValueError(f"reward_mode must be one of {', '.join(REWARD_MODES)}")
            for key in ("initial", "target"):
                if len(v[key]) != 3:
                    raise ValueError(f"{key} needs 3 amplitudes, got {len(v[key])}")
            cfg = LambdaEnvConfig(
                horizon=v["horizon"],
                pulse_amplitudes=v["pulse_amplitudes"],
                dt=v["dt"],
                success_fidelity=v["success_fidelity"],
                goal_reward=v["goal_reward"],
                coupling=v["coupling"],
                reward_mode=v["reward_mode"],
                initial=v["initial"],
                target=v["target"],
            )
            LambdaEnv(cfg)  # validates the states
            return cfg
        if v["n_states"] < 2 or v["n_actions"] < 2:
            raise ValueError("random_mdp needs n_states >= 2 and n_actions >= 2")
        return RandomMDPSpec(v["n_states"], v["n_actions"], v["mdp_seed"])
    except ValueError as exc:
        raise ConfigError(f"[environment] {exc}") from None


def _n_actions(kind: str, cfg) -> int:
    if kind == "spin_half":
        return 3
    if kind == "lambda":
        return 2 * cfg.pulse_amplitudes + 1
    return cfg.n_actions


def parse_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read, override and validate an experiment config file."""
    sections = read_sections(path)
    if overrides:
        sections = apply_overrides(sections, overrides)
    return config_from_sections(sections)


def config_to_ini(echo: Mapping[str, Mapping[str, str]]) -> str:
    """Render an echo mapping back into config-file text."""
    lines = []
    for section, kv in echo.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kv.items())
        lines.append("")
    return "\n".join(lines)
