"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line with the measured
numbers, then asserts the criterion exactly as stated. The long spin and
Lambda comparisons are run once per module and shared.
"""

import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from qsteer import shipped_config
from qsteer.cli import main as cli_main
from qsteer.config import build_env, parse_config
from qsteer.envs import LambdaEnv, SpinHalfEnv, make_random_mdp
from qsteer.quantum import fidelity
from qsteer.rl import (
    PolicyTable,
    QTable,
    StrategyConfig,
    epsilon_greedy_select,
    policy_update_fpql,
    policy_update_pql,
    probabilistic_select,
    row_entropy,
    softmax_probs,
    softmax_select,
)
from qsteer.serialize import artifact_dict, json_text
from qsteer.trainer import (
    TargetChange,
    UniformStream,
    compare_strategies,
    convergence_episode,
    default_tolerance,
    train,
    value_iteration,
)

from conftest import random_state, random_unitary


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def comparison(cfg_name):
    cfg = parse_config(shipped_config(cfg_name))
    t0 = time.perf_counter()
    rows, runs = compare_strategies(lambda: cfg.make_env(), cfg.strategies, cfg.seeds, cfg.training)
    return cfg, {r.strategy: r for r in rows}, runs, time.perf_counter() - t0


def medians_text(rows):
    return ", ".join(f"{k} median {rows[k].median_convergence_episode:g} ({rows[k].success_rate:.0%} conv.)" for k in sorted(rows))


@pytest.fixture(scope="module")
def spin_comparison():
    return comparison("spin.cfg")


@pytest.fixture(scope="module")
def lambda_comparison():
    return comparison("lambda.cfg")


def test_criterion_1_spin_ordering(spin_comparison, capsys):
    cfg, rows, _, elapsed = spin_comparison
    f, p, q = (rows[k].median_convergence_episode for k in ("FPQL", "PQL", "QL"))
    ok = len(cfg.seeds) >= 20 and f < p < q and f <= 100
    report(capsys, 1, ok, f"{len(cfg.seeds)} seeds, {medians_text(rows)}; {elapsed:.0f} s")
    assert len(cfg.seeds) >= 20
    assert f < p < q
    assert f <= 100


def test_criterion_2_lambda_ordering(lambda_comparison, capsys):
    cfg, rows, runs, elapsed = lambda_comparison
    f, p, q = (rows[k].median_convergence_episode for k in ("FPQL", "PQL", "QL"))
    # a seed succeeds when it converges, which requires F >= 0.9 on every episode of the window
    success = rows["FPQL"].success_rate
    ok = len(cfg.seeds) >= 20 and f < p < q and f <= 1000 and success >= 0.8
    report(capsys, 2, ok, f"{len(cfg.seeds)} seeds, {medians_text(rows)}; FPQL success {success:.0%}; {elapsed:.0f} s")
    assert cfg.env_config.success_fidelity == 0.9
    assert f < p < q
    assert f <= 1000
    assert success >= 0.8


def _evaluate(cfg_name, result, tmp_path, stem):
    """Write an artifact for ``result`` and run ``evaluate`` on it through the CLI."""
    cfg = parse_config(shipped_config(cfg_name))
    art = tmp_path / f"{stem}_artifact.json"
    art.write_text(json_text(artifact_dict(result.q, result.policy, "FPQL", result.config.seed, cfg.env_kind, cfg.echo)))
    code = cli_main(["evaluate", str(art), "--config", str(shipped_config(cfg_name)), "--out", str(tmp_path), "--no-plots", "--quiet"])
    assert code == 0
    lines = (tmp_path / f"{stem}_trajectory.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return header, rows


def _first_converged(runs, name="FPQL"):
    for (strategy, seed), res in sorted(runs.items()):
        if strategy == name and res.convergence_episode is not None:
            return res
    return None


def test_criterion_3_learned_sequences(spin_comparison, lambda_comparison, tmp_path, capsys):
    _, _, spin_runs, _ = spin_comparison
    _, _, lam_runs, _ = lambda_comparison
    notes, ok = [], True

    spin_res = _first_converged(spin_runs)
    if spin_res is None:
        ok = False
        notes.append("no converged spin FPQL artifact")
    else:
        header, rows = _evaluate("spin.cfg", spin_res, tmp_path, "spin")
        f_spin = float(rows[-1][header.index("fidelity")])
        ok &= f_spin >= 0.999
        notes.append(f"spin seed {spin_res.config.seed} final F {f_spin:.6f}")

    lam_res = _first_converged(lam_runs)
    lam_art = lam_res if lam_res is not None else lam_runs[("FPQL", 0)]
    if lam_res is None:
        ok = False
        notes.append("no converged Lambda FPQL artifact (population and landscape checks use seed 0)")
    header, rows = _evaluate("lambda.cfg", lam_art, tmp_path, "lambda")
    f_lam = float(rows[-1][header.index("fidelity")])
    if lam_res is not None:
        ok &= f_lam >= 0.9
    pops = np.array([[float(x) for x in r[header.index("pop_1") :]] for r in rows])
    pop_err = float(np.max(np.abs(pops.sum(axis=1) - 1.0)))
    ok &= pop_err <= 1e-9

    actions = tmp_path / "lambda_actions.txt"
    capsys.readouterr()
    assert cli_main(["landscape", str(actions), "--config", str(shipped_config("lambda.cfg"))]) == 0
    j = float(capsys.readouterr().out.splitlines()[0].split("=")[1])
    j_err = abs(j - f_lam**2)
    ok &= j_err <= 1e-9
    notes.append(f"Lambda final F {f_lam:.6f}, population-sum error {pop_err:.1e}, |J - F^2| {j_err:.1e}")
    report(capsys, 3, ok, "; ".join(notes))

    assert pop_err <= 1e-9
    assert j_err <= 1e-9
    assert spin_res is not None, "no converged spin FPQL run to evaluate"
    assert f_spin >= 0.999
    assert lam_res is not None, "no converged Lambda FPQL run to evaluate"
    assert f_lam >= 0.9


def test_criterion_4_value_iteration_oracle(capsys):
    cfg = parse_config(shipped_config("random_mdp.cfg"))
    assert str(cfg.training.schedule) == "harmonic(1.0)"
    t0 = time.perf_counter()
    errors = []
    for seed in range(10):
        env = make_random_mdp(6, 3, seed=seed)
        tcfg = replace(cfg.training, strategy=StrategyConfig("epsilon_greedy", epsilon=0.1), seed=seed)
        assert tcfg.max_total_steps == 200_000
        res = train(env, tcfg)
        assert res.cumulative_steps <= 200_000
        q_star = value_iteration(env.transitions, env.rewards, tcfg.gamma).values
        errors.append(float(np.max(np.abs(res.q.values - q_star))))
    elapsed = time.perf_counter() - t0
    good = sum(e <= 0.05 for e in errors)
    ok = good >= 9 and elapsed < 30
    report(capsys, 4, ok, f"{good}/10 seeds within 0.05 (max error {max(errors):.4f}, gamma {cfg.training.gamma}); {elapsed:.1f} s")
    assert good >= 9
    assert elapsed < 30


def test_criterion_5_invariants(capsys):
    rng = np.random.default_rng(5)
    worst = {}

    props = SpinHalfEnv().propagators + LambdaEnv().propagators
    assert len(props) == 44
    worst["unitarity"] = max(float(np.max(np.abs(u.matrix.conj().T @ u.matrix - np.eye(u.matrix.shape[0])))) for u in props)

    drift = 0.0
    for env in (SpinHalfEnv(), LambdaEnv()):
        env.reset()
        for _ in range(10_000):
            st = env.step(int(rng.integers(env.n_actions)))
            drift = max(drift, abs(float(np.linalg.norm(env.amplitudes)) - 1.0))
            if st.terminal:
                env.reset()
    worst["norm drift"] = drift

    p = PolicyTable.uniform(10, 4)
    states = rng.integers(10, size=1_000_000)
    actions = rng.integers(4, size=1_000_000)
    deltas = rng.normal(scale=200.0, size=1_000_000)
    fids = rng.random(1_000_000)
    fpql = rng.random(1_000_000) < 0.5
    simplex_err = 0.0
    for i in range(1_000_000):
        if fpql[i]:
            policy_update_fpql(p, int(states[i]), int(actions[i]), float(deltas[i]), 0.0, float(fids[i]), 0.01)
        else:
            policy_update_pql(p, int(states[i]), int(actions[i]), float(deltas[i]), 0.0, 0.01)
        if i % 1000 == 999:
            simplex_err = max(simplex_err, float(np.max(np.abs(p.probs.sum(axis=1) - 1.0))))
            assert np.all(p.probs >= p.p_min * (1 - 1e-12)) and np.all(p.probs <= 1.0)
    worst["simplex"] = simplex_err

    fid_err = 0.0
    for _ in range(1000):
        dim = int(rng.integers(2, 5))
        a, b = random_state(rng, dim), random_state(rng, dim)
        u = random_unitary(rng, dim)
        fid_err = max(fid_err, abs(fidelity(a, b) - fidelity(b, a)), abs(fidelity(u @ a, u @ b) - fidelity(a, b)))
    worst["fidelity"] = fid_err

    entropy_ok = True
    for m in range(1, 9):
        entropy_ok &= row_entropy(np.full(m, 1.0 / m)) == pytest.approx(math.log2(m), abs=1e-15)
        entropy_ok &= row_entropy(np.eye(m)[0]) == 0.0
        for _ in range(100):
            row = rng.dirichlet(np.ones(m) * 0.5)
            h = row_entropy(row)
            entropy_ok &= 0.0 <= h <= math.log2(m) + 1e-12

    ok = (
        worst["unitarity"] <= 1e-10
        and worst["norm drift"] < 1e-8
        and worst["simplex"] <= 1e-9
        and worst["fidelity"] <= 1e-10
        and entropy_ok
    )
    report(capsys, 5, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", entropy bounds {'ok' if entropy_ok else 'violated'}")
    assert worst["unitarity"] <= 1e-10
    assert worst["norm drift"] < 1e-8
    assert worst["simplex"] <= 1e-9
    assert worst["fidelity"] <= 1e-10
    assert entropy_ok


def test_criterion_6_sampler_statistics(capsys):
    n = 100_000
    q = QTable(np.array([[0.0, 1.0, 0.5], [1.0, 0.0, -1.0]]))
    eps = 0.1
    cases = {
        "probabilistic": (
            lambda r, p=PolicyTable(np.array([[0.5, 0.3, 0.2]])): probabilistic_select(p, 0, r),
            np.array([0.5, 0.3, 0.2]),
        ),
        "epsilon_greedy": (
            lambda r: epsilon_greedy_select(q, 0, eps, r),
            np.array([eps / 3, 1 - eps + eps / 3, eps / 3]),
        ),
        "softmax": (lambda r: softmax_select(q, 1, 1.0, r), softmax_probs(q.values[1], 1.0)),
    }
    pvals = {}
    for i, (name, (select, nominal)) in enumerate(cases.items()):
        rng = UniformStream(100 + i)
        counts = np.bincount([select(rng) for _ in range(n)], minlength=3)
        pvals[name] = float(chisquare(counts, n * nominal).pvalue)
    ok = all(p > 0.01 for p in pvals.values())
    report(capsys, 6, ok, ", ".join(f"{k} p={v:.3f}" for k, v in pvals.items()))
    for name, p in pvals.items():
        assert p > 0.01, name


def test_criterion_7_re_exploration(spin_comparison, capsys):
    cfg, _, runs, _ = spin_comparison
    seeds = sorted(cfg.seeds)[:10]
    window = cfg.training.convergence_window
    tol = cfg.training.convergence_tolerance
    new_target = (math.pi / 2, math.pi)
    outcomes = []
    for seed in seeds:
        c = runs[("FPQL", seed)].convergence_episode
        if c is None:
            outcomes.append((seed, False, "never converged"))
            continue
        swap = c + window  # first episode at which convergence is observable
        tcfg = replace(cfg.train_config("FPQL", seed), max_episodes=swap + 3 * max(c, 1) + window)
        res = train(cfg.make_env(), tcfg, TargetChange(swap, new_target))
        before = res.records[swap - 1].mean_entropy
        rises = max(r.mean_entropy for r in res.records[swap : swap + 50]) > before
        again = convergence_episode(res.records, window, tol, "steps", start=swap)
        relearned = again is not None and again - swap <= 3 * c
        outcomes.append((seed, rises and relearned, f"entropy rise {rises}, re-convergence {again}"))
    passed = sum(ok for _, ok, _ in outcomes)
    ok = passed >= 7
    failures = "; ".join(f"seed {s}: {why}" for s, good, why in outcomes if not good)
    report(capsys, 7, ok, f"{passed}/10 seeds re-converged" + (f" ({failures})" if failures else ""))
    assert passed >= 7


def test_criterion_8_determinism(tmp_path, capsys):
    cfg_path = shipped_config("spin.cfg")
    argv = ["--config", str(cfg_path), "--no-plots", "--quiet", "--training.max_episodes=15"]
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert cli_main(["run", *argv, "--out", str(out / "run")]) == 0
        assert cli_main(["compare", *argv, "--out", str(out / "compare"), "--seeds.values=0..2"]) == 0
        outs.append(out)
    files = sorted(str(p.relative_to(outs[0])) for p in outs[0].rglob("*.csv"))
    same = [n for n in files if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    ok = len(files) > 1 and same == files
    report(capsys, 8, ok, f"{len(same)}/{len(files)} CSV files byte-identical across two invocations")
    assert len(files) == 1 + 3 * 3 + 1
    assert same == files
