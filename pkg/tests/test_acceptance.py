"""Acceptance gate: each test checks one criterion at its stated tolerance and
records a PASS/FAIL line that is printed in the pytest summary.

The behavioural checks (consensus, two lines, obstacles) run the bundled
scenarios at their shipped budgets and take a few hours in total on one core.
"""
import filecmp
import time

import numpy as np
import pytest

from conftest import numerical_jacobian, random_flow
from mfgflock import cli, fp, scenario
from mfgflock.approx import Mlp, backward
from mfgflock.flows import FlowConfig, fit
from mfgflock.metrics import exploitability, fraction_near_lines, mean_pairwise_cosine, nearest_corner, smooth
from mfgflock.sac import SacConfig, train
from pointmass import PointMass, constant_control_oracle, policy_return

CONSENSUS_SEEDS = (0, 1, 2, 3, 4)
EXPORT_AGENTS, EXPORT_STEPS = 100, 200


def read_traj(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)


def last_frame(rows):
    return rows[rows[:, 1] == rows[:, 1].max()]


def test_gradient_oracle(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n_in, hidden, n_out = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 4)
        net = Mlp([n_in, hidden, n_out], activation=rng.choice(["tanh", "relu"]), rng=rng)
        assert net.params.size <= 64
        net.params += 0.3 * rng.normal(size=net.params.size)
        x = rng.normal(size=(4, n_in))
        g = rng.normal(size=(4, n_out))
        analytic, _ = backward(net, x, g)
        fd = np.empty_like(analytic)
        for i in range(net.params.size):
            old = net.params[i]
            net.params[i] = old + 1e-5
            up = np.sum(net.forward(x) * g)
            net.params[i] = old - 1e-5
            down = np.sum(net.forward(x) * g)
            net.params[i] = old
            fd[i] = (up - down) / 2e-5
        err = np.max(np.abs(analytic - fd)) / max(1e-8, np.max(np.abs(analytic)), np.max(np.abs(fd)))
        worst = max(worst, err)
    dt = time.time() - t0
    ok = criterion("gradient oracle", worst < 1e-4 and dt < 10, f"max rel err {worst:.2e} over 50 MLPs, {dt:.1f}s")
    assert ok


def test_flow_exactness(criterion):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst_rt, worst_ld = 0.0, 0.0
    for n in range(1000):
        D = (2, 4, 6)[n % 3]
        model = random_flow(D, rng)
        x = model.mean + model.scale * rng.normal(size=(1, D))
        z, logdet = model.to_base(x)
        worst_rt = max(worst_rt, float(np.max(np.abs(model.from_base(z) - x))))
        if D <= 4:
            J = numerical_jacobian(lambda p: model.to_base(p[None])[0][0], x[0])
            num = np.linalg.slogdet(J)[1]
            worst_ld = max(worst_ld, abs(logdet[0] - num) / max(abs(num), 1.0))
    dt = time.time() - t0
    ok = criterion("flow exactness", worst_rt < 1e-8 and worst_ld < 1e-4 and dt < 60,
                   f"round trip {worst_rt:.1e}, logdet rel err {worst_ld:.1e} (D<=4), {dt:.1f}s")
    assert ok


def test_density_fit(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2)
    train_x = rng.normal(3.0, 0.5, size=(5000, 1))
    held = rng.normal(3.0, 0.5, size=(5000, 1))
    model, _ = fit(train_x, FlowConfig(), rng)
    ll = float(model.log_prob(held).mean())
    optimum = -0.5 * np.log(2 * np.pi * np.e * 0.25)
    dt = time.time() - t0
    ok = criterion("density fitting", abs(ll - optimum) < 0.1 and dt < 120,
                   f"held-out LL {ll:.4f} vs optimum {optimum:.4f}, {dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_sac_point_mass(criterion):
    t0 = time.time()
    env = PointMass()
    oracle, u_star = constant_control_oracle(env)
    agent, _ = train(env, SacConfig(total_steps=30_000, reward_scale=0.1), np.random.default_rng(0))
    ret = policy_return(agent.policy, PointMass())
    # returns are negative: 90% of the oracle means a return no worse than 0.9 * oracle
    dt = time.time() - t0
    ok = criterion("SAC sanity", ret >= 0.9 * oracle and dt < 600,
                   f"return {ret:.1f} vs 0.9 * oracle {0.9 * oracle:.1f} (u*={u_star:.2f}), 30000 steps, {dt:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def consensus_runs(tmp_path_factory):
    out = {}
    for seed in CONSENSUS_SEEDS:
        run_dir = str(tmp_path_factory.mktemp(f"consensus_{seed}"))
        state = cli.run_scenario("simple-4d", run_dir, seed=seed, echo=lambda s: None)
        path, _ = cli.export_trajectories(run_dir, EXPORT_AGENTS, EXPORT_STEPS)
        v = last_frame(read_traj(path))[:, 5:7]
        out[seed] = (v, smooth(state.matrix).smoothed)
    return out


@pytest.mark.slow
def test_consensus(consensus_runs, criterion):
    passed, details = 0, []
    for seed, (v, _) in consensus_runs.items():
        cos = mean_pairwise_cosine(v)
        corner, dist = nearest_corner(v.mean(axis=0))
        good = cos >= 0.95 and dist <= 0.15
        passed += good
        details.append(f"seed {seed}: cos {cos:.3f}, corner {corner.astype(int).tolist()} at {dist:.3f}")
    ok = criterion("consensus (simple-4d)", passed >= 3, f"{passed}/5 seeds pass; " + "; ".join(details))
    assert ok


@pytest.mark.slow
def test_exploitability_trend(consensus_runs, criterion):
    details, ok = [], True
    for seed, (_, e) in consensus_runs.items():
        first, last = float(np.mean(e[:5])), float(np.mean(e[-5:]))
        ok &= last < first
        details.append(f"seed {seed}: {first:.2f} -> {last:.2f}")
    ok = criterion("exploitability trend", ok, "; ".join(details))
    assert ok


@pytest.mark.slow
def test_two_lines(tmp_path, criterion):
    run_dir = str(tmp_path)
    cli.run_scenario("two-lines-4d", run_dir, echo=lambda s: None)
    path, _ = cli.export_trajectories(run_dir, EXPORT_AGENTS, EXPORT_STEPS)
    frac = fraction_near_lines(last_frame(read_traj(path))[:, 4], lines=(-50.0, 50.0), tol=10.0,
                               bounds=(-100.0, 100.0))
    ok = criterion("two-lines structure", frac >= 0.8, f"{100 * frac:.0f}% of agents within 10 of x2 = +-50")
    assert ok


@pytest.mark.slow
def test_obstacle_avoidance(tmp_path, criterion):
    run_dir = str(tmp_path)
    cli.run_scenario("many-obstacles-6d", run_dir, echo=lambda s: None)
    _, trained = cli.export_trajectories(run_dir, EXPORT_AGENTS, EXPORT_STEPS)
    # baseline: uniform random accelerations from the same start states and noise
    sc, _ = cli.load_run(run_dir)
    act_rng = fp.stream(sc.config.seed, "baseline")
    d = sc.config.env.d
    _, random = cli.export_trajectories(run_dir, EXPORT_AGENTS, EXPORT_STEPS, out=str(tmp_path / "random.csv"),
                                        policy=lambda s: act_rng.uniform(-1.0, 1.0, (len(s), d)))
    ok = criterion("obstacle avoidance (many-obstacles-6d)", trained < 0.05 and random > 0.2,
                   f"hit fraction trained {trained:.4f} vs random {random:.4f}")
    assert ok


def test_metrics_arithmetic(criterion):
    nan = np.nan
    M = np.array([[1.0, nan, nan], [3.0, 5.0, nan], [1.0, 3.0, 4.0]])
    e = [exploitability(M, 2), exploitability(M, 3)]
    s_row, s_diag = smooth(M), smooth(M, best_of="diagonal")
    ok = (e == [2.0, 2.0] and s_row.smoothed.tolist() == [2.0, 2.0] and s_diag.smoothed.tolist() == [2.0, 2.5])
    ok = criterion("metrics arithmetic", ok, f"e = {e}, smoothed row {s_row.smoothed.tolist()}, "
                   f"diagonal {s_diag.smoothed.tolist()}")
    assert ok


TINY = {"fp": {"J": 2, "pop_size": 20, "n_station_samples": 400, "station_horizon": 20, "n_eval": 5,
               "mean_samples": 400},
        "sac": {"total_steps": 300, "warmup_steps": 100, "batch_size": 32, "hidden": [16]},
        "flow": {"n_layers": 2, "n_steps": 40, "batch_size": 64}}


def test_determinism(tmp_path, criterion):
    bad = []
    names = scenario.bundled_names()
    for name in names:
        dirs = []
        for rep in ("a", "b"):
            data = scenario.to_dict(scenario.load(name))
            for section, vals in TINY.items():
                data[section].update(vals)
            data["env"]["horizon"] = 30
            path = tmp_path / f"{name}.yaml"
            scenario.save(scenario.from_dict(data), path)
            run_dir = tmp_path / f"{name}_{rep}"
            cli.run_scenario(str(path), str(run_dir), echo=lambda s: None)
            cli.export_trajectories(str(run_dir), 20, 30)
            dirs.append(run_dir)
        for f in ("metrics.csv", "exploitability.csv", "trajectories.csv"):
            if not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False):
                bad.append(f"{name}/{f}")
    ok = criterion("determinism", not bad, f"{len(names)} bundled scenarios, mismatches: {bad or 'none'}")
    assert ok
