"""Command line entry point: ``mfgflock run | export | eval``.

Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import fp
from . import scenario as scn
from .env import sample_states, step_batch, write_trajectory_csv
from .metrics import PerformanceMatrix, evaluate_entry, smooth

CONFIG_NAME = "config.yaml"


def run_scenario(path, out_dir, seed=None, resume=False, overrides=None, echo=print):
    """Load a scenario, run fictitious play into ``out_dir`` and return the state."""
    sc = scn.load(path)
    if overrides:
        data = scn.to_dict(sc)
        for dotted, value in overrides.items():
            node = data
            *head, last = dotted.split(".")
            for key in head:
                node = node.setdefault(key, {})
            node[last] = value
        sc = scn.from_dict(data)
    if seed is not None:
        sc.config.seed = int(seed)
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, CONFIG_NAME)
    if resume and os.path.exists(cfg_path):
        sc = scn.load(cfg_path)
    else:
        scn.save(sc, cfg_path)

    def report(j, state, e_j):
        echo(f"iteration {j}/{sc.config.J}" + ("" if e_j is None else f"  e_j={e_j:.4f}"))

    return fp.run(sc.config, out_dir, resume=resume, on_iteration=report)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing run artifact: {path}")
    return path


def load_run(run_dir):
    """``(scenario, state)`` for a run directory."""
    sc = scn.load(_require(os.path.join(run_dir, CONFIG_NAME)))
    _require(os.path.join(run_dir, "state.json"))
    state = fp.load_state(run_dir, sc.config)
    if state.j < 1:
        raise RuntimeError(f"{run_dir} has no completed iteration")
    return sc, state


def rollout_frames(policy, sampler, env_cfg, n_agents, T, rng, mode="MEAN"):
    """Simulate ``n_agents`` independent agents; returns frames ``t = 0..T-1`` and the hit count."""
    x, v = sample_states(sampler, n_agents, env_cfg, rng)
    xs, vs, hits = [x], [v], 0
    for _ in range(T - 1):
        s = np.hstack([x, v])
        u = policy.act(s, rng, mode)[0] if hasattr(policy, "act") else policy(s)
        noise = (env_cfg.sigma_noise * rng.standard_normal(x.shape) if env_cfg.sigma_noise > 0
                 else np.zeros_like(x))
        x, v, hit, _ = step_batch(x, v, u, noise, env_cfg)
        hits += int(hit.sum())
        xs.append(x)
        vs.append(v)
    return xs, vs, hits


def export_trajectories(run_dir, n_agents, T, out=None, policy=None):
    """Roll out ``pi_J`` (mean action) from the last mean distribution and write a CSV.

    Returns ``(csv_path, hit_fraction)``; the hit fraction is the share of
    agent-steps with an obstacle contact and is also stored in
    ``export_summary.json``.
    """
    if n_agents < 1 or T < 1:
        raise ValueError("agents and steps must be >= 1")
    sc, state = load_run(run_dir)
    cfg = sc.config
    policy = state.policies[-1] if policy is None else policy
    rng = fp.stream(cfg.seed, "export", n_agents, T)
    xs, vs, hits = rollout_frames(policy, state.mean_flow, cfg.env, n_agents, T, rng)
    out = os.path.join(run_dir, "trajectories.csv") if out is None else out
    write_trajectory_csv(out, xs, vs)
    frac = hits / (n_agents * max(T - 1, 1))
    with open(os.path.join(os.path.dirname(os.path.abspath(out)), "export_summary.json"), "w") as fh:
        json.dump({"agents": n_agents, "steps": T, "hit_fraction": frac}, fh, indent=1)
    return out, frac


def _write_quiver(path, x, v):
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)])
        for xa, va in zip(x, v):
            w.writerow([repr(float(c)) for c in xa] + [repr(float(c)) for c in va])


def eval_run(run_dir, n_agents=500):
    """Complete the performance matrix and write plot data into ``run_dir/eval``.

    Entries already computed during the run are reproduced exactly because
    each entry uses its own seed stream.
    """
    sc, state = load_run(run_dir)
    cfg = sc.config
    J = state.j
    pm = PerformanceMatrix.empty(J, n_eval=cfg.n_eval, gamma=cfg.gamma, horizon=cfg.env.horizon)
    for i in range(1, J + 1):
        sampler = fp._EnvSampler(fp.distribution_before(state, cfg, i), cfg.env)
        pop = state.pop_samples[i - 1]
        for k in range(1, J + 1):
            if k <= i and np.isfinite(state.matrix.get(i, k)):
                pm.set(i, k, state.matrix.get(i, k))
            else:
                pm.set(i, k, evaluate_entry(state.policies[k - 1], sampler, pop, cfg.env, cfg.n_eval, cfg.gamma,
                                            fp.stream(cfg.seed, i, k, "eval")))
    out = os.path.join(run_dir, "eval")
    os.makedirs(out, exist_ok=True)
    pm.to_grid_csv(os.path.join(out, "matrix.csv"))
    pm.to_csv(os.path.join(out, "metrics.csv"))
    # exploitability only uses the lower triangle, so it matches the run-level file
    smooth(pm).to_csv(os.path.join(out, "exploitability.csv"))

    rng = fp.stream(cfg.seed, "quiver")
    x0, v0 = sample_states(cfg.mu0, n_agents, cfg.env, rng)
    _write_quiver(os.path.join(out, "quiver_initial.csv"), x0, v0)
    xs, vs, _ = rollout_frames(state.policies[-1], state.mean_flow, cfg.env, n_agents, cfg.env.horizon, rng)
    _write_quiver(os.path.join(out, "quiver_final.csv"), xs[-1], vs[-1])
    return pm


def _parse_override(text):
    key, sep, val = text.partition("=")
    if not sep:
        raise scn.ConfigError(f"override {text!r} must look like section.key=value")
    return key, yaml.safe_load(val)


def build_parser():
    p = argparse.ArgumentParser(prog="mfgflock", description="Flocking mean-field game solver")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run fictitious play on a scenario file or bundled scenario name")
    r.add_argument("scenario")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--resume", action="store_true")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. fp.J=2 (repeatable)")

    e = sub.add_parser("export", help="write trajectories.csv from a finished run")
    e.add_argument("run_dir")
    e.add_argument("--agents", type=int, default=100)
    e.add_argument("--steps", type=int, default=200)
    e.add_argument("--output")

    v = sub.add_parser("eval", help="complete the performance matrix and write plot data")
    v.add_argument("run_dir")

    sub.add_parser("scenarios", help="list bundled scenarios")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.cmd == "run":
            overrides = dict(_parse_override(s) for s in args.set)
            run_scenario(args.scenario, args.out, seed=args.seed, resume=args.resume, overrides=overrides)
        elif args.cmd == "export":
            path, frac = export_trajectories(args.run_dir, args.agents, args.steps, out=args.output)
            print(f"wrote {path} (obstacle hit fraction {frac:.4f})")
        elif args.cmd == "eval":
            pm = eval_run(args.run_dir)
            print(f"wrote {os.path.join(args.run_dir, 'eval')} ({pm.J}x{pm.J} matrix)")
        elif args.cmd == "scenarios":
            print("\n".join(scn.bundled_names()))
    except scn.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
