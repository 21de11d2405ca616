"""Command-line front end: ``mmgdispatch <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error (scenario or
checkpoint), 4 training divergence or every tuning trial failing.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import plotting
from .autotune import (AllTrialsFailed, default_space, run_trials, write_trial_json,
                       write_trials_csv)
from .domain import (PARAM_PRESETS, Scenario, ScenarioError, bundled_scenario_path,
                     generate_synthetic, load_scenario, preset_params, write_scenario)
from .env import Observation, write_trace
from .masac import (SacHyperparams, TrainingDiverged, convergence_episode, evaluate,
                    load_agents, moving_mean, save_agents, train, write_reward_csv)
from .neural import load_checkpoint
from .tasks import MicrogridTask

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DEFAULT_REWARD_SCALE = 1e-3


class ConfigError(ValueError):
    pass


# --- helpers ------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else load_scenario(bundled_scenario_path())
    if getattr(args, "params", None):
        sc = sc.with_params(preset_params(args.params, sc.n_mg))
    return sc


def _trading(mode: str) -> bool:
    return mode == "coupled"


def resolve_hyperparams(args) -> SacHyperparams:
    """Defaults, then an optional JSON file, then individual flags."""
    values = {}
    if getattr(args, "hp_file", None):
        try:
            data = json.loads(Path(args.hp_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read hyperparameter file {args.hp_file}: {exc}") from exc
        values.update(data.get("hyperparams", data))
    for name in ("gamma", "a_l", "c_l", "batch_n", "kappa", "phi_soft", "buffer_capacity"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    space = default_space()
    for d in space.dims:
        if d.name in values:
            v = values[d.name]
            lo, hi = (min(d.choices), max(d.choices)) if d.choices else (d.lo, d.hi)
            if not lo <= v <= hi:
                raise ConfigError(f"{d.name}={v} outside the search range [{lo}, {hi}]")
    if getattr(args, "hidden", None):
        values["hidden"] = tuple(args.hidden)
    if getattr(args, "episodes", None) is not None:
        values["episodes"] = args.episodes
    known = set(SacHyperparams.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
    try:
        return SacHyperparams.from_dict({**SacHyperparams().to_dict(), **values})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cost_summary(ev, scenario: Scenario) -> dict:
    per_mg = []
    keys = ("mgts_cost", "mg_trade_cost", "grid_trade_cost", "esd_om_cost", "loss_cost",
            "imbalance_penalty", "total_cost")
    for m in range(1, scenario.n_mg + 1):
        rows = [r for r in ev.trace if r["mg"] == m]
        per_mg.append({"mg": m, **{k: float(sum(r[k] for r in rows)) for k in keys}})
    return {"total_cost": ev.total_cost, "objective": ev.objective, "per_mg": per_mg,
            "abs_gap_kw": float(sum(abs(r["p_gap"]) for r in ev.trace))}


def _train_and_report(scenario: Scenario, hp: SacHyperparams, seed: int, trading: bool,
                      reward_scale: float, out: Path, trace_every: int = 0, quiet=False) -> dict:
    task = MicrogridTask(scenario, trading=trading, reward_scale=reward_scale)
    mode = "coupled" if trading else "isolated"
    tdir = _out_dir(out / "traces") if trace_every else None

    def hook(ep, nets):
        if tdir is not None and ep % trace_every == 0:
            ev = evaluate(nets, scenario, trading=trading)
            write_trace(ev.trace, tdir / f"episode_{ep:05d}.csv")

    def progress(ep, total):
        if not quiet and (ep % 50 == 0 or ep == hp.episodes):
            print(f"[{mode}] episode {ep}/{hp.episodes} reward {total:.1f}", file=sys.stderr)

    rep = train(task, hp, seed, progress=progress, on_episode=hook)
    write_reward_csv(rep, out / "rewards.csv")
    save_agents(rep.nets, out / "checkpoints",
                {"mode": mode, "seed": seed, "reward_scale": reward_scale})
    ev = evaluate(rep.nets, scenario, trading=trading)
    write_trace(ev.trace, out / "trace.csv")
    totals = rep.total_rewards
    conv = convergence_episode(totals, window=50, tol=0.01)
    mm = moving_mean(totals, 50)
    summary = {
        "mode": mode, "seed": seed, "episodes": hp.episodes,
        "total_cost": ev.total_cost,
        "convergence_episode": conv,
        "convergence_time_s": float(rep.wall_times[conv - 1]),
        "wall_time_s": rep.wall_time,
        "final_moving_mean_reward": float(mm[-1]),
        "reward_scale": reward_scale,
        "hyperparams": hp.to_dict(),
        "cost": cost_summary(ev, scenario),
    }
    _write_json(out / "summary.json", summary)
    plotting.reward_curve(totals, out / "reward_curve.png", moving=mm)
    plotting.electrical_balance(ev.trace, out / "balance.png")
    plotting.trades(ev.trace, out / "trades.png")
    plotting.storage(ev.trace, out / "storage.png")
    return summary


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    params = preset_params(args.params or "table1", args.n_mg)
    sc = generate_synthetic(args.seed, args.n_mg, args.horizon, params=params)
    write_scenario(sc, _out_dir(args.out))
    print(f"wrote {args.n_mg}-microgrid scenario ({args.horizon} steps) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    hp = resolve_hyperparams(args)
    sc = _scenario(args)
    out = _out_dir(args.out)
    s = _train_and_report(sc, hp, args.seed, _trading(args.mode), args.reward_scale, out,
                          trace_every=args.trace_every)
    print(f"{'Number of episodes to converge':<32}{'Convergence time (s)':>22}")
    print(f"{s['convergence_episode']:<32d}{s['convergence_time_s']:>22.2f}")
    print(f"evaluated total cost: {s['total_cost']:.2f}  (wall time {s['wall_time_s']:.1f} s)")
    return EXIT_OK


def _check_compatible(nets, scenario: Scenario, ckpt: Path):
    n = scenario.n_mg
    if len(nets) != n:
        raise ScenarioError(f"checkpoint has {len(nets)} agents, scenario has {n} microgrids",
                            file=str(ckpt))
    for n_ in nets:
        if n_.actor.layer_sizes[0] != Observation.SIZE or n_.actor.layer_sizes[-1] != 2 * (n + 1):
            raise ScenarioError("actor shape does not match the scenario", file=str(ckpt))


def cmd_eval(args) -> int:
    sc = _scenario(args)
    ckpt = Path(args.checkpoints)
    try:
        nets = load_agents(ckpt)
        _, _, meta = load_checkpoint(ckpt / "agent1_actor.npz")
    except (FileNotFoundError, ValueError, KeyError, OSError) as exc:
        raise ScenarioError(f"cannot load checkpoint: {exc}", file=str(ckpt)) from exc
    _check_compatible(nets, sc, ckpt)
    mode = args.mode or meta.get("mode", "coupled")
    out = _out_dir(args.out)
    ev = evaluate(nets, sc, trading=_trading(mode))
    write_trace(ev.trace, out / "trace.csv")
    summary = dict(cost_summary(ev, sc), mode=mode, checkpoints=str(ckpt))
    _write_json(out / "costs.json", summary)
    plotting.electrical_balance(ev.trace, out / "balance.png")
    plotting.trades(ev.trace, out / "trades.png")
    plotting.storage(ev.trace, out / "storage.png")
    print(f"{mode} evaluated total cost: {ev.total_cost:.2f}")
    return EXIT_OK


COMPARE_HEADER = ("model", "trading", "total_cost", "convergence_episode", "wall_time_s")


def cmd_compare_modes(args) -> int:
    hp = resolve_hyperparams(args)
    sc = _scenario(args)
    out = _out_dir(args.out)
    res = {}
    for label, mode in (("Model 1", "isolated"), ("Model 2", "coupled")):
        res[label] = _train_and_report(sc, hp, args.seed, _trading(mode), args.reward_scale,
                                       _out_dir(out / mode))
    c1, c2 = res["Model 1"]["total_cost"], res["Model 2"]["total_cost"]
    reduction = 100.0 * (c1 - c2) / abs(c1) if c1 else 0.0
    lines = [",".join(COMPARE_HEADER)]
    for label, s in res.items():
        lines.append(",".join([label, str(s["mode"] == "coupled").lower(), repr(s["total_cost"]),
                               str(s["convergence_episode"]), repr(s["wall_time_s"])]))
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "compare.json", {"model_1_cost": c1, "model_2_cost": c2,
                                       "reduction_pct": reduction, "seed": args.seed,
                                       "episodes": hp.episodes})
    plotting.mode_costs({"Model 1": c1, "Model 2": c2}, out / "compare.png")
    print(f"{'':<10}{'Total cost ($)':>16}")
    print(f"{'Model 1':<10}{c1:>16.2f}")
    print(f"{'Model 2':<10}{c2:>16.2f}")
    print(f"Model 2 reduces cost by {reduction:.2f}%")
    return EXIT_OK


def read_compare_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if tuple(lines[0].split(",")) != COMPARE_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        m, tr, cost, conv, wall = line.split(",")
        out.append({"model": m, "trading": tr == "true", "total_cost": float(cost),
                    "convergence_episode": int(conv), "wall_time_s": float(wall)})
    return out


class TrainObjective:
    """Tuning objective: negative evaluated cost of the trained deterministic policy."""

    def __init__(self, scenario: Scenario, trading: bool, reward_scale: float):
        self.scenario = scenario
        self.trading = trading
        self.reward_scale = reward_scale

    def __call__(self, hp: SacHyperparams, seed: int) -> float:
        task = MicrogridTask(self.scenario, trading=self.trading, reward_scale=self.reward_scale)
        rep = train(task, hp, seed)
        return -evaluate(rep.nets, self.scenario, trading=self.trading).total_cost


def cmd_tune(args) -> int:
    base = resolve_hyperparams(args)
    sc = _scenario(args)
    out = _out_dir(args.out)
    tdir = _out_dir(out / "trials")
    space = default_space()
    objective = TrainObjective(sc, _trading(args.mode), args.reward_scale)

    def on_trial(r):
        write_trial_json(r, tdir)
        shown = "failed" if r.objective is None else f"{r.objective:.2f}"
        print(f"trial {r.trial_id}: {shown}", file=sys.stderr)

    res = run_trials(space, args.trials, objective, seed=args.seed, base_hp=base,
                     bootstrap=args.bootstrap, jobs=args.jobs, on_trial=on_trial)
    write_trials_csv(res.records, out / "trials.csv")
    best_hp = replace(base, **res.best.hyperparams)
    _write_json(out / "best_hyperparams.json", {
        "hyperparams": best_hp.to_dict(), "objective": res.best.objective,
        "trial_id": res.best.trial_id, "mode": args.mode, "seed": args.seed,
        "bootstrap_combinations": str(res.bootstrap_combinations)})
    plotting.tuning_progress([r.objective for r in res.records], res.best_so_far(),
                             out / "tuning.png")
    print(f"{'Hyperparameter':<16}{'Value':>12}")
    for k in space.names:
        print(f"{k:<16}{res.best.hyperparams[k]:>12.6g}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmgdispatch", description="Multi-microgrid dispatch with MASAC.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, training=True):
        sp.add_argument("--scenario", help="scenario directory or scenario.json (default: bundled)")
        sp.add_argument("--params", choices=sorted(PARAM_PRESETS),
                        help="replace the scenario's microgrid parameters with a preset")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)
        if training:
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--reward-scale", type=float, default=DEFAULT_REWARD_SCALE)
            sp.add_argument("--hp-file", help="JSON with hyperparameters (e.g. best_hyperparams.json)")
            for name, typ in (("gamma", float), ("a_l", float), ("c_l", float),
                              ("batch_n", int), ("kappa", float), ("phi_soft", float),
                              ("buffer_capacity", int)):
                sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
            sp.add_argument("--hidden", type=int, nargs="+")

    g = sub.add_parser("gen-data", help="write a synthetic scenario bundle")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n-mg", type=int, default=2)
    g.add_argument("--horizon", type=int, default=24)
    g.add_argument("--params", choices=sorted(PARAM_PRESETS))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train MASAC agents")
    common(t)
    t.add_argument("--mode", choices=("coupled", "isolated"), default="coupled")
    t.add_argument("--trace-every", type=int, default=0,
                   help="write an evaluation trace every K episodes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out trained actors")
    common(e, training=False)
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--mode", choices=("coupled", "isolated"))
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare-modes", help="train and evaluate with and without trading")
    common(c)
    c.set_defaults(func=cmd_compare_modes)

    u = sub.add_parser("tune", help="hyperparameter search")
    common(u)
    u.add_argument("--mode", choices=("coupled", "isolated"), default="coupled")
    u.add_argument("--trials", type=int, default=30)
    u.add_argument("--bootstrap", type=int, default=8)
    u.add_argument("--jobs", type=int, default=1)
    u.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "episodes", None) is not None and args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        if getattr(args, "trials", 1) < 1 or getattr(args, "jobs", 1) < 1:
            raise ConfigError("--trials and --jobs must be >= 1")
        if getattr(args, "reward_scale", 1.0) <= 0:
            raise ConfigError("--reward-scale must be positive")
        if getattr(args, "trace_every", 0) < 0:
            raise ConfigError("--trace-every must be >= 0")
        return args.func(args)
    except ConfigError as exc:
        print(f"mmgdispatch: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"mmgdispatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, AllTrialsFailed) as exc:
        print(f"mmgdispatch: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
