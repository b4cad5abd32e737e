"""Command line entry point: ``safemarl {train,eval,verify,plot,solve-lqclp}``.

Outputs go under ``--out``; when it is omitted, under ``$SAFEMARL_OUT``
(default ``./runs``). Exit codes: 0 success, 1 failed properties or an
aborted run, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import TrainingConfig
from .errors import ConfigError, RecoveryRequired, SafeMarlError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _out_root(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SAFEMARL_OUT", "runs")) / default_name


def _load_config(args) -> TrainingConfig:
    if getattr(args, "manifest", None):
        from .trainers import RunManifest

        doc = json.loads(Path(args.manifest).read_text())
        cfg = RunManifest.from_dict(doc).config
    elif args.config:
        cfg = TrainingConfig.loads(Path(args.config).read_text())
    else:
        raise ConfigError(["config: pass --config or --manifest"])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.with_(iterations=args.iterations)
    return cfg


def _train_one(config_doc: dict, out: str) -> dict:
    from .trainers import run_training

    cfg = TrainingConfig.from_dict(config_doc)
    _, log, status = run_training(cfg, out)
    last = log.rows[-1] if log.rows else {}
    return {"out": out, "seed": cfg.seed, "iterations": status["iterations"], "aborted": status["aborted"],
            "eval_reward": last.get("eval_reward", "")}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, f"{cfg.algorithm}_{cfg.env_id}")
    seeds = args.seeds if args.seeds else [cfg.seed]
    jobs = []
    for s in seeds:
        c = cfg.with_(seed=s)
        out = root if len(seeds) == 1 else root / f"seed_{s}"
        jobs.append((c.to_dict(), str(out)))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(doc, out) for doc, out in jobs]
    for r in results:
        print(json.dumps(r))
    return EXIT_FAIL if any(r["aborted"] for r in results) else EXIT_OK


def cmd_eval(args) -> int:
    from .policy_nn import Checkpoint
    from .trainers import Trainer

    cfg = _load_config(args)
    if args.episodes is not None:
        cfg = cfg.with_(eval_episodes=args.episodes)
    tr = Trainer(cfg)
    if args.checkpoint:
        tr.load_checkpoint(Checkpoint.loads(Path(args.checkpoint).read_text()))
    res = tr.evaluate()
    doc = {"episodes": len(res.episode_rewards), "reward": res.reward, "costs": res.costs.tolist(),
           "discounted_costs": res.discounted_costs.tolist()}
    print(json.dumps(doc))
    return EXIT_OK


def _parse_counts(items) -> dict:
    counts = {}
    for item in items or []:
        name, _, value = item.partition("=")
        if not value:
            raise ConfigError([f"count: expected suite=N, got {item!r}"])
        counts[name] = int(value)
    return counts


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError([f"suite: unknown {u!r}" for u in unknown])
    report = run_suites(names, args.seed, _parse_counts(args.count), args.inject_fault)
    out = _out_root(args, "verify")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    for name, rep in report["suites"].items():
        if rep["counterexample"] is not None:
            (out / f"counterexample_{name}.json").write_text(json.dumps(rep["counterexample"], indent=2))
    summary = {name: {"passed": r["passed"], "failed": r["failed"], "worst": r["worst"]}
               for name, r in report["suites"].items()}
    print(json.dumps({"ok": report["ok"], "suites": summary, "report": str(out / "report.json")}, indent=2))
    return EXIT_OK if report["ok"] else EXIT_FAIL


def cmd_plot(args) -> int:
    from .plotting import plot_runs

    info = plot_runs(args.logs, _out_root(args, "plots"), args.bound, args.metric)
    print(json.dumps(info))
    return EXIT_OK


def cmd_solve_lqclp(args) -> int:
    from .trust_region import primal_step, solve_lqclp_multi, solve_lqclp_single

    text = Path(args.problem).read_text() if args.problem and args.problem != "-" else sys.stdin.read()
    doc = json.loads(text)
    delta = float(doc["delta"])
    if "H" in doc:
        H = np.array(doc["H"], dtype=float)
        g = np.array(doc["g"], dtype=float)
        B = np.array(doc["b"], dtype=float).reshape(len(g), -1)
        hinv_g, hinv_B = np.linalg.solve(H, g), np.linalg.solve(H, B)
        q, r, S = float(g @ hinv_g), g @ hinv_B, B.T @ hinv_B
    else:
        hinv_g = hinv_B = None
        q, r, S = float(doc["q"]), np.atleast_1d(doc["r"]).astype(float), np.atleast_2d(doc["s"]).astype(float)
    c = np.atleast_1d(doc["c"]).astype(float)
    try:
        if len(c) == 1:
            dual = solve_lqclp_single(q, r[0], S[0, 0], c[0], delta)
        else:
            dual = solve_lqclp_multi(q, r, S, c, delta)
    except RecoveryRequired as exc:
        print(json.dumps({"feasible": False, "reason": str(exc)}))
        return EXIT_OK
    out = {"feasible": True, "lam": dual.lam, "nu": dual.nu.tolist(), "case": dual.case, "dual_value": dual.bound()}
    if hinv_g is not None:
        out["x"] = primal_step(dual, hinv_g, hinv_B).tolist()
    print(json.dumps(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safemarl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job from a JSON config or replay a manifest")
    t.add_argument("--config")
    t.add_argument("--manifest", help="replay the config stored in a run manifest")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=int, nargs="+", help="run several seeds into OUT/seed_<s>")
    t.add_argument("--iterations", type=int)
    t.add_argument("--jobs", type=int, default=1, help="processes for independent seeds")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    e.add_argument("--config")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property suites and write a JSON report")
    v.add_argument("--suite", action="append", help="suite name; repeatable (default: all)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--count", action="append", help="instances per suite, e.g. decomposition=20")
    v.add_argument("--inject-fault", choices=["decomposition"], help=argparse.SUPPRESS)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="reward and cost curves from log CSVs")
    pl.add_argument("logs", nargs="+")
    pl.add_argument("--bound", type=float)
    pl.add_argument("--metric", default="dcost", choices=["dcost", "cost", "eval_cost"])
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("solve-lqclp", help="solve one LQCLP instance given as JSON (file or stdin)")
    s.add_argument("problem", nargs="?", default="-")
    s.set_defaults(func=cmd_solve_lqclp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for f in exc.fields:
            print(f"  {f}", file=sys.stderr)
        return EXIT_USAGE
    except (SafeMarlError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
