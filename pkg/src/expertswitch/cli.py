"""Command line entry point.

    expertswitch run --config cfg.txt [--seed N] [--out DIR]
    expertswitch sweep --param Cp --values 50,100,200,500,1000 --config cfg.txt
    expertswitch eval --checkpoint runs/x/checkpoints --data /path/to/mnist
    expertswitch serve --port 8000

``run`` and ``sweep`` execute in this process unless ``--server URL`` is
given, in which case the job is submitted to a running service and polled.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .harness import ExperimentConfig, evaluate_checkpoint, run_experiment, run_sweep
from .harness.config import ALIASES, format_value, parse_value

log = logging.getLogger("expertswitch")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    for item in args.set or []:
        key, _, value = item.partition("=")
        key = key.strip().replace("-", "_")
        key = ALIASES.get(key, key)
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = parse_value(key, value)
    return cfg.replace(**changes) if changes else cfg


def _remote(args, cfg: ExperimentConfig, sweep: bool) -> int:
    import httpx

    body = {"config": {k: format_value(v) for k, v in vars(cfg).items()}}
    if sweep:
        body.update(sweep_param=args.param, sweep_values=args.values.split(","))
    base = args.server.rstrip("/")
    job = httpx.post(f"{base}/experiments", json=body, timeout=30).raise_for_status().json()
    log.info("submitted experiment %s", job["experiment_id"])
    while job["state"] in ("queued", "running"):
        time.sleep(args.poll)
        job = httpx.get(f"{base}/experiments/{job['experiment_id']}", timeout=30).raise_for_status().json()
    if job["state"] == "failed":
        print(f"error: {job['error']}", file=sys.stderr)
        return 1
    print(json.dumps(job["rows"] if sweep else job["summary"], indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args)
    if args.server:
        return _remote(args, cfg, sweep=False)
    res = run_experiment(cfg)
    s = res.summary
    print(f"ACC {s['acc']:.4f} (before pruning {s['acc_pre_prune']:.4f}), {s['n_experts']} experts, "
          f"{s['creates']} creates, {s['switches']} switches, {s['wall_time_s']:.1f}s -> {res.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if args.server:
        return _remote(args, cfg, sweep=True)
    rows = run_sweep(cfg, args.param, args.values.split(","))
    for r in rows:
        print(f"{r['param']}={r['value']}: ACC {r['acc']:.4f}, {r['n_experts']} experts")
    print(f"wrote {cfg.out}/sweep.csv")
    return 0


def cmd_eval(args) -> int:
    per_task, acc = evaluate_checkpoint(args.checkpoint, args.data)
    for t, a in sorted(per_task.items()):
        print(f"task {t}: {a:.4f}")
    print(f"ACC {acc:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("expertswitch.service.app:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expertswitch", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--server", help="submit to a running service at this URL")
        sp.add_argument("--poll", type=float, default=5.0, help="seconds between status polls with --server")

    run = sub.add_parser("run", help="train on a stream, prune, evaluate and write outputs")
    experiment_args(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="repeat a run over values of one config key")
    experiment_args(sweep)
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.set_defaults(func=cmd_sweep)

    ev = sub.add_parser("eval", help="evaluate saved checkpoints on the test sets")
    ev.add_argument("--checkpoint", required=True, help="run directory or its checkpoints/ folder")
    ev.add_argument("--data", help="directory with the IDX files")
    ev.set_defaults(func=cmd_eval)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
