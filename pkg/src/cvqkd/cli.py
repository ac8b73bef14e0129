"""Command-line entry point.

    cvqkd simulate --blocks 3 --out runs/demo         # both endpoints in-process
    cvqkd bob   --config cfg.json --port 7300 --out runs/bob
    cvqkd alice --config cfg.json --host 127.0.0.1 --port 7300 --out runs/alice
    cvqkd curves waterfall                              # security-bound sweeps
    cvqkd report runs/demo/alice/stats.json             # throughput and time series
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .model_core import REFERENCE, FiberModel
from .security_bound import (
    FIELD_BETA,
    FIELD_EXCESS_NOISE,
    max_distance,
    rate_vs_excess_noise,
    rate_waterfall,
)
from .session.config import SessionConfig
from .session.duty import DutyModel
from .session.keystore import KeyStore
from .session.runner import (
    run_session,
    simulate,
    stats_from_json,
    stats_to_json,
    throughput_report,
)
from .session.transport import SocketTransport


def _config(args) -> SessionConfig:
    cfg = SessionConfig.load(args.config) if args.config else SessionConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.blocks is not None:
        changes["n_blocks"] = args.blocks
    if args.pulses is not None:
        changes["n_pulses"] = args.pulses
    if args.oracle:
        changes["reconciliation"] = "oracle"
    if args.workers is not None:
        changes["duty"] = DutyModel(**{**cfg.duty.__dict__, "worker_count": args.workers})
    return cfg.with_(**changes) if changes else cfg


def _write_outputs(out: Path, stats) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(stats_to_json(stats))
    report = throughput_report(stats)
    (out / "timeseries.csv").write_text(report.time_series_csv())
    print(report.summary())


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    t0 = time.perf_counter()
    res = simulate(cfg, out_dir=out)
    for a, b in zip(res.alice.blocks, res.bob.blocks):
        status = "key" if a.delivered else f"abort ({a.reason})"
        print(f"block {a.block_id:4d}  eps_hat {a.epsilon_hat:+.4f}  beta {a.beta:.3f}  "
              f"{a.key_bits:7d} bits  {status}")
    print(f"wall time {time.perf_counter() - t0:.1f} s")
    for role, stats in (("alice", res.alice), ("bob", res.bob)):
        (out / role).mkdir(parents=True, exist_ok=True)
        (out / role / "stats.json").write_text(stats_to_json(stats))
    report = throughput_report(res.alice)
    (out / "timeseries.csv").write_text(report.time_series_csv())
    print(report.summary())
    same = KeyStore(out / "alice").raw_bytes() == KeyStore(out / "bob").raw_bytes()
    print(f"key stores identical: {same}")
    return 0 if same else 1


def _endpoint(args, role: str) -> int:
    cfg = _config(args)
    out = Path(args.out)
    store = KeyStore(out / "keys")

    if role == "alice":
        def connect(attempt):
            for _ in range(args.retries):
                try:
                    return SocketTransport.connect(args.host, args.port)
                except OSError:
                    time.sleep(1.0)
            return SocketTransport.connect(args.host, args.port)
    else:
        def connect(attempt):
            return SocketTransport.listen(args.host, args.port)

    stats = run_session(cfg, role, connect, keystore=store)
    _write_outputs(out, stats)
    return 0


def cmd_export(args) -> int:
    sys.stdout.write(KeyStore(args.store).export_hex())
    return 0


def cmd_curves(args) -> int:
    params = REFERENCE.with_(epsilon=FIELD_EXCESS_NOISE, beta=FIELD_BETA)
    fiber = FiberModel(loss_db_per_km=args.loss_per_km)
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.kind == "waterfall":
        wf = rate_waterfall(REFERENCE, fiber, DutyModel(worker_count=args.workers))
        w.writerow(["loss_db", "distance_km", *wf.STAGES])
        for row in wf.rows():
            w.writerow([f"{x:.6g}" for x in row])
    elif args.kind == "excess-noise":
        grid = np.round(np.arange(0.0, 0.1 + 1e-9, 0.005), 6)
        w.writerow(["epsilon", "rate_bits_per_s"])
        for e, r in zip(grid, rate_vs_excess_noise(REFERENCE.with_(beta=1.0), grid)):
            w.writerow([f"{e:.4f}", f"{r:.3f}"])
    elif args.kind == "range":
        w.writerow(["epsilon", "beta", "max_distance_km"])
        for eps in (0.0, 0.01, 0.02, 0.04, 0.06):
            d = max_distance(params.with_(epsilon=eps), fiber)
            w.writerow([eps, FIELD_BETA, f"{d:.2f}"])
    return 0


def cmd_report(args) -> int:
    stats = stats_from_json(Path(args.stats).read_text())
    duty = stats.config.duty
    if args.workers is not None:
        duty = DutyModel(**{**duty.__dict__, "worker_count": args.workers})
    report = throughput_report(stats, duty)
    print(report.summary())
    if args.timeseries:
        Path(args.timeseries).write_text(report.time_series_csv(args.delimiter))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvqkd", description="CV-QKD post-processing simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def session_flags(p):
        p.add_argument("--config", help="JSON session config")
        p.add_argument("--seed", type=int)
        p.add_argument("--blocks", type=int)
        p.add_argument("--pulses", type=int, help="pulses per block")
        p.add_argument("--workers", type=int, help="post-processing workers for duty accounting")
        p.add_argument("--oracle", action="store_true",
                       help="skip belief propagation (simulation shortcut; leakage still charged)")
        p.add_argument("--out", default="runs/latest", help="output directory")

    p = sub.add_parser("simulate", help="run both endpoints over an in-process loopback")
    session_flags(p)
    p.set_defaults(func=cmd_simulate)

    for role in ("alice", "bob"):
        p = sub.add_parser(role, help=f"run the {role} endpoint over TCP")
        session_flags(p)
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=7300)
        p.add_argument("--retries", type=int, default=30)
        p.set_defaults(func=lambda a, r=role: _endpoint(a, r))

    p = sub.add_parser("curves", help="security-bound sweeps as CSV")
    p.add_argument("kind", choices=["waterfall", "excess-noise", "range"])
    p.add_argument("--loss-per-km", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("report", help="throughput figures and time series from stats.json")
    p.add_argument("stats")
    p.add_argument("--workers", type=int)
    p.add_argument("--timeseries", help="write (time, rate, epsilon_hat) here")
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export", help="dump a key store as hex lines")
    p.add_argument("store")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(threadName)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
