"""Command-line driver: SNR sweeps, policy export/import and simulation.

Examples
--------
    harqmdp solve --modes SC --k-max 4 --snr-db 0:35:1 --out th_sc_k4.csv
    harqmdp dump-policy --modes TS --snr-db 16 --out policy.json
    harqmdp simulate --policy policy.json --blocks 100000 --out sim.csv
    harqmdp baseline --k-max 4 --snr-db 0:35:0.5
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .channel import ChannelModel
from .errors import ConfigurationError, HarqError
from .lattice import Action, Mode, ModeSet, State, build_ami_grid, build_p_grid
from .montecarlo import (
    InfoModel,
    observable_policy_source,
    simulate,
    unique_action_source,
)
from .onebit import BeliefCase, ObsState, onebit_law, unique_action_search
from .solver import (
    action_statistics,
    conventional_renewal,
    conventional_throughput,
    law_structure,
    outage,
    policy_iteration,
    stationary_distribution,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

FEEDBACKS = ("multi_bit", "one_bit_full", "one_bit_unique")
SOLVE_COLUMNS = ("snr_db", "eta", "p_out", "P_1P2", "P_SC", "P_TS", "P_Drop", "P_ACK1", "iterations",
                 "ergodic", "conventional")
SIM_COLUMNS = ("snr_db", "blocks", "delivered_bits", "dropped_packets", "delivered_packets", "eta_emp",
               "p_out_emp", "eta_stderr", "seed", "eta_analytic")
BASELINE_COLUMNS = ("snr_db", "ergodic", "conventional", "conventional_renewal")

DEFAULTS = {
    "rate": 4.0,
    "k_max": 2,
    "t_i": 32,
    "t_p": 32,
    "modes": "SC",
    "feedback": "multi_bit",
    "snr_db": "0:35:1",
    "seed": 0,
    "blocks": 100000,
}


@dataclass
class ExperimentConfig:
    rate: float
    k_max: int
    t_i: int
    t_p: int
    modes: str
    feedback: str
    snr_db: List[float]
    seed: int
    blocks: int
    policy: Optional[str] = None

    def __post_init__(self):
        self.mode_set = ModeSet.parse(self.modes)
        if self.feedback not in FEEDBACKS:
            raise ConfigurationError(f"feedback must be one of {', '.join(FEEDBACKS)}, got {self.feedback!r}")
        if self.feedback == "one_bit_full" and self.k_max != 2:
            raise ConfigurationError("one_bit_full feedback requires --k-max 2")
        if not self.rate > 0:
            raise ConfigurationError(f"rate must be positive, got {self.rate}")
        if self.k_max < 1:
            raise ConfigurationError(f"k-max must be >= 1, got {self.k_max}")
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")
        if not self.snr_db:
            raise ConfigurationError("empty SNR list")
        self.grid = build_ami_grid(self.rate, self.t_i)
        self.p_grid = build_p_grid(self.t_p) if self.mode_set != ModeSet.ONE_P else ()

    def echo(self) -> dict:
        return {
            "rate": self.rate, "k_max": self.k_max, "t_i": self.t_i, "t_p": self.t_p, "modes": self.mode_set.name,
            "feedback": self.feedback, "snr_db": self.snr_db, "seed": self.seed, "blocks": self.blocks,
            "policy": self.policy,
        }


def parse_snr_list(text) -> List[float]:
    """``"10,16,22"`` or ``"start:stop:step"`` (stop included) or a list of numbers."""
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    text = str(text).strip()
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
                raise ConfigurationError(f"bad SNR range {text!r}; expected start:stop:step")
            n = int(math.floor((parts[1] - parts[0]) / parts[2] + 1e-9)) + 1
            return [round(parts[0] + i * parts[2], 10) for i in range(n)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad SNR list {text!r}") from exc


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    merged = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(from_file) - set(DEFAULTS) - {"policy"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(from_file)
    for key in list(DEFAULTS) + ["policy"]:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    try:
        return ExperimentConfig(
            rate=float(merged["rate"]),
            k_max=int(merged["k_max"]),
            t_i=int(merged["t_i"]),
            t_p=int(merged["t_p"]),
            modes=str(merged["modes"]),
            feedback=str(merged["feedback"]),
            snr_db=parse_snr_list(merged["snr_db"]),
            seed=int(merged["seed"]),
            blocks=int(merged["blocks"]),
            policy=merged.get("policy"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc


# ---------------------------------------------------------------------------
# per-point work (module level so it can run in worker processes)


def _mode_stats(law, mu, policy, pending):
    modes = np.array([law.actions[law.row_action[r]].mode for r in policy])
    mass = float(mu[pending].sum())
    out = {}
    for key, mode in (("P_1P2", Mode.ONE_P), ("P_Drop", Mode.ZERO_P), ("P_TS", Mode.TS), ("P_SC", Mode.SC)):
        out[key] = float(mu[pending & (modes == mode)].sum() / mass) if mass > 0 else float("nan")
    return out


def solve_point(cfg: ExperimentConfig, snr_db: float) -> dict:
    ch = ChannelModel.from_db(snr_db)
    row = {"snr_db": snr_db}
    if cfg.feedback == "one_bit_full":
        law = onebit_law(cfg.rate, ch, cfg.grid, cfg.p_grid, cfg.mode_set)
        out = policy_iteration(law)
        pending = np.array([o.case is not None for o in law.labels])
        row.update(eta=out.eta, p_out=outage(law, out.mu, out.policy), iterations=out.iterations, P_ACK1=float("nan"))
        row.update(_mode_stats(law, out.mu, out.policy, pending))
    else:
        law = law_structure(cfg.rate, cfg.k_max, cfg.t_i, cfg.t_p if cfg.p_grid else 3, cfg.mode_set).at(ch)
        if cfg.feedback == "multi_bit":
            out = policy_iteration(law)
            eta, policy, mu, iterations = out.eta, out.policy, out.mu, out.iterations
        else:
            eta, best = unique_action_search(cfg.rate, cfg.k_max, ch, cfg.grid, cfg.p_grid, cfg.mode_set)
            policy = law.action_offset_rows(best)
            mu = stationary_distribution(law, policy)
            iterations = len(law.actions)
        stats = action_statistics(law, mu, policy)
        row.update(eta=eta, p_out=outage(law, mu, policy), iterations=iterations)
        row.update({k: stats[k] for k in ("P_1P2", "P_SC", "P_TS", "P_Drop", "P_ACK1")})
    row["ergodic"] = ch.ergodic_capacity()
    row["conventional"] = conventional_throughput(cfg.rate, cfg.k_max, ch, cfg.t_i)
    return row


def baseline_point(cfg: ExperimentConfig, snr_db: float) -> dict:
    ch = ChannelModel.from_db(snr_db)
    return {
        "snr_db": snr_db,
        "ergodic": ch.ergodic_capacity(),
        "conventional": conventional_throughput(cfg.rate, cfg.k_max, ch, cfg.t_i),
        "conventional_renewal": conventional_renewal(cfg.rate, cfg.k_max, ch),
    }


def _action_json(a: Action) -> dict:
    return {"mode": a.mode.label, "p": a.p, "p_index": a.p_index}


def _action_from_json(d: dict) -> Action:
    mode = Mode.from_label(d["mode"])
    if mode.joint:
        return Action(mode, int(d["p_index"]), float(d["p"]))
    return Action(mode)


def policy_artifact(cfg: ExperimentConfig, snr_db: float) -> dict:
    """Solved policy at one SNR as a JSON-ready dict."""
    ch = ChannelModel.from_db(snr_db)
    art = {"config": cfg.echo(), "snr_db": snr_db, "feedback": cfg.feedback}
    if cfg.feedback == "one_bit_full":
        law = onebit_law(cfg.rate, ch, cfg.grid, cfg.p_grid, cfg.mode_set)
        out = policy_iteration(law)
        art["eta"] = out.eta
        art["records"] = [
            {"case": None if o.case is None else o.case.value, "obs_p_index": o.p_index, **_action_json(a)}
            for o, a in zip(law.labels, out.actions)
        ]
        return art
    law = law_structure(cfg.rate, cfg.k_max, cfg.t_i, cfg.t_p if cfg.p_grid else 3, cfg.mode_set).at(ch)
    if cfg.feedback == "multi_bit":
        out = policy_iteration(law)
        eta, actions = out.eta, out.actions
    else:
        eta, best = unique_action_search(cfg.rate, cfg.k_max, ch, cfg.grid, cfg.p_grid, cfg.mode_set)
        actions = law.policy_actions(law.action_offset_rows(best))
        art["unique_action"] = _action_json(best)
    reps = cfg.grid.representatives
    records = []
    for s, a in zip(law.meta["space"].states, actions):
        records.append({
            "k_hol": s.k_hol, "k_next": s.k_next, "c_hol": s.c_hol, "c_next": s.c_next,
            "ami_rep_hol": None if s.c_hol == cfg.grid.success else float(reps[s.c_hol]),
            "ami_rep_next": None if s.k_next == 0 or s.c_next == cfg.grid.success else float(reps[s.c_next]),
            **_action_json(a),
        })
    art["eta"] = eta
    art["records"] = records
    art["slice_1_0"] = [r for r in records if r["k_hol"] == 1 and r["k_next"] == 0]
    return art


def policy_source_from_artifact(art: dict, cfg: ExperimentConfig):
    """Rebuild (info model, policy source) from a dumped artifact."""
    feedback = art["feedback"]
    if feedback == "one_bit_full":
        table = {}
        for r in art["records"]:
            case = None if r["case"] is None else BeliefCase(r["case"])
            table[ObsState(case, r["obs_p_index"])] = _action_from_json(r)
        return InfoModel.ONE_BIT, observable_policy_source(table)
    if feedback == "one_bit_unique":
        return InfoModel.ONE_BIT, unique_action_source(_action_from_json(art["unique_action"]))
    table = {State(r["k_hol"], r["k_next"], r["c_hol"], r["c_next"]): _action_from_json(r) for r in art["records"]}
    return InfoModel.MULTI_BIT, table.__getitem__


def simulate_point(cfg: ExperimentConfig, snr_db: float, art: Optional[dict] = None) -> dict:
    ch = ChannelModel.from_db(snr_db)
    if art is None:
        art = policy_artifact(cfg, snr_db)
    info, source = policy_source_from_artifact(art, cfg)
    rep = simulate(source, info, cfg.rate, cfg.k_max, ch, cfg.grid, cfg.blocks, cfg.seed, cfg.mode_set)
    analytic = art.get("eta", float("nan")) if art.get("snr_db") == snr_db else float("nan")
    row = {"snr_db": snr_db, **asdict(rep), "eta_analytic": analytic}
    return row


# ---------------------------------------------------------------------------
# plumbing


def _workers() -> int:
    env = os.environ.get("HARQMDP_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError as exc:
            raise ConfigurationError(f"HARQMDP_THREADS must be an integer, got {env!r}") from exc
    return n


def _point_safe(fn, cfg, snr_db, *extra):
    try:
        return fn(cfg, snr_db, *extra), None
    except HarqError as exc:
        return None, f"{snr_db} dB: {exc}"


def run_sweep(fn, cfg: ExperimentConfig, *extra):
    """Evaluate ``fn`` at every SNR; rows come back ordered by SNR."""
    points = sorted(cfg.snr_db)
    workers = min(_workers(), len(points))
    if workers <= 1:
        results = [_point_safe(fn, cfg, x, *extra) for x in points]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_point_safe, [fn] * len(points), [cfg] * len(points), points,
                                    *[[e] * len(points) for e in extra]))
    rows = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    return rows, errors


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def write_table(rows, columns, out: Optional[str], cfg: ExperimentConfig, command: str):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    if out is None:
        sys.stdout.write(buf.getvalue())
        return
    path = Path(out)
    path.write_text(buf.getvalue())
    path.with_suffix(".json").write_text(json.dumps({"command": command, "config": cfg.echo(), "columns": columns},
                                                    indent=2) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--rate", type=float, help="transmission rate R in bits/channel use (default 4)")
    common.add_argument("--k-max", dest="k_max", type=int, help="maximum rounds per packet K (default 2)")
    common.add_argument("--t-i", dest="t_i", type=int, help="AMI quantization levels (default 32)")
    common.add_argument("--t-p", dest="t_p", type=int, help="split-parameter levels (default 32)")
    common.add_argument("--modes", help="mode set: 1P, TS, SC or ALL (default SC)")
    common.add_argument("--feedback", help="multi_bit, one_bit_full (K=2) or one_bit_unique")
    common.add_argument("--snr-db", dest="snr_db", help="list '10,16' or range 'start:stop:step' in dB")
    common.add_argument("--seed", type=int)
    common.add_argument("--blocks", type=int, help="simulated blocks per SNR point")
    common.add_argument("--out", help="output file (CSV for tables, JSON for policies)")
    common.add_argument("--config", help="JSON file with defaults; flags override it")

    parser = argparse.ArgumentParser(prog="harqmdp", description="Multi-packet HARQ policy optimization")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="optimize and tabulate throughput over SNR")
    sub.add_parser("dump-policy", parents=[common], help="export the solved policy at one SNR")
    p_sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo run of a solved or dumped policy")
    p_sim.add_argument("--policy", help="policy JSON from dump-policy (solved on the fly otherwise)")
    sub.add_parser("baseline", parents=[common], help="ergodic capacity and conventional HARQ")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        art = None
        if args.command == "simulate" and cfg.policy:
            try:
                art = json.loads(Path(cfg.policy).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read policy {cfg.policy}: {exc}") from exc
            # the policy fixes the model it was solved for
            base = art["config"]
            cfg = ExperimentConfig(rate=float(base["rate"]), k_max=int(base["k_max"]), t_i=int(base["t_i"]),
                                   t_p=int(base["t_p"]), modes=base["modes"], feedback=art["feedback"],
                                   snr_db=cfg.snr_db, seed=cfg.seed, blocks=cfg.blocks, policy=cfg.policy)
    except ConfigurationError as exc:
        print(f"harqmdp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "dump-policy":
        snr = cfg.snr_db[0]
        try:
            art = policy_artifact(cfg, snr)
        except HarqError as exc:
            print(f"harqmdp: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        text = json.dumps(art, indent=1) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    if args.command == "solve":
        rows, errors = run_sweep(solve_point, cfg)
        columns = SOLVE_COLUMNS
    elif args.command == "baseline":
        rows, errors = run_sweep(baseline_point, cfg)
        columns = BASELINE_COLUMNS
    else:
        if art is not None:
            rows, errors = run_sweep(simulate_point, cfg, art)
        else:
            rows, errors = run_sweep(simulate_point, cfg)
        columns = SIM_COLUMNS
    write_table(rows, columns, args.out, cfg, args.command)
    for e in errors:
        print(f"harqmdp: numeric failure at {e}", file=sys.stderr)
    return EXIT_NUMERIC if errors else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
