"""Command-line driver: solve, train, simulate, sweep, compare.

Exit codes: 0 success (possibly with per-row error markers), 1 usage or
configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import functools
import hashlib
import json
import logging
import math
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, load_train_config, to_dict
from .model import ScenarioConfig
from .schedulers import FixedPolicy, make_scheduler
from .simulation import SweepResult, read_csv, sweep
from .solver import value_iteration, save_policy

log = logging.getLogger("survsched")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
ORDER = ("vi", "ol", "pq", "rr")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, cfg: RunConfig, command: str, seeds, artifacts: dict, extra: dict | None = None) -> None:
    doc = {
        "tool": "survsched",
        "version": __version__,
        "command": command,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": to_dict(cfg),
        "scenario_fingerprint": cfg.scenario.fingerprint(),
        "seeds": list(seeds),
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def check_artifacts(config_path, artifacts: dict) -> None:
    """When re-running from a manifest, the referenced files must be unchanged."""
    if Path(config_path).suffix != ".json":
        return
    recorded = json.loads(Path(config_path).read_text()).get("artifacts", {})
    for name, digest in recorded.items():
        if artifacts.get(name) != digest:
            raise CliError(f"artifact {name} differs from the one recorded in the manifest")


# scheduler factories must pickle for the process pool


class SolvedPolicy:
    def __init__(self, vi_params):
        self.vi_params = vi_params

    def __call__(self, scenario: ScenarioConfig):
        return FixedPolicy(_solve_cached(scenario, self.vi_params), scenario.fingerprint())


@functools.lru_cache(maxsize=8)
def _solve_cached(scenario, vi_params):
    res = value_iteration(scenario, vi_params)
    if not res.converged:
        raise RuntimeError(f"value iteration did not converge at tau={scenario.tau}")
    return res.policy


class Builtin:
    def __init__(self, kind: str, tie_break: str):
        self.kind, self.tie_break = kind, tie_break

    def __call__(self, scenario):
        return make_scheduler(self.kind, tie_break=self.tie_break)


class Learned:
    def __init__(self, path: str):
        self.path = path

    def __call__(self, scenario):
        return make_scheduler("dq", self.path)


def scheduler_factories(cfg: RunConfig, ids) -> dict:
    out = {}
    for sid in ids:
        if sid == "vi":
            out[sid] = SolvedPolicy(cfg.vi)
        elif sid in cfg.sweep.networks:
            out[sid] = Learned(cfg.sweep.networks[sid])
        elif sid in ("rr", "pq", "ol"):
            out[sid] = Builtin(sid, cfg.sweep.tie_break)
        else:
            raise CliError(f"unknown scheduler {sid!r}")
    return out


def network_artifacts(cfg: RunConfig, ids) -> dict:
    arts = {}
    for sid in ids:
        if sid in cfg.sweep.networks:
            path = cfg.sweep.networks[sid]
            if not Path(path).is_file():
                raise CliError(f"network file {path} for scheduler {sid!r} does not exist")
            arts[path] = file_digest(path)
    return arts


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sw = cfg.sweep
    if getattr(args, "seed", None) is not None:
        sw = replace(sw, seeds=(args.seed,))
    if getattr(args, "horizon", None) is not None:
        sw = replace(sw, horizon=args.horizon)
    if getattr(args, "workers", None) is not None:
        sw = replace(sw, workers=args.workers)
    return replace(cfg, sweep=sw)


def _load(args) -> RunConfig:
    try:
        return _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _check_writable(path) -> None:
    try:
        with open(path, "a"):
            pass
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cfg = _load(args)
    _check_writable(args.out)
    res = value_iteration(cfg.scenario, cfg.vi)
    save_policy(args.out, res, cfg.scenario, cfg.vi)
    print(f"states {res.policy.size}  iterations {res.iterations}  residual {res.residual:.3e}"
          f"  converged {res.converged}")
    if not res.converged:
        print("value iteration hit max_iterations; policy written with converged=false", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args) -> int:
    from .dqn import TrainingDiverged, save_network, train

    cfg = _load(args)
    try:
        tcfg = load_train_config(args.train_config) if args.train_config else cfg.dqn
    except ConfigError as exc:
        raise CliError(f"invalid training config: {exc}") from exc
    if tcfg is None:
        raise CliError("no training settings: pass --train-config or add a [dqn] table")
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps, eval_every=min(tcfg.eval_every, args.steps))
    _check_writable(args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    try:
        trained, rows = train(cfg.scenario, tcfg, log_path=log_path, checkpoint_path=args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_network(args.out, trained)
    cfg = replace(cfg, dqn=tcfg)
    write_manifest(manifest_path(args.out), cfg, "train", [tcfg.seed], {str(args.out): file_digest(args.out)})
    last = rows[-1] if rows else None
    if last is not None:
        print(f"steps {last.step}  loss {last.loss:.4g}  eval F {last.eval_F}")
    return EXIT_OK


def _emit(result: SweepResult, cfg: RunConfig, out, command: str, artifacts: dict) -> int:
    try:
        result.write_csv(out)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    write_manifest(manifest_path(out), cfg, command, cfg.sweep.seeds, artifacts)
    bad = [r for r in result.rows if r.error]
    for r in bad:
        print(f"warning: {r.scheduler} tau={r.tau} seed={r.seed}: {r.error}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    ids = [args.scheduler] if args.scheduler else list(cfg.sweep.schedulers)
    if not ids:
        raise CliError("no scheduler given")
    if args.network:
        sid = ids[0]
        networks = dict(cfg.sweep.networks)
        networks[sid] = args.network
        cfg = replace(cfg, sweep=replace(cfg.sweep, networks=networks))
    tau = args.tau if args.tau is not None else cfg.scenario.tau
    cfg = replace(cfg, scenario=cfg.scenario.replace(tau=tau),
                  sweep=replace(cfg.sweep, schedulers=tuple(ids), tau=(tau,)))
    arts = network_artifacts(cfg, ids)
    check_artifacts(args.config, arts)
    result = sweep(cfg.scenario, scheduler_factories(cfg, ids), [tau], cfg.sweep.horizon, cfg.sweep.seeds,
                   cfg.scenario_id, cfg.sweep.workers)
    for r in result.rows:
        if r.error is None:
            print(f"{r.scheduler} tau={r.tau} seed={r.seed} F={r.F:.6g} (se {r.stderr:.2g}, {r.failures_total} failures)")
    return _emit(result, cfg, args.out, "simulate", arts)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ids = list(cfg.sweep.schedulers)
    taus = list(cfg.sweep.tau) or [cfg.scenario.tau]
    arts = network_artifacts(cfg, ids)
    check_artifacts(args.config, arts)
    _check_writable(args.out)
    result = sweep(cfg.scenario, scheduler_factories(cfg, ids), taus, cfg.sweep.horizon, cfg.sweep.seeds,
                   cfg.scenario_id, cfg.sweep.workers)
    return _emit(result, cfg, args.out, "sweep", arts)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4g}"


def compare_rows(rows: list[dict]) -> tuple[list[str], list[list[str]], list[str]]:
    """Mean F per (scenario, tau, scheduler) pooled over seeds, plus ratio columns and ordering flags."""
    acc = defaultdict(lambda: [0, 0])  # failures, slots
    schedulers = []
    for r in rows:
        if r["F"].startswith("ERROR") or r["failures_total"] == "":
            continue
        key = (r["scenario"], int(r["tau"]), r["scheduler"])
        acc[key][0] += int(r["failures_total"])
        acc[key][1] += int(r["horizon"])
        if r["scheduler"] not in schedulers:
            schedulers.append(r["scheduler"])
    known = [s for s in ORDER[::-1] if s in schedulers]
    schedulers = known + [s for s in schedulers if s not in known]
    # ratios between neighbours in the expected ordering rr >= pq >= ol >= vi, then any extras against pq
    chain = [s for s in ("rr", "pq", "ol", "vi") if s in schedulers]
    pairs = list(zip(chain, chain[1:]))
    base = "pq" if "pq" in schedulers else (schedulers[0] if schedulers else None)
    pairs += [(base, s) for s in schedulers if s not in chain and base is not None and s != base]
    header = ["scenario", "tau"] + schedulers + [f"{a}/{b}" for a, b in pairs]
    table, flags = [], []
    cells = sorted({(k[0], k[1]) for k in acc})
    for scen, tau in cells:
        F, se = {}, {}
        for s in schedulers:
            if (scen, tau, s) in acc:
                n_fail, slots = acc[(scen, tau, s)]
                F[s] = n_fail / slots
                se[s] = math.sqrt(F[s] / slots)
        line = [scen, str(tau)] + [_fmt(F.get(s)) for s in schedulers]
        for a, b in pairs:
            if a in F and b in F and F[b] > 0:
                line.append(f"{F[a] / F[b]:.3g}")
            else:
                line.append("undef")
        table.append(line)
        for lo, hi in zip(chain[::-1], chain[::-1][1:]):
            if lo in F and hi in F and F[lo] - F[hi] > 3 * math.hypot(se[lo], se[hi]):
                flags.append(f"{scen} tau={tau}: F_{lo}={F[lo]:.4g} > F_{hi}={F[hi]:.4g} beyond 3 standard errors")
    return header, table, flags


def cmd_compare(args) -> int:
    rows = []
    for path in args.csv:
        try:
            rows += read_csv(path)
        except (OSError, ValueError) as exc:
            raise CliError(str(exc)) from exc
    header, table, flags = compare_rows(rows)
    widths = [max(len(h), *(len(r[i]) for r in table)) if table else len(h) for i, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in table:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    for f in flags:
        print(f"ORDER VIOLATION {f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(table)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="survsched", description="Survival-time-aware uplink scheduling experiments.")
    ap.add_argument("--version", action="version", version=f"survsched {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="TOML config, or a run manifest to re-run")
        p.add_argument("--out", required=out_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--horizon", type=int)

    p = sub.add_parser("solve", help="value iteration, writes a policy file")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="deep Q training, writes a network file and a CSV log")
    common(p)
    p.add_argument("--train-config", help="TOML file with a [dqn] table (defaults to the config's own)")
    p.add_argument("--steps", type=int, help="override the number of environment steps")
    p.add_argument("--log", help="training log CSV (default: OUT.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="Monte Carlo run of one scheduler at one tau")
    common(p)
    p.add_argument("--scheduler", help="rr, pq, ol, vi, or a learned scheduler id")
    p.add_argument("--network", help="network file for a learned scheduler")
    p.add_argument("--tau", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="every scheduler over the tau grid")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="ordering and ratio table from result CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
