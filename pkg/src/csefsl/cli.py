"""Command-line front end.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 a verification reported FAIL.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as config_mod
from .errors import CseFslError, ConfigurationError, DataError, PlanError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_FAIL = 0, 1, 2, 3

# published parameter counts
EXPECTED_COUNTS = {
    "cifar10/client": 107_328,
    "cifar10/server": 960_970,
    "cifar10/aux/mlp": 23_050,
    "cifar10/aux/cnn54": 22_960,
    "cifar10/aux/cnn27": 11_485,
    "cifar10/aux/cnn14": 5_960,
    "cifar10/aux/cnn7": 2_985,
    "femnist/client": 18_816,
    "femnist/server": 1_187_774,
    "femnist/aux/mlp": 571_454,
    "femnist/aux/cnn64": 575_614,
    "femnist/aux/cnn32": 287_838,
    "femnist/aux/cnn8": 72_006,
    "femnist/aux/cnn2": 18_048,
}


class VerificationFailed(Exception):
    pass


# --- output helpers ----------------------------------------------------------

def _rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in columns)])
    return buf.getvalue()


def _json_clean(v):
    if isinstance(v, Fraction):
        return v.numerator if v.denominator == 1 else float(v)
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _json_clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_clean(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return _json_clean(float(v))
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _dumps(doc) -> str:
    return json.dumps(_json_clean(doc), sort_keys=True, indent=1) + "\n"


def _emit(text: str, out_dir: Optional[str], filename: str):
    sys.stdout.write(text)
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / filename).write_text(text)


def _report(columns, rows, fmt, out_dir, stem, summary=None):
    if fmt == "json":
        _emit(_dumps({"rows": rows, "summary": summary or {}}), out_dir, f"{stem}.json")
    else:
        _emit(_rows_to_csv(columns, rows), out_dir, f"{stem}.csv")
        if summary is not None and out_dir:
            (Path(out_dir) / f"{stem}_summary.json").write_text(_dumps(summary))


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = config_mod.with_overrides(cfg, seed=args.seed)
    return cfg


# --- commands ----------------------------------------------------------------

def count_rows(mutate_bias: bool = False, aux_variants: bool = True) -> list[dict]:
    from .split import CnnMlp, MLP, build_cifar10_arch, build_femnist_arch
    from .nn.layers import param_count

    cifar = build_cifar10_arch(MLP(), server_first_bias=not mutate_bias)
    fem = build_femnist_arch(MLP())
    actual = {
        "cifar10/client": param_count(cifar.client_stack),
        "cifar10/server": param_count(cifar.server_stack),
        "femnist/client": param_count(fem.client_stack),
        "femnist/server": param_count(fem.server_stack),
    }
    if aux_variants:
        actual["cifar10/aux/mlp"] = param_count(cifar.aux_stack)
        actual["femnist/aux/mlp"] = param_count(fem.aux_stack)
        for c in (54, 27, 14, 7):
            actual[f"cifar10/aux/cnn{c}"] = param_count(build_cifar10_arch(CnnMlp(c)).aux_stack)
        for c in (64, 32, 8, 2):
            actual[f"femnist/aux/cnn{c}"] = param_count(build_femnist_arch(CnnMlp(c)).aux_stack)
    return [{"name": k, "expected": EXPECTED_COUNTS[k], "actual": v, "delta": v - EXPECTED_COUNTS[k],
             "status": "PASS" if v == EXPECTED_COUNTS[k] else "FAIL"} for k, v in actual.items()]


def cmd_verify_counts(args) -> int:
    rows = count_rows(args.mutate_bias, not args.models_only)
    _report(["name", "expected", "actual", "delta", "status"], rows, args.format, args.out, "counts")
    failed = [r for r in rows if r["status"] == "FAIL"]
    sys.stderr.write("verify-counts: " + ("FAIL " + ", ".join(r["name"] for r in failed) if failed else "PASS")
                     + "\n")
    return EXIT_FAIL if failed else EXIT_OK


def table2_rows(ns=(2, 5), hs=(1, 2, 5), B=4, samples_per_client=40, storage_ns=(2, 8), seed=0) -> tuple[list, dict]:
    """One epoch per method and geometry on a synthetic world, reconciled against the closed forms."""
    from .algorithms import RunConfig, run_simulation
    from .data import IID, partition, synth_dataset
    from .ledger import CostModel, Method, analytic_storage, reconcile
    from .nn.schedule import LrSchedule
    from .split import build_mlp_arch

    if samples_per_client % B:
        raise ConfigurationError(f"samples_per_client={samples_per_client} is not a multiple of B={B}")
    batches = samples_per_client // B
    arch = build_mlp_arch(8, 4, cut_dim=6, server_hidden=5)
    rows = []
    smashed = {}

    def one(method, n, h, convention="table2"):
        train = synth_dataset(seed, n * samples_per_client, 8, 4, 4.0)
        shards = partition(train, IID(), n, seed)
        cfg = RunConfig(method, n, T=1, B=B, h=h, lr=LrSchedule(0.05), seed=seed, storage_convention=convention)
        res = run_simulation(arch, cfg, train, shards)
        cm = CostModel.for_arch(method, arch, samples_per_client, n, h)
        return res, cm

    for n in ns:
        combos = [(Method.FSL_MC, 1), (Method.FSL_OC, 1), (Method.FSL_AN, 1)]
        combos += [(Method.CSE_FSL, h) for h in hs if batches % h == 0]
        for method, h in combos:
            res, cm = one(method, n, h)
            rec = reconcile(res.ledger, method, cm, epochs=1)
            storage = analytic_storage(method, cm, "table2")
            smashed[(method.value, n, h)] = rec["per_kind"]["smashed"]["measured"]
            rows.append({"method": method.value, "n": n, "h": h, "measured": rec["measured"],
                         "analytic": rec["analytic"], "diff": rec["diff"],
                         "smashed": rec["per_kind"]["smashed"]["measured"],
                         "cut_grad": rec["per_kind"]["cut_grad"]["measured"],
                         "model": rec["per_kind"]["model"]["measured"],
                         "storage_measured": res.peak_storage, "storage_analytic": int(storage),
                         "status": "PASS" if rec["ok"] and res.peak_storage == storage else "FAIL"})
    summary = {"batches_per_epoch": batches, "samples_per_client": samples_per_client, "B": B}
    ratios = {}
    for n in ns:
        an, cse2 = smashed.get(("fsl_an", n, 1)), smashed.get(("cse_fsl", n, 2))
        if an is not None and cse2:
            ratios[str(n)] = an / cse2
    summary["an_over_cse_h2_smashed"] = ratios
    cse_storage = {}
    for n in storage_ns:
        res, cm = one(Method.CSE_FSL, n, 1)
        cse_storage[str(n)] = res.peak_storage
    summary["cse_storage_by_n"] = cse_storage
    summary["cse_storage_constant"] = len(set(cse_storage.values())) <= 1
    buffered = {}
    for n in ns:
        res, cm = one(Method.CSE_FSL, n, 1, "buffered")
        buffered[str(n)] = {"measured": res.peak_storage, "analytic": analytic_storage(Method.CSE_FSL, cm, "buffered")}
    summary["cse_buffered_storage"] = buffered
    summary["pass"] = (all(r["status"] == "PASS" for r in rows) and summary["cse_storage_constant"]
                       and all(v == 2 for v in ratios.values())
                       and all(v["measured"] == v["analytic"] for v in buffered.values()))
    return rows, summary


def cmd_verify_table2(args) -> int:
    cfg = _load(args)
    t = cfg.table2
    rows, summary = table2_rows(tuple(t.ns), tuple(t.hs), t.B, t.samples_per_client, tuple(t.storage_ns), cfg.seed)
    cols = ["method", "n", "h", "measured", "analytic", "diff", "smashed", "cut_grad", "model",
            "storage_measured", "storage_analytic", "status"]
    _report(cols, rows, args.format, args.out, "table2", summary)
    sys.stderr.write(f"verify-table2: {'PASS' if summary['pass'] else 'FAIL'}\n")
    return EXIT_OK if summary["pass"] else EXIT_FAIL


def write_run_outputs(result, out_dir, fmt="csv", bounds_doc=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        (out / "metrics.json").write_text(result.metrics_json() + "\n")
    else:
        (out / "metrics.csv").write_text(result.metrics_csv())
    result.ledger.to_csv(out / "ledger.csv")
    result.trace.to_jsonl(out / "trace.jsonl")
    if bounds_doc is None:
        bounds_doc = {"tracked": False}
    (out / "bounds.json").write_text(_dumps(bounds_doc))


def execute(cfg: config_mod.ExperimentConfig):
    from .algorithms import run_simulation
    arch, train, test, shards, profiles, run_cfg = config_mod.build_experiment(cfg)
    return run_simulation(arch, run_cfg, train, shards, test, profiles)


def cmd_run(args) -> int:
    from .bounds import bound_report
    cfg = _load(args)
    result = execute(cfg)
    bounds_doc = bound_report(result) if cfg.run.track_theory and not result.diverged else None
    out_dir = args.out or cfg.output.dir
    write_run_outputs(result, out_dir, args.format, bounds_doc)
    last = result.metrics[-1] if result.metrics else None
    status = "diverged" if result.diverged else "ok"
    sys.stderr.write(f"run: {status}; rounds={len(result.metrics)} final_top1={last.test_top1 if last else 'nan'} "
                     f"comm={last.comm_cumulative_units if last else 0} -> {out_dir}\n")
    return EXIT_RUNTIME if result.diverged else EXIT_OK


SWEEP_PATHS = {"h": "run.h", "n": "run.n"}


def sweep_rows(cfg, param: str, values) -> list[dict]:
    from .nn.layers import param_count
    rows = []
    for v in values:
        if param == "aux_channels":
            cfg_v = config_mod.with_overrides(cfg, **{"model.aux": {"kind": "cnn_mlp", "channels": v}})
        else:
            cfg_v = config_mod.with_overrides(cfg, **{SWEEP_PATHS[param]: v})
        result = execute(cfg_v)
        last = result.metrics[-1]
        rows.append({"param": param, "value": v, "final_test_top1": last.test_top1,
                     "comm_cumulative_units": last.comm_cumulative_units, "storage_units": result.peak_storage,
                     "aux_params": param_count(result.world.arch.aux_stack), "diverged": result.diverged,
                     "_result": result})
    return rows


def cmd_sweep(args) -> int:
    cfg = _load(args)
    param = args.param or cfg.sweep.param
    if args.values is not None:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    else:
        values = list(cfg.sweep.values)
    if param not in ("h", "n", "aux_channels"):
        raise ConfigurationError(f"--param must be h, n or aux_channels, got {param!r}")
    out_dir = args.out or cfg.output.dir
    rows = sweep_rows(cfg, param, values)
    for r in rows:
        write_run_outputs(r.pop("_result"), Path(out_dir) / f"{param}={r['value']}", args.format)
    cols = ["param", "value", "final_test_top1", "comm_cumulative_units", "storage_units", "aux_params", "diverged"]
    _report(cols, rows, args.format, out_dir if values else args.out, "summary")
    return EXIT_OK


def arrival_rows(cfg, seeds: int) -> tuple[list[dict], dict]:
    rows = []
    for s in range(seeds):
        accs = {}
        for order in ("ordered", "random"):
            c = config_mod.with_overrides(cfg, seed=cfg.seed + s, **{"run.arrival_order": order})
            accs[order] = execute(c).final_accuracy
        rows.append({"seed": cfg.seed + s, "acc_ordered": accs["ordered"], "acc_random": accs["random"],
                     "delta": abs(accs["ordered"] - accs["random"])})
    mean = float(np.mean([r["delta"] for r in rows])) if rows else 0.0
    return rows, {"mean_abs_delta": mean, "seeds": seeds, "threshold": cfg.arrival_study.threshold,
                  "pass": mean < cfg.arrival_study.threshold}


def cmd_arrival_study(args) -> int:
    cfg = _load(args)
    seeds = args.seeds or cfg.arrival_study.seeds
    rows, summary = arrival_rows(cfg, seeds)
    _report(["seed", "acc_ordered", "acc_random", "delta"], rows, args.format, args.out, "arrival", summary)
    sys.stderr.write(f"arrival-study: mean |delta| = {summary['mean_abs_delta']:.4f} "
                     f"({'PASS' if summary['pass'] else 'FAIL'} at {summary['threshold']})\n")
    return EXIT_OK if summary["pass"] else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all, summarize
    worst = summarize(run_all(args.seeds))
    rows = [{"check": k, "max_rel_error": v, "status": "PASS" if v < TOLERANCE else "FAIL"} for k, v in worst.items()]
    _report(["check", "max_rel_error", "status"], rows, args.format, args.out, "gradcheck",
            {"tolerance": TOLERANCE, "seeds": args.seeds})
    return EXIT_OK if all(r["status"] == "PASS" for r in rows) else EXIT_FAIL


def cmd_bounds(args) -> int:
    from .bounds import BoundInputs, client_bound, consistency_check, lr_from_theory, server_bound
    if args.L is not None:
        bi = BoundInputs(args.L, args.G1, args.G2, args.h, args.n, args.T, args.delta_c, args.delta_s, args.d_sum)
        doc = {"client_bound": client_bound(bi), "server_bound": server_bound(bi),
               "lr_client": lr_from_theory("client", bi.L, bi.h, bi.T),
               "lr_server": lr_from_theory("server", bi.L, bi.n, bi.T)}
        if args.format == "json":
            _emit(_dumps(doc), args.out, "bounds.json")
        else:
            _emit(_rows_to_csv(list(doc), [doc]), args.out, "bounds.csv")
        return EXIT_OK
    horizons = [int(v) for v in args.horizons.split(",")]
    seed = args.seed if args.seed is not None else 0
    reports = consistency_check(horizons, seed=seed, h=args.h, n=args.n)
    rows = [{"T": r["T"], "L": r["inputs"]["L"], "client_lhs": r["client"]["avg_grad_norm_sq"],
             "client_bound": r["client"]["bound"], "server_lhs": r["server"]["avg_grad_norm_sq"],
             "server_bound": r["server"]["bound"], "client_consistent": r["client"]["consistent"]}
            for r in reports]
    if args.format == "json":
        _emit(_dumps({"reports": reports}), args.out, "bounds.json")
    else:
        _emit(_rows_to_csv(list(rows[0]), rows), args.out, "bounds.csv")
    return EXIT_OK if all(r["client_consistent"] for r in rows) else EXIT_FAIL


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csefsl", description="Federated split learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        return p

    p = common(sub.add_parser("run", help="train one configured experiment"))
    p.set_defaults(func=cmd_run)

    p = common(sub.add_parser("verify-counts", help="check parameter counts of the reference models"), config=False)
    p.add_argument("--mutate-bias", action="store_true", help="drop the server's first dense bias (negative control)")
    p.add_argument("--models-only", action="store_true", help="skip the auxiliary-head variants")
    p.set_defaults(func=cmd_verify_counts)

    p = common(sub.add_parser("verify-table2", help="reconcile measured traffic and storage with the closed forms"))
    p.set_defaults(func=cmd_verify_table2)

    p = common(sub.add_parser("sweep", help="one run per value of h, n or aux channels"))
    p.add_argument("--param", choices=("h", "n", "aux_channels"))
    p.add_argument("--values", help="comma-separated integers")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("arrival-study", help="paired ordered/random arrival runs"))
    p.add_argument("--seeds", type=int, help="number of paired seeds")
    p.set_defaults(func=cmd_arrival_study)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), config=False)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("bounds", help="evaluate bounds or run the consistency check"), config=False)
    p.add_argument("--L", type=float)
    p.add_argument("--G1", type=float, default=1.0)
    p.add_argument("--G2", type=float, default=1.0)
    p.add_argument("--h", type=int, default=1)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--delta-c", dest="delta_c", type=float, default=1.0)
    p.add_argument("--delta-s", dest="delta_s", type=float, default=1.0)
    p.add_argument("--d-sum", dest="d_sum", type=float, default=0.0)
    p.add_argument("--horizons", default="25,50,100", help="T values for the consistency check")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigurationError, DataError, PlanError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except (CseFslError, OSError, ArithmeticError, RuntimeError) as exc:
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
