"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget."""

import filecmp
import math
import time
from pathlib import Path

import numpy as np

from csefsl.algorithms import RunConfig, run_simulation
from csefsl.bounds import BoundInputs, client_bound, consistency_check, server_bound
from csefsl.cli import arrival_rows, count_rows, main, table2_rows
from csefsl.config import load_config
from csefsl.data import IID, partition, synth_dataset, train_test_split
from csefsl.gradcheck import TOLERANCE, run_all, summarize
from csefsl.nn import core
from csefsl.nn.schedule import LrSchedule
from csefsl.sim import DataQueue
from csefsl.split import SmashedBatch, build_mlp_arch, server_loss_step

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LR = LrSchedule(0.05)
SEEDS = range(10)


def _blobs(seed):
    """Four Gaussian blobs in 8-d, 1000 train / 400 test, five IID clients."""
    full = synth_dataset(seed, 1400, 8, 4, 5.0)
    train, test = train_test_split(full, 400, seed)
    return train, test, partition(train, IID(), 5, seed)


def test_criterion_1_parameter_counts(acceptance):
    t0 = time.perf_counter()
    rows = count_rows()
    elapsed = time.perf_counter() - t0
    bad = [r["name"] for r in rows if r["delta"] != 0]
    ok = len(rows) == 14 and not bad and elapsed < 1.0
    assert acceptance(1, ok, f"{14 - len(bad)}/14 counts exact in {elapsed:.2f}s")


def test_criterion_2_table2_reconciliation(acceptance):
    t0 = time.perf_counter()
    rows, summary = table2_rows(ns=(2, 5), hs=(1, 2, 5), storage_ns=(2, 8))
    elapsed = time.perf_counter() - t0
    diffs = [r["diff"] for r in rows]
    ok = summary["pass"] and all(d == 0 for d in diffs) and summary["cse_storage_constant"] and elapsed < 30
    assert acceptance(2, ok, f"{len(rows)} method/n/h cases, max |diff| {max(abs(d) for d in diffs)}, "
                             f"CSE storage n=2/n=8 {summary['cse_storage_by_n']} in {elapsed:.1f}s")


def test_criterion_3_gradients(acceptance):
    t0 = time.perf_counter()
    worst = summarize(run_all(20))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < TOLERANCE and {"client+aux", "client+server"} <= set(worst) and elapsed < 120
    assert acceptance(3, ok, f"{len(worst)} checks x 20 seeds, max rel error {top:.2e} in {elapsed:.1f}s")


def _dist(a, b):
    va = np.concatenate([x.ravel() for e in a for x in e])
    vb = np.concatenate([x.ravel() for e in b for x in e])
    return float(np.abs(va - vb).max())


def test_criterion_4_oracle_equivalences(acceptance):
    t0 = time.perf_counter()
    train, _, shards = _blobs(0)
    arch = build_mlp_arch(8, 4)
    one = shards[:1]

    # FSL_MC at n=1 against unsplit SGD on the same batches
    mc = run_simulation(arch, RunConfig("fsl_mc", 1, T=5, B=20, lr=LR), train, one)
    x_c, _, x_s = arch.init(0)
    full, steps = x_c + x_s, 0
    from csefsl.data import batches
    for t in range(5):
        for mb in batches(one[0], train, 20, [0, t, 0]):
            _, g, _ = core.loss_and_grads(arch.client_stack + arch.server_stack, full, mb.features, mb.labels)
            full = core.sgd_step(full, g, 0.05)
            steps += 1
    d_mc = _dist(mc.world.x_c + mc.world.servers[0], full)

    an = run_simulation(arch, RunConfig("fsl_an", 1, T=5, B=20, lr=LR), train, one)
    cse = run_simulation(arch, RunConfig("cse_fsl", 1, T=5, B=20, h=1, lr=LR), train, one)
    d_an = _dist(an.world.x_c + an.world.a_c + an.world.servers[0],
                 cse.world.x_c + cse.world.a_c + cse.world.servers[0])

    rng = np.random.default_rng(0)
    queued = [SmashedBatch(rng.normal(size=(20, 16)), rng.integers(0, 4, 20), i, 0, i) for i in range(4)]
    dq, state = DataQueue(), {"p": x_s}
    for s in queued:
        dq.enqueue(s)
    processed = dq.drain(lambda s: state.update(p=server_loss_step(arch, state["p"], s, 0.05)[1]))
    ref = x_s
    for s in queued:
        ref = server_loss_step(arch, ref, s, 0.05)[1]
    d_dq = _dist(state["p"], ref)
    elapsed = time.perf_counter() - t0

    ok = steps == 50 and d_mc < 1e-10 and d_an < 1e-10 and processed == 4 and d_dq == 0.0 and elapsed < 60
    assert acceptance(4, ok, f"MC vs unsplit {d_mc:.1e} over {steps} steps, AN vs CSE(h=1) {d_an:.1e}, "
                             f"drain of {processed} batches vs hand chain {d_dq:.1e}")


def test_criterion_5_convergence(acceptance):
    t0 = time.perf_counter()
    arch = build_mlp_arch(8, 4)
    accs = {"h1": [], "h5": []}
    oc_worse = 0
    for seed in SEEDS:
        train, test, shards = _blobs(seed)

        def run(**kw):
            return run_simulation(arch, RunConfig(n=5, T=50, B=20, lr=LR, seed=seed, **kw), train, shards, test)

        h1 = run(method="cse_fsl", h=1).final_accuracy
        accs["h1"].append(h1)
        accs["h5"].append(run(method="cse_fsl", h=5).final_accuracy)
        oc = run(method="fsl_oc", clip_threshold=math.inf)
        oc_worse += oc.diverged or oc.final_accuracy < h1
    elapsed = time.perf_counter() - t0
    lo = min(min(v) for v in accs.values())
    ok = lo >= 0.90 and elapsed < 300
    # the unclipped-baseline comparison is a soft check: reported, never asserted
    print(f"criterion 5 soft check: unclipped FSL_OC diverged or underperformed CSE_FSL(h=1) on {oc_worse}/10 "
          f"seeds ({'holds' if oc_worse >= 7 else 'does not hold'})")
    assert acceptance(5, ok, f"CSE_FSL min test accuracy over 10 seeds h=1 {min(accs['h1']):.3f}, "
                             f"h=5 {min(accs['h5']):.3f} at T=50; soft OC check {oc_worse}/10 in {elapsed:.0f}s")


def test_criterion_6_communication_ordering(acceptance):
    t0 = time.perf_counter()
    arch = build_mlp_arch(8, 4)
    # three FSL_MC rounds of traffic on this world
    budget = 3 * (2 * 5 * arch.q * 200 + 2 * 5 * arch.param_counts()["client"])
    wins = 0
    for seed in SEEDS:
        train, test, shards = _blobs(seed)
        acc = {}
        for method, h, T in (("fsl_mc", 1, 3), ("fsl_an", 1, 6), ("cse_fsl", 5, 19)):
            r = run_simulation(arch, RunConfig(method, 5, T=T, B=20, h=h, lr=LR, seed=seed), train, shards, test)
            acc[method] = r.accuracy_at_budget(budget)
        wins += acc["cse_fsl"] >= acc["fsl_an"] >= acc["fsl_mc"]
    elapsed = time.perf_counter() - t0
    ok = wins >= 7 and elapsed < 600
    assert acceptance(6, ok, f"CSE(h=5) >= AN >= MC at {budget} units on {wins}/10 seeds")


def test_criterion_7_arrival_order(acceptance):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "synth_arrival.yaml")
    rows, summary = arrival_rows(cfg, 10)
    elapsed = time.perf_counter() - t0
    ok = summary["mean_abs_delta"] < 0.02 and len(rows) == 10 and elapsed < 300
    assert acceptance(7, ok, f"mean |acc ordered - acc random| {summary['mean_abs_delta']:.4f} over 10 seeds "
                             f"in {elapsed:.0f}s")


def test_criterion_8_bounds(acceptance):
    t0 = time.perf_counter()
    unit = dict(L=1.0, G1=1.0, G2=1.0, h=1, n=1, T=100, delta_c=1.0, delta_s=1.0, d_sum=0.0)
    err = max(abs(client_bound(BoundInputs(**unit)) - 0.6), abs(server_bound(BoundInputs(**unit)) - 0.6))
    reports = consistency_check((25, 50, 100))
    consistent = all(r["client"]["consistent"] and r["server"]["consistent"] for r in reports)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-12 and consistent and elapsed < 120
    ratios = ", ".join(f"T={r['T']}: {r['client']['avg_grad_norm_sq']:.3f}<={r['client']['bound']:.3f}"
                       for r in reports)
    assert acceptance(8, ok, f"hand values within {err:.1e}; client consistency {ratios}")


def _same_tree(a: Path, b: Path) -> bool:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files_a != files_b or not files_a:
        return False
    return all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)


def test_criterion_9_determinism(acceptance, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text((CONFIGS / "synth_cse.yaml").read_text().replace("T: 5", "T: 3"))
    arrival = str(CONFIGS / "synth_arrival.yaml")
    commands = [
        ["run", "--config", str(cfg)],
        ["verify-counts"],
        ["verify-table2", "--config", str(cfg)],
        ["sweep", "--config", str(cfg), "--param", "h", "--values", "1,5"],
        ["arrival-study", "--config", arrival, "--seeds", "2"],
        ["gradcheck", "--seeds", "2"],
        ["bounds", "--horizons", "25"],
    ]
    same = []
    for cmd in commands:
        for fmt in ("csv", "json"):
            outs = []
            for rep in ("a", "b"):
                out = tmp_path / f"{cmd[0]}-{fmt}-{rep}"
                code = main(cmd + ["--seed", "7", "--format", fmt, "--out", str(out)])
                outs.append((code, out, capsys.readouterr().out))
            (ca, da, sa), (cb, db, sb) = outs
            same.append(ca == cb and sa == sb and _same_tree(da, db))
    ok = all(same)
    assert acceptance(9, ok, f"{sum(same)}/{len(same)} command/format pairs byte-identical across reruns")
