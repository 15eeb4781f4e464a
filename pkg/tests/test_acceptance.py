"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
pytest terminal summary.  Run directly with ``python3 tests/test_acceptance.py``
to get only the criterion lines.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from fastsfp import cli, gradcheck, metrics, sfp, train  # noqa: E402
from oracles import (auroc_pairs, eq10_loops, random_binary_instance,  # noqa: E402
                     weighted_f1_loops, youden_scan)

PAPER_IN, PAPER_OUT = 2_097_152, 512
RESULTS = {}


def record(n: int, title: str, passed: bool, detail: str, elapsed: float) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d} {title}: {detail} ({elapsed:.2f} s)"
    RESULTS[n] = line
    print(line)
    return passed


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ---------------------------------------------------------------------------
# desk-scale runs shared by criteria 8, 9 and 11
# ---------------------------------------------------------------------------

_RUNS = {}


def _cli_run(kind: str, tag: str) -> tuple[Path, float]:
    key = (kind, tag)
    if key not in _RUNS:
        out = Path(tempfile.mkdtemp(prefix=f"accept_{kind}_{tag}_"))
        t0 = time.perf_counter()
        code = cli.main([kind, "--out-dir", str(out)])
        assert code == 0, f"{kind} exited with {code}"
        _RUNS[key] = (out, time.perf_counter() - t0)
    return _RUNS[key]


def _read(path):
    import csv
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_c01_parameter_accounting():
    with Timer() as t:
        dense = sfp.dense_param_count(PAPER_IN, PAPER_OUT)
        exact, nominal = sfp.param_count(sfp.SfpConfig.from_dims(PAPER_IN, PAPER_OUT, 6))
        formula = 2 * 6 * PAPER_IN * math.sqrt(PAPER_OUT)
        rel = abs(nominal - 569e6) / 569e6
    ok = (dense == 1_073_741_824 and abs(nominal - formula) <= 0.5 and rel <= 0.005
          and t.elapsed < 1.0)
    record(1, "parameter accounting", ok,
           f"dense={dense:,} nominal={nominal:,} ({rel:.3%} from 569M) exact={exact:,}", t.elapsed)
    assert ok


def test_c02_relative_flops():
    with Timer() as t:
        got = {r: sfp.flops_estimate(sfp.SfpConfig.from_dims(PAPER_IN, PAPER_OUT, r))[2]
               for r in (6, 5, 4, 3)}
    want = {6: 0.53, 5: 0.44, 4: 0.35, 3: 0.27}
    worst = max(abs(got[r] - want[r]) for r in want)
    ok = worst <= 0.005 and t.elapsed < 1.0
    record(2, "relative FLOPs table", ok,
           " ".join(f"r={r}:{got[r]:.4f}" for r in want) + f" max|dev|={worst:.4f}", t.elapsed)
    assert ok


def test_c03_efficiency_bound():
    with Timer() as t:
        bound = sfp.efficiency_bound(512)
        r11, r12 = sfp.within_bound(11, 512), sfp.within_bound(12, 512)
    ok = abs(bound - 11.3137084989848) < 1e-12 and r11 and not r12 and t.elapsed < 1.0
    record(3, "efficiency bound", ok, f"bound={bound:.10f} r11={r11} r12={r12}", t.elapsed)
    assert ok


def test_c04_mup_scaling():
    with Timer() as t:
        lr = train.mup_scale_lr(1e-5, PAPER_IN, 4096, 6)
    dev_table = abs(lr - 8.53e-4) / 8.53e-4
    dev_factor = abs(lr / 1e-5 - 85.33) / 85.33
    ok = dev_table <= 1e-3 and dev_factor <= 1e-3 and t.elapsed < 1.0
    record(4, "muP scaling", ok,
           f"lr={lr:.5e} ({dev_table:.3%} from 8.53e-4) factor={lr / 1e-5:.2f}", t.elapsed)
    assert ok


def test_c05_btt_oracle_equivalence():
    worst_loop = worst_dense = 0.0
    with Timer() as t:
        rng = np.random.default_rng(2024)
        for _ in range(50):
            out_dim = int(rng.choice([1, 2, 3, 4, 6, 8, 9, 12, 16]))
            M = int(rng.integers(1, 64 // out_dim + 1))
            cfg = sfp.SfpConfig.from_dims(M * out_dim, out_dim, int(rng.integers(1, 6)))
            layer = sfp.init_layer(cfg, rng)
            x = rng.standard_normal(cfg.in_dim)
            y = sfp.sfp_forward(layer, x)
            worst_loop = max(worst_loop, float(np.max(np.abs(y - eq10_loops(layer, x)))))
            worst_dense = max(worst_dense, float(np.max(np.abs(y - sfp.contract_to_dense(layer) @ x))))
    ok = worst_loop <= 1e-10 and worst_dense <= 1e-8 and t.elapsed < 10.0
    record(5, "BTT oracle equivalence", ok,
           f"50 configs, max|loop diff|={worst_loop:.2e} max|dense diff|={worst_dense:.2e}", t.elapsed)
    assert ok


def test_c06_gradient_suite():
    with Timer() as t:
        report = gradcheck.run_suite(20)
    worst = max(report.values())
    ok = worst < gradcheck.TOLERANCE and t.elapsed < 60.0
    detail = " ".join(f"{k}={v:.1e}" for k, v in report.items())
    record(6, "gradient suite (20 seeds)", ok, detail, t.elapsed)
    assert ok


def test_c07_svd_init_exactness():
    worst = 0.0
    monotone = True
    with Timer() as t:
        rng = np.random.default_rng(7)
        for out_dim, M, r in [(4, 2, 1), (4, 3, 2), (6, 2, 3), (9, 2, 2), (16, 4, 3), (8, 1, 8)]:
            W = np.concatenate([rng.standard_normal((out_dim, r)) @ rng.standard_normal((r, out_dim))
                                for _ in range(M)], axis=1)
            layer = sfp.svd_init(W, sfp.SfpConfig.from_dims(M * out_dim, out_dim, r))
            for x in rng.standard_normal((5, M * out_dim)):
                worst = max(worst, float(np.max(np.abs(sfp.sfp_forward(layer, x) - W @ x))))
        W = rng.standard_normal((9, 36))
        prev = None
        for r in range(1, 10):
            errs = sfp.block_reconstruction_errors(sfp.svd_init(W, sfp.SfpConfig.from_dims(36, 9, r)), W)
            monotone &= prev is None or bool(np.all(errs <= prev + 1e-12))
            prev = errs
    ok = worst <= 1e-8 and monotone and t.elapsed < 10.0
    record(7, "SVD-init exactness", ok,
           f"max|Wx diff|={worst:.2e} per-block error non-increasing in r: {monotone}", t.elapsed)
    assert ok


def test_c08_desk_ablation():
    out, elapsed = _cli_run("ablation", "a")
    rows = {r["strategy"]: r for r in _read(out / "ablation_summary.csv")}
    reductions = {s: float(r["reduction"]) for s, r in rows.items()}
    finals = {s: float(r["final_end_mse"]) for s, r in rows.items()}
    all_halved = all(v >= 0.5 for v in reductions.values())
    ordering = finals["fast_full"] <= finals["naive_kd"]
    ok = all_halved and ordering and elapsed < 600.0
    detail = (f"min reduction={min(reductions.values()):.2%} (all >= 50%: {all_halved}); "
              f"final end MSE fast_full={finals['fast_full']:.6g} vs naive_kd={finals['naive_kd']:.6g} "
              f"(fast_full <= naive_kd: {ordering})")
    record(8, "desk-scale ablation", ok, detail, elapsed)
    assert ok


def test_c09_stage2_separation():
    out, elapsed = _cli_run("contrastive", "a")
    (summary,) = _read(out / "contrastive_summary.csv")
    matched, mismatched = float(summary["matched_sim"]), float(summary["mismatched_sim"])
    final = float(summary["final_siglip"])
    chance = train.RunConfig().batch_size * math.log(2.0)
    ok = matched > mismatched and final < chance and elapsed < 300.0
    record(9, "stage-2 separation", ok,
           f"matched={matched:.4f} mismatched={mismatched:.4f} final SigLIP={final:.4f} "
           f"< B ln2={chance:.4f}", elapsed)
    assert ok


def test_c10_metric_oracles():
    worst = 0.0
    exact = True
    with Timer() as t:
        rng = np.random.default_rng(10)
        for _ in range(200):
            labels, scores = random_binary_instance(rng, 100)
            worst = max(worst, abs(metrics.auroc(labels, scores) - auroc_pairs(labels, scores)))
            preds = scores > np.median(scores)
            worst = max(worst, abs(metrics.weighted_f1(preds, labels)
                                   - weighted_f1_loops(preds.astype(int).tolist(), labels.tolist())))
            exact &= metrics.youden_threshold(labels, scores, return_j=True) == youden_scan(
                labels.tolist(), scores.tolist())
    ok = worst <= 1e-12 and exact and t.elapsed < 10.0
    record(10, "metric oracles", ok,
           f"200 instances, max metric diff={worst:.1e}, Youden (tau, J) exact: {exact}", t.elapsed)
    assert ok


def test_c11_determinism():
    t0 = time.perf_counter()
    mismatched = []
    n_files = 0
    for kind in ("ablation", "contrastive"):
        first, _ = _cli_run(kind, "a")
        second, _ = _cli_run(kind, "b")
        names = sorted(p.name for p in first.glob("*.csv"))
        assert names == sorted(p.name for p in second.glob("*.csv"))
        for name in names:
            n_files += 1
            if (first / name).read_bytes() != (second / name).read_bytes():
                mismatched.append(name)
    ok = not mismatched and n_files > 0
    record(11, "determinism", ok,
           f"{n_files} CSVs compared byte for byte, mismatches: {mismatched or 'none'}",
           time.perf_counter() - t0)
    assert ok


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
