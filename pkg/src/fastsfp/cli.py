"""Command-line entry point: ``fastsfp <command> [options]``.

Every command accepts ``--config FILE`` (``key = value`` lines, ``#`` starts a
comment), ``--set KEY=VALUE`` overrides, ``--out-dir`` and ``--json``.  The
resolved configuration is echoed to ``<out-dir>/config.txt``.

Exit codes: 0 success, 1 usage or input error, 2 failed gradient check.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attention as att
from . import data, gradcheck, metrics, train
from . import sfp as sfp_mod
from .exceptions import FastSfpError, UndefinedMetricError

log = logging.getLogger("fastsfp")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2

PAPER_IN_DIM = 2_097_152
PAPER_OUT_DIM = 512


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config and output helpers
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict:
    items = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def resolve_config(args, flag_items: dict) -> train.RunConfig:
    """Defaults, then the config file, then ``--set``, then dedicated flags."""
    items = read_config_file(args.config) if args.config else {}
    for pair in args.set or []:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        items[key.strip()] = value.strip()
    items.update({k: str(v) for k, v in flag_items.items() if v is not None})
    return train.RunConfig.from_items(items)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_table(out_dir: Path, name: str, rows: list, columns: list, as_json: bool) -> Path:
    path = out_dir / f"{name}.csv"
    path.write_text(csv_text(rows, columns))
    if as_json:
        clean = [{c: (v.item() if isinstance(v, np.generic) else v) for c, v in
                  ((c, row[c]) for c in columns)} for row in rows]
        (out_dir / f"{name}.json").write_text(json.dumps(clean, indent=2) + "\n")
    return path


def echo_config(out_dir: Path, cfg: train.RunConfig, extra: dict = ()) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_items()]
    lines += [f"# {k} = {_fmt(v)}" for k, v in dict(extra).items()]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

ACCOUNTING_COLUMNS = ["r", "exact_params", "nominal_params", "two_stage_flops", "nominal_flops",
                      "relative_to_dense", "within_bound"]


def accounting_rows(in_dim: int, out_dim: int, ranks) -> list:
    rows = []
    for r in ranks:
        cfg = sfp_mod.SfpConfig.from_dims(in_dim, out_dim, r)
        exact, nominal = sfp_mod.param_count(cfg)
        two_stage, nominal_flops, rel = sfp_mod.flops_estimate(cfg)
        rows.append({"r": r, "exact_params": exact, "nominal_params": nominal,
                     "two_stage_flops": two_stage, "nominal_flops": nominal_flops,
                     "relative_to_dense": rel, "within_bound": sfp_mod.within_bound(r, out_dim)})
    return rows


def cmd_accounting(args, out: Path) -> int:
    rows = accounting_rows(args.in_dim, args.out_dim, _int_list(args.rank_list))
    write_table(out, "accounting", rows, ACCOUNTING_COLUMNS, args.json)
    print(csv_text(rows, ACCOUNTING_COLUMNS), end="")
    return EXIT_OK


def cmd_bench(args, out: Path) -> int:
    # wall-clock timings; the only command whose output is not reproducible
    cfg = sfp_mod.SfpConfig.from_dims(args.in_dim, args.out_dim, args.rank)
    rng = np.random.default_rng(args.seed)
    layer = sfp_mod.init_layer(cfg, rng)
    W = sfp_mod.contract_to_dense(layer)
    X = rng.standard_normal((args.batch, args.in_dim))
    rows = []
    for name, fn in (("sfp_forward", lambda: sfp_mod.sfp_forward_batched(layer, X)),
                     ("dense_matmul", lambda: X @ W.T)):
        fn()
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        rows.append({"kernel": name, "in_dim": args.in_dim, "out_dim": args.out_dim,
                     "rank": args.rank, "batch": args.batch, "median_s": float(np.median(times)),
                     "min_s": float(np.min(times))})
    cols = ["kernel", "in_dim", "out_dim", "rank", "batch", "median_s", "min_s"]
    write_table(out, "bench", rows, cols, args.json)
    print(csv_text(rows, cols), end="")
    return EXIT_OK


DISTILL_COLUMNS = ["epoch", "strategy", "lr", "loss", "asp", "daf", "fr", "end_mse"]


def cmd_distill(args, out: Path) -> int:
    cfg = resolve_config(args, {"strategy": args.strategy, "epochs": args.epochs,
                                "n_volumes": args.n_volumes, "seed": args.seed})
    echo_config(out, cfg)
    res = train.run_distillation(cfg)
    write_table(out, f"distill_{cfg.strategy.value}", res.history, DISTILL_COLUMNS, args.json)
    att.save(res.student, out / "student.enc")
    print(f"{cfg.strategy.value}: end_mse {res.history[0]['end_mse']:.6g} -> "
          f"{res.history[-1]['end_mse']:.6g}")
    return EXIT_OK


def run_ablation(cfg: train.RunConfig) -> dict:
    """History per strategy, all on the same data, teacher and student init."""
    train_pairs, eval_pairs = train.default_data(cfg)
    return {s: train.run_distillation(cfg.replace(strategy=s), train_pairs, eval_pairs).history
            for s in train.Strategy}


def ablation_summary(histories: dict) -> list:
    rows = []
    for s, hist in histories.items():
        first, last = hist[0]["end_mse"], hist[-1]["end_mse"]
        rows.append({"strategy": s.value, "initial_end_mse": first, "final_end_mse": last,
                     "reduction": 1.0 - last / first if first else 0.0})
    return rows


def cmd_ablation(args, out: Path) -> int:
    cfg = resolve_config(args, {"epochs": args.epochs, "n_volumes": args.n_volumes,
                                "seed": args.seed})
    echo_config(out, cfg)
    histories = run_ablation(cfg)
    for s, hist in histories.items():
        write_table(out, f"ablation_{s.value}", hist, DISTILL_COLUMNS, args.json)
    summary = ablation_summary(histories)
    cols = ["strategy", "initial_end_mse", "final_end_mse", "reduction"]
    write_table(out, "ablation_summary", summary, cols, args.json)
    print(csv_text(summary, cols), end="")
    return EXIT_OK


CONTRASTIVE_COLUMNS = ["epoch", "lr_sfp", "lr_txt", "siglip"]


def stage_one_student(cfg: train.RunConfig, student_path=None):
    if student_path:
        return att.load(student_path)
    return train.run_distillation(cfg.replace(epochs=cfg.stage1_epochs)).student


def cmd_contrastive(args, out: Path) -> int:
    cfg = resolve_config(args, {"contrastive_epochs": args.epochs, "rank": args.rank,
                                "seed": args.seed, "base_lr": args.base_lr})
    echo_config(out, cfg, {"student": args.student or "stage1"})
    student = stage_one_student(cfg, args.student)
    train_pairs, eval_pairs = train.default_data(cfg)
    res = train.run_contrastive(cfg, student, train_pairs, eval_pairs)
    write_table(out, "contrastive", res.history, CONTRASTIVE_COLUMNS, args.json)
    summary = [{"matched_sim": res.matched_sim, "mismatched_sim": res.mismatched_sim,
                "final_siglip": res.history[-1]["siglip"],
                "chance_siglip": cfg.batch_size * float(np.log(2.0))}]
    write_table(out, "contrastive_summary", summary, list(summary[0]), args.json)
    sfp_mod.save(res.layer, out / "sfp.bin")
    att.save(student, out / "student.enc")
    np.savez(out / "embeddings.npz", **res.embeddings)
    print(csv_text(summary, list(summary[0])), end="")
    return EXIT_OK


def cmd_rank_sweep(args, out: Path) -> int:
    cfg = resolve_config(args, {"contrastive_epochs": args.epochs, "seed": args.seed,
                                "base_lr": args.base_lr})
    ranks = _int_list(args.ranks)
    echo_config(out, cfg, {"ranks": args.ranks})
    student = stage_one_student(cfg, args.student)
    train_pairs, eval_pairs = train.default_data(cfg)
    rows, summary = [], []
    for r in ranks:
        res = train.run_contrastive(cfg.replace(rank=r), student, train_pairs, eval_pairs)
        rows += [{"rank": r, **h} for h in res.history]
        summary.append({"rank": r, "final_siglip": res.history[-1]["siglip"],
                        "matched_sim": res.matched_sim, "mismatched_sim": res.mismatched_sim})
    write_table(out, "rank_sweep", rows, ["rank"] + CONTRASTIVE_COLUMNS, args.json)
    cols = ["rank", "final_siglip", "matched_sim", "mismatched_sim"]
    write_table(out, "rank_sweep_summary", summary, cols, args.json)
    print(csv_text(summary, cols), end="")
    return EXIT_OK


def evaluate_embeddings(emb: dict, threshold_on: str = "val") -> list:
    """Per-label AUROC, weighted F1 and accuracy on the split not used for the threshold."""
    split = np.asarray(emb["split"]).astype(str)
    fit_mask = split == threshold_on
    test_mask = ~fit_mask if fit_mask.any() and (~fit_mask).any() else np.ones_like(fit_mask)
    labels = np.asarray(emb["labels"])
    results = []
    nan = float("nan")
    for k in range(labels.shape[1]):
        score, _ = metrics.contrastive_predict(emb["v_emb"], emb["t_pos"][k], emb["t_neg"][k], 0.0)
        y, s = labels[test_mask, k], score[test_mask]
        row = {"task": f"pattern_{k}", "auroc": nan, "weighted_f1": nan, "accuracy": nan, "tau": nan}
        # a split holding a single class leaves the affected metrics undefined (NaN)
        with contextlib.suppress(UndefinedMetricError):
            row["auroc"] = metrics.auroc(y, s)
        with contextlib.suppress(UndefinedMetricError):
            tau = metrics.youden_threshold(labels[fit_mask, k], score[fit_mask])
            row.update(tau=tau, weighted_f1=metrics.weighted_f1(s > tau, y),
                       accuracy=metrics.accuracy(s > tau, y))
        results.append(row)
    return results


def cmd_eval(args, out: Path) -> int:
    with np.load(args.embeddings) as f:
        emb = {k: f[k] for k in f.files}
    which = {"validation": "val", "val": "val", "test": "test"}[args.threshold_on]
    results = evaluate_embeddings(emb, which)
    text = metrics.report_rows(results)
    (out / "eval.csv").write_text(text)
    if args.json:
        (out / "eval.json").write_text(json.dumps(results, indent=2) + "\n")
    print(text, end="")
    return EXIT_OK


def cmd_gen_data(args, out: Path) -> int:
    shape = tuple(int(s) for s in args.shape.split("x"))
    pairs = data.make_dataset(args.n, args.seed, shape, args.n_labels)
    data.export_dataset(pairs, out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_grad_check(args, out: Path) -> int:
    report = gradcheck.run_suite(args.seeds)
    rows = [{"component": k, "max_rel_error": v, "tolerance": gradcheck.TOLERANCE,
             "passed": v < gradcheck.TOLERANCE} for k, v in report.items()]
    cols = ["component", "max_rel_error", "tolerance", "passed"]
    write_table(out, "grad_check", rows, cols, args.json)
    print(csv_text(rows, cols), end="")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--json", action="store_true", help="mirror every CSV as JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fastsfp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("accounting", parents=[common], help="parameter and FLOP counts")
    a.add_argument("--in-dim", type=int, default=PAPER_IN_DIM)
    a.add_argument("--out-dim", type=int, default=PAPER_OUT_DIM)
    a.add_argument("--rank-list", default="3,4,5,6")
    a.set_defaults(func=cmd_accounting)

    b = sub.add_parser("bench", parents=[common], help="time sfp_forward against dense matmul")
    b.add_argument("--in-dim", type=int, default=4096)
    b.add_argument("--out-dim", type=int, default=256)
    b.add_argument("--rank", type=int, default=6)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("distill", parents=[common], help="stage-1 run for one strategy")
    d.add_argument("--strategy", choices=[s.value for s in train.Strategy])
    d.add_argument("--epochs", type=int)
    d.add_argument("--n-volumes", type=int)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distill)

    ab = sub.add_parser("ablation", parents=[common], help="all five strategies on shared data")
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--n-volumes", type=int)
    ab.add_argument("--seed", type=int)
    ab.set_defaults(func=cmd_ablation)

    c = sub.add_parser("contrastive", parents=[common], help="stage 1 then stage-2 alignment")
    c.add_argument("--epochs", type=int, help="contrastive epochs")
    c.add_argument("--rank", type=int)
    c.add_argument("--base-lr", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--student", help="encoder file to use instead of running stage 1")
    c.set_defaults(func=cmd_contrastive)

    rs = sub.add_parser("rank-sweep", parents=[common], help="stage 2 across several ranks")
    rs.add_argument("--ranks", default="3,4,5,6")
    rs.add_argument("--epochs", type=int, help="contrastive epochs")
    rs.add_argument("--base-lr", type=float)
    rs.add_argument("--seed", type=int)
    rs.add_argument("--student", help="encoder file to use instead of running stage 1")
    rs.set_defaults(func=cmd_rank_sweep)

    e = sub.add_parser("eval", parents=[common], help="metrics over an embeddings file")
    e.add_argument("--embeddings", required=True, help="embeddings.npz from 'contrastive'")
    e.add_argument("--threshold-on", choices=["validation", "val", "test"], default="validation")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-data", parents=[common], help="export a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--shape", default="8x8x8")
    g.add_argument("--n-labels", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suites")
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(func=cmd_grad_check)
    return p


def _thread_limit():
    raw = os.environ.get("SFP_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"SFP_THREADS must be an integer, got {raw!r}") from exc
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            return args.func(args, out)
    except (UsageError, FastSfpError, ValueError, OSError, KeyError) as exc:
        print(f"fastsfp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
