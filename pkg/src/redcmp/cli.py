"""Command-line pipeline: ``gen`` -> ``train`` -> ``eval`` -> ``report``.

Layout of an output directory::

    run.cfg                       config snapshot (its hash tags every artifact)
    corpora/set-A_clear_seed1.{meta,csv}
    cells/seed1/clear/set-A/L03/  model_{A,B,C}.ckpt, curve_{A,B,C}.csv, curves.svg
    eval/                         loss matrices, per-cell metrics, decode reports
    eval/cells/...                per-model anomaly report + window scores
    report.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (
    RunConfig,
    alphabet_size,
    cell_dir,
    curves_svg,
    job_seeds,
    load_checkpoint,
    read_csv,
    save_checkpoint,
    write_csv,
)
from .corpus import (
    NORMAL_SUBSETS,
    SUBSETS,
    Corpus,
    Subset,
    build_corpus,
    corpus_filenames,
    make_windows,
    parse_set,
    read_corpus,
    read_metadata,
    write_corpus,
)
from .numerics import make_rng
from .red import Variant, red_init, target_offset
from .train import (
    CSV_HEADER,
    TrainingDiverged,
    anomaly_scores,
    calibrate_threshold,
    classify,
    decode_outputs,
    decode_report,
    evaluate_loss_matrix,
    train,
)

log = logging.getLogger("redcmp")

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISMATCH = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5

REPORT_INPUTS = ("run.cfg", "eval/loss_cells.csv", "eval/anomaly_summary.csv", "eval/decode_metrics.csv")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# -- gen -----------------------------------------------------------------


def _corpus_paths(out: Path, set_id: str, subset: Subset, seed: int) -> tuple[Path, Path]:
    meta, data = corpus_filenames(set_id, subset, seed)
    return out / "corpora" / meta, out / "corpora" / data


def _required_corpora(cfg: RunConfig) -> list[tuple[str, Subset, int]]:
    need = []
    for seed in cfg.seeds:
        for d in cfg.datasets:
            need += [(d, s, seed) for s in cfg.train_subsets]
            need += [(d, s, seed + cfg.test_seed_offset) for s in SUBSETS]
    return list(dict.fromkeys(need))


def cmd_gen(out: Path, specs: list[tuple[str, Subset, int]], length: int, sigma: float, prob: float) -> list[Path]:
    written = []
    try:
        (out / "corpora").mkdir(parents=True, exist_ok=True)
        for set_id, subset, seed in specs:
            corpus = build_corpus(set_id, subset, length, seed, sigma, prob)
            meta, data = _corpus_paths(out, set_id, subset, seed)
            write_corpus(corpus, meta, data)
            written += [meta, data]
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write corpus files under {out}: {exc}") from None
    return written


def _load_corpus(out: Path, cfg: RunConfig, set_id: str, subset: Subset, seed: int) -> Corpus:
    meta_path, data_path = _corpus_paths(out, set_id, subset, seed)
    if not (meta_path.exists() and data_path.exists()):
        raise CliError(EXIT_IO, f"missing corpus {meta_path.name}; run `redcmp gen --config ...` first")
    meta = read_metadata(meta_path)
    expected = {"length": str(cfg.length), "noise_sigma": repr(cfg.noise_sigma), "corruption_prob": repr(cfg.corruption_prob)}
    for k, v in expected.items():
        if meta.get(k) != v:
            raise CliError(EXIT_MISMATCH, f"{meta_path.name}: {k}={meta.get(k)} but config says {v}")
    return read_corpus(meta_path, data_path)


# -- train ---------------------------------------------------------------


def _train_cell(args) -> list[str]:
    """Train every variant of one (seed, subset, dataset, L) cell; returns failure notes."""
    out, cfg, (seed, subset, set_id, L), corpus = args
    d = cell_dir(out / "cells", seed, subset, set_id, L)
    d.mkdir(parents=True, exist_ok=True)
    init_seed, shuffle_seed = job_seeds(seed, subset, set_id, L)
    hyper = dataclasses.replace(cfg.hyper, seed=shuffle_seed)
    stride = cfg.stride_for(L)
    curves, failures = {}, []
    for variant in cfg.variants:
        model = red_init(corpus.alphabet_size, cfg.hidden_dim, L, variant, make_rng(init_seed))
        pairs = make_windows(corpus, L, stride, target_offset(variant, L))
        suffix = ""
        try:
            trained, curve = train(model, pairs, hyper, dataset=set_id)
        except TrainingDiverged as exc:
            trained, curve, suffix = exc.model, exc.curve, ".failed"
            failures.append(f"{d}/model_{variant.value}: {exc}")
        losses = curve.losses
        meta = {
            "dataset": set_id,
            "train_subset": subset.value,
            "seed": seed,
            "init_seed": init_seed,
            "shuffle_seed": shuffle_seed,
            "epochs_completed": len(losses),
            "final_loss": repr(losses[-1]) if losses else "nan",
            "config_hash": cfg.hash,
        }
        save_checkpoint(d / f"model_{variant.value}.ckpt{suffix}", trained, meta)
        write_csv(
            d / f"curve_{variant.value}.csv{suffix}",
            ["epoch", "loss"],
            [(k + 1, repr(v)) for k, v in enumerate(losses)],
            cfg.hash,
        )
        curves[variant.value] = losses
    title = f"set-{set_id} ({subset.value}), L={L}, seed {seed}"
    (d / "curves.svg").write_text(curves_svg(curves, title, cfg.hash), encoding="utf-8")
    log.info("trained %s", d)
    return failures


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _check_run_cfg(out: Path, cfg: RunConfig) -> None:
    snap = out / "run.cfg"
    if snap.exists():
        existing = RunConfig.from_text(snap.read_text(encoding="utf-8"))
        if existing.hash != cfg.hash:
            raise CliError(
                EXIT_USAGE, f"{snap} holds a different config (hash {existing.hash}); use a fresh --out"
            )


def cmd_train(out: Path, cfg: RunConfig, jobs: int = 1) -> list[str]:
    _check_run_cfg(out, cfg)
    corpora = {
        (d, s, seed): _load_corpus(out, cfg, d, s, seed)
        for seed in cfg.seeds
        for d in cfg.datasets
        for s in cfg.train_subsets
    }
    try:
        (out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    items = [(out, cfg, cell, corpora[(cell[2], cell[1], cell[0])]) for cell in cfg.cells()]
    failures = [f for res in _map(_train_cell, items, jobs) for f in res]
    for f in failures:
        log.error("diverged: %s", f)
    return failures


# -- eval ----------------------------------------------------------------


def _load_cell_models(out: Path, cfg: RunConfig, cell) -> dict[Variant, object]:
    seed, subset, set_id, L = cell
    d = cell_dir(out / "cells", seed, subset, set_id, L)
    models = {}
    for variant in cfg.variants:
        path = d / f"model_{variant.value}.ckpt"
        if not path.exists():
            raise CliError(EXIT_MISSING, f"missing checkpoint {path}")
        try:
            model, _ = load_checkpoint(path)
        except ValueError as exc:
            raise CliError(EXIT_MISMATCH, str(exc)) from None
        want = (alphabet_size(set_id), cfg.hidden_dim, L, variant)
        got = (model.alphabet_size, model.hidden_dim, model.seq_len, model.variant)
        if got != want:
            raise CliError(
                EXIT_MISMATCH,
                f"checkpoint {path} has (alphabet, hidden, L, variant)={got}, config expects {want}",
            )
        models[variant] = model
    return models


def _eval_cell(args) -> dict:
    out, cfg, cell, models, train_corpus, test_corpora = args
    seed, subset, set_id, L = cell
    stride = cfg.stride_for(L)
    key = [seed, subset.value, f"set-{set_id}", L]
    result = {"subset": subset, "loss": [], "anomaly": [], "decode": [], "rows": []}

    by_ds = {(set_id, v): m for v, m in models.items()}
    train_matrix = evaluate_loss_matrix(by_ds, {(set_id, subset): train_corpus}, L, stride, {subset.value: [subset]})
    test_matrix = evaluate_loss_matrix(by_ds, {(set_id, s): c for s, c in test_corpora.items()}, L, stride)
    for split, matrix in (("train", train_matrix), ("test", test_matrix)):
        for (_, cls), cells in matrix.rows.items():
            result["loss"].append(key + [split, cls] + [_f(cells.get(v, math.nan)) for v in Variant])

    ed = cell_dir(out / "eval" / "cells", seed, subset, set_id, L)
    ed.mkdir(parents=True, exist_ok=True)
    for variant, model in models.items():
        offset = target_offset(variant, L)
        train_scores = anomaly_scores(model, make_windows(train_corpus, L, stride, offset))
        tau = calibrate_threshold(train_scores, cfg.percentile)
        windows = {s: make_windows(test_corpora[s], L, stride, offset) for s in SUBSETS}
        scores = {s: anomaly_scores(model, w) for s, w in windows.items()}
        all_scores = np.concatenate([scores[s] for s in SUBSETS])
        labels = np.concatenate([np.full(len(scores[s]), int(s.abnormal)) for s in SUBSETS])
        report = classify(all_scores, tau, labels)
        (ed / f"anomaly_{variant.value}.txt").write_text(
            f"config_hash: {cfg.hash}\nmodel: {variant.value}\n" + report.to_text(), encoding="utf-8"
        )
        write_csv(
            ed / f"scores_{variant.value}.csv",
            ["window", "subset", "label", "score", "flagged"],
            [
                (k, s.value, int(s.abnormal), repr(float(v)), int(v > tau))
                for s in SUBSETS
                for k, v in enumerate(scores[s])
            ],
            cfg.hash,
        )
        result["anomaly"].append(
            key + [variant.value, repr(tau), _f(report.precision), _f(report.recall), _f(report.f1),
                   "absent" if report.auc is None else _f(report.auc),
                   _f(report.class_means["normal"]), _f(report.class_means["abnormal"])]
        )

        decoded = {s: decode_outputs(model, windows[s]) for s in NORMAL_SUBSETS}
        targets = {s: np.stack([w.Y.argmax(axis=-1) for w in windows[s]]) for s in NORMAL_SUBSETS}
        acc = {s: float(np.mean(decoded[s] == targets[s])) for s in NORMAL_SUBSETS}
        n = min(len(decoded[Subset.CLEAR]), len(decoded[Subset.NOISE]))
        agree = float(np.mean(np.all(decoded[Subset.CLEAR][:n] == decoded[Subset.NOISE][:n], axis=1)))
        result["decode"].append(
            key + [variant.value, _f(acc[Subset.CLEAR]), _f(acc[Subset.NOISE]), _f(agree), n]
        )
        for s in SUBSETS:
            for row in decode_report(model, windows[s], cfg.decode_samples, s.value):
                result["rows"].append((seed, set_id, L, variant.value, row))
    log.info("evaluated %s", ed)
    return result


def _f(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def cmd_eval(out: Path, cfg: RunConfig, jobs: int = 1) -> None:
    items = []
    corpora_cache: dict = {}

    def corpus(d, s, seed):
        if (d, s, seed) not in corpora_cache:
            corpora_cache[(d, s, seed)] = _load_corpus(out, cfg, d, s, seed)
        return corpora_cache[(d, s, seed)]

    for cell in cfg.cells():
        seed, subset, set_id, L = cell
        models = _load_cell_models(out, cfg, cell)
        test = {s: corpus(set_id, s, seed + cfg.test_seed_offset) for s in SUBSETS}
        items.append((out, cfg, cell, models, corpus(set_id, subset, seed), test))

    ev = out / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    results = _map(_eval_cell, items, jobs)
    h = cfg.hash
    key = ["seed", "train_subset", "dataset", "seq_len"]
    write_csv(ev / "loss_cells.csv", key + ["split", "class", "model_a", "model_b", "model_c"],
              [r for res in results for r in res["loss"]], h)
    write_csv(ev / "anomaly_summary.csv",
              key + ["variant", "threshold", "precision", "recall", "f1", "auc", "normal_mean", "abnormal_mean"],
              [r for res in results for r in res["anomaly"]], h)
    write_csv(ev / "decode_metrics.csv",
              key + ["variant", "clear_accuracy", "noise_accuracy", "clear_noise_agreement", "n_windows"],
              [r for res in results for r in res["decode"]], h)

    # Table analogues: mean over seeds and sequence lengths.
    for subset in cfg.train_subsets:
        for split in ("train", "test"):
            acc: dict[tuple[str, str], list[list[float]]] = {}
            for res in results:
                for r in res["loss"]:
                    if r[1] == subset.value and r[4] == split:
                        acc.setdefault((r[2], r[5]), []).append([float(x) for x in r[6:9]])
            rows = [[d, c] + [_f(float(np.mean(col))) for col in np.array(v).T] for (d, c), v in acc.items()]
            write_csv(ev / f"loss_{split}_{subset.value}.csv", CSV_HEADER, rows, h)

    for subset in cfg.train_subsets:
        lines = [f"# config_hash: {h}", f"# decoded test windows, models trained on '{subset.value}'",
                 "# seed  dataset  L  model  subset  input  output  ground-truth  loss"]
        for res in results:
            if res["subset"] is not subset:
                continue
            for seed, set_id, L, variant, row in res["rows"]:
                lines.append(f"{seed}  set-{set_id}  {L}  Model-{variant}  {row.format()}")
        (ev / f"decode_report_{subset.value}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- report --------------------------------------------------------------


def _by(rows, *keys):
    out: dict = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def build_report(out: Path) -> str:
    missing = [name for name in REPORT_INPUTS if not (out / name).exists()]
    if missing:
        raise CliError(EXIT_MISSING, "missing artifacts: " + ", ".join(missing))
    cfg = RunConfig.from_text((out / "run.cfg").read_text(encoding="utf-8"))
    tables = {}
    for name in REPORT_INPUTS[1:]:
        h, rows = read_csv(out / name)
        if h != cfg.hash:
            raise CliError(EXIT_MISSING, f"{name} was produced by config {h}, run.cfg is {cfg.hash}")
        tables[name] = rows
    loss, anomaly, decode = (tables[n] for n in REPORT_INPUTS[1:])
    n_seeds = len(cfg.seeds)
    need = math.ceil(0.8 * n_seeds)
    lines = [f"config_hash: {cfg.hash}", f"seeds: {','.join(map(str, cfg.seeds))}", ""]

    # 1. Model-C has the lowest training loss in every (dataset, training subset) row.
    detail, ok = [], True
    train_rows = [r for r in loss if r["split"] == "train"]
    for (subset, dataset), rows in sorted(_by(train_rows, "train_subset", "dataset").items()):
        wins = 0
        for _, seed_rows in _by(rows, "seed").items():
            m = {v: np.mean([float(r[f"model_{v.lower()}"]) for r in seed_rows]) for v in "ABC"}
            wins += m["C"] < m["A"] and m["C"] < m["B"]
        ok &= wins >= need
        detail.append(f"    {dataset} ({subset}): Model-C lowest in {wins}/{n_seeds} seeds")
    lines.append(f"claim c_lowest_training_loss: {'PASS' if ok else 'FAIL'}  (need >= {need}/{n_seeds} per row)")
    lines += detail

    # 2. Abnormal class scores above the normal class everywhere; Model-C AUC > 0.8 at L in {3, 8}.
    test_rows = [r for r in loss if r["split"] == "test"]
    bad = []
    for k, rows in sorted(_by(test_rows, "seed", "train_subset", "dataset", "seq_len").items()):
        by_cls = {r["class"]: r for r in rows}
        for v in "abc":
            if not float(by_cls["abnormal"][f"model_{v}"]) > float(by_cls["normal"][f"model_{v}"]):
                bad.append(f"seed {k[0]} {k[1]} {k[2]} L={k[3]} Model-{v.upper()}")
    auc_rows = [r for r in anomaly if r["variant"] == "C" and r["seq_len"] in ("3", "8")]
    low_auc = [r for r in auc_rows if r["auc"] == "absent" or not float(r["auc"]) > 0.8]
    ok = not bad and not low_auc and bool(auc_rows)
    lines.append(f"claim abnormal_above_normal: {'PASS' if ok else 'FAIL'}")
    lines.append(f"    abnormal > normal in {len(test_rows) // 2 * 3 - len(bad)}/{len(test_rows) // 2 * 3} model cells")
    lines += [f"    not separated: {b}" for b in bad]
    for (subset, dataset, L), rows in sorted(_by(auc_rows, "train_subset", "dataset", "seq_len").items()):
        aucs = [r["auc"] for r in rows]
        lines.append(f"    Model-C AUC {dataset} ({subset}) L={L}: min {min(aucs)} over {len(aucs)} seeds")

    # 3. Set-C at L=8: Model-C decodes clear windows >= 20 points better than Model-A.
    rows = [r for r in decode if r["dataset"] == "set-C" and r["seq_len"] == "8" and r["train_subset"] == "clear"]
    per_seed = _by(rows, "seed")
    if not per_seed:
        lines.append("claim setc_async_model_a_degrades: SKIP  (no set-C L=8 clear cells in this run)")
    else:
        wins, detail = 0, []
        for (seed,), rs in sorted(per_seed.items()):
            acc = {r["variant"]: float(r["clear_accuracy"]) for r in rs}
            gap = acc.get("C", math.nan) - acc.get("A", math.nan)
            wins += gap >= 0.20
            detail.append(f"    seed {seed}: Model-C {acc.get('C', math.nan):.4f} vs Model-A {acc.get('A', math.nan):.4f}")
        need_s = math.ceil(0.8 * len(per_seed))
        lines.append(
            f"claim setc_async_model_a_degrades: {'PASS' if wins >= need_s else 'FAIL'}"
            f"  (gap >= 0.20 in {wins}/{len(per_seed)} seeds)"
        )
        lines += detail

    # 4. Model-C trained on noise decodes clear and noisy windows identically.
    rows = [r for r in decode if r["variant"] == "C" and r["train_subset"] == "noise"]
    if not rows:
        lines.append("claim noise_robustness: SKIP  (no noise-trained Model-C cells in this run)")
    else:
        detail, ok = [], True
        for (dataset,), rs in sorted(_by(rows, "dataset").items()):
            n = sum(int(r["n_windows"]) for r in rs)
            same = sum(float(r["clear_noise_agreement"]) * int(r["n_windows"]) for r in rs)
            frac = same / n
            ok &= frac >= 0.95
            detail.append(f"    {dataset}: identical decodes on {frac:.4f} of {n} windows")
        lines.append(f"claim noise_robustness: {'PASS' if ok else 'FAIL'}")
        lines += detail
    return "\n".join(lines) + "\n"


def cmd_report(out: Path) -> str:
    text = build_report(out)
    (out / "report.txt").write_text(text, encoding="utf-8")
    return text


# -- argument parsing ----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--out", default=d, help="output directory (default: $REDCMP_OUT or ./redcmp-out)")
    p.add_argument("--seed", type=int, default=d, help="seed (gen) / single-seed override (train, eval)")
    p.add_argument("--config", default=d, help="key=value run configuration file")
    p.add_argument("--jobs", type=int, default=d, help="worker processes (default: number of CPUs)")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="redcmp", description="Compare RNN encoder-decoder variants for anomaly detection.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="write synthetic corpora")
    _global_flags(gen, suppress=True)
    gen.add_argument("--set", dest="set_id", help="dataset A, B or C (omit with --config to generate all)")
    gen.add_argument("--subset", default="clear", help="clear, noise, abnormal or abnoise")
    gen.add_argument("--length", type=int, default=None)

    tr = sub.add_parser("train", help="train every grid cell of the config")
    _global_flags(tr, suppress=True)
    tr.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")

    ev = sub.add_parser("eval", help="evaluate trained checkpoints")
    _global_flags(ev, suppress=True)

    rp = sub.add_parser("report", help="summarize claims from eval artifacts")
    _global_flags(rp, suppress=True)
    return parser


def _resolve_config(args, out: Path) -> RunConfig:
    try:
        if args.config:
            cfg = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
        elif (out / "run.cfg").exists() and args.command != "gen":
            cfg = RunConfig.from_text((out / "run.cfg").read_text(encoding="utf-8"))
        else:
            cfg = RunConfig()
        if args.seed is not None and args.command != "gen":
            cfg = cfg.replace(seeds=(args.seed,))
        if getattr(args, "epochs", None) is not None:
            cfg = cfg.replace(epochs=args.epochs)
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from None
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    out = Path(args.out or os.environ.get("REDCMP_OUT") or "redcmp-out")
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)
    try:
        if args.command == "gen":
            if args.set_id:
                try:
                    specs = [(parse_set(args.set_id), Subset.parse(args.subset), 42 if args.seed is None else args.seed)]
                except ValueError as exc:
                    raise CliError(EXIT_USAGE, str(exc)) from None
                cfg = _resolve_config(args, out) if args.config else RunConfig()
                length = args.length or cfg.length
                written = cmd_gen(out, specs, length, cfg.noise_sigma, cfg.corruption_prob)
            else:
                cfg = _resolve_config(args, out)
                written = cmd_gen(out, _required_corpora(cfg), args.length or cfg.length,
                                  cfg.noise_sigma, cfg.corruption_prob)
            for p in written:
                print(p)
            return 0
        cfg = _resolve_config(args, out)
        if args.command == "train":
            failures = cmd_train(out, cfg, jobs)
            return EXIT_DIVERGED if failures else 0
        if args.command == "eval":
            snap = out / "run.cfg"
            if not snap.exists():
                raise CliError(EXIT_MISSING, f"{snap} not found; train first")
            trained = RunConfig.from_text(snap.read_text(encoding="utf-8"))
            if trained.hash != cfg.hash:
                raise CliError(EXIT_MISMATCH, f"config hash {cfg.hash} does not match trained run {trained.hash}")
            cmd_eval(out, cfg, jobs)
            return 0
        if args.command == "report":
            sys.stdout.write(cmd_report(out))
            return 0
    except CliError as exc:
        print(f"redcmp: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
