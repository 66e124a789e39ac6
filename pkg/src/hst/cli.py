"""Command-line entry point: ``hst <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .bench import mac_ratio, run_bench, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfigError, load_run_config, parse_override
from .dsp import DspConfigError, IngestionError
from .evaluation import (DegenerateTestError, ManifestError, MetricsReport, StratificationError,
                         UndefinedMetricError, make_cv_folds, read_manifest, score_metrics,
                         wilcoxon_signed_rank, write_roc_csv)
from .interpret import export_stage_embeddings, grad_cam, pca_first_component, write_map_csv, write_pgm
from .model import ConfigError, HstModel, count_params
from .pipeline import PrepFailure, balance_training_set, load_cached, num_workers, prep, run_cv
from .synth import SynthSpec, generate_corpus
from .training import TrainingDiverged, fit, predict_proba

log = logging.getLogger("hst")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

EXIT_HELP = """exit codes:
  0  all requested work completed
  1  unexpected internal error
  2  bad configuration or command-line usage
  3  data problem (manifest, audio ingestion, stratification, degenerate test set)
  4  training diverged (non-finite loss or gradient)
  5  checkpoint missing, corrupt or incompatible with the config
"""

REFERENCE_BASE_PARAMS = 50_000_000

# Cambridge-format manifests tag each record's cohort in ``group``
TASK_GROUPS = {
    1: ("covid", "non-covid-asymptomatic"),
    2: ("covid", "non-covid-symptomatic"),
}


class DataError(RuntimeError):
    pass


def _overrides(items) -> dict:
    return dict(parse_override(s) for s in items or [])


def _config(args):
    return load_run_config(args.config, _overrides(args.set))


def _records(args):
    recs = read_manifest(args.manifest)
    if getattr(args, "modality", None):
        recs = [r for r in recs if r.modality == args.modality]
    wanted = set()
    if getattr(args, "groups", None):
        wanted |= set(args.groups.split(","))
    if getattr(args, "task", None):
        wanted |= set(TASK_GROUPS[args.task])
    if wanted:
        recs = [r for r in recs if r.group in wanted]
    if not recs:
        raise DataError("no manifest records left after filtering")
    return recs


def _run_dir(path, cfg=None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    if cfg is not None:
        cfg.dump(out / "config.yaml")
    return out


def cmd_synth(args) -> int:
    spec = SynthSpec(n_per_class=args.n_per_class, seed=args.seed, separable=not args.non_separable)
    recs = generate_corpus(spec, args.out)
    print(f"wrote {len(recs)} clips and {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_prep(args) -> int:
    cfg = _config(args)
    recs = _records(args)
    res = prep(recs, cfg.dsp, args.cache_dir, num_workers())
    print(f"computed {len(res.computed)}, reused {len(res.reused)}, excluded {len(res.excluded)}")
    for rid, why in sorted(res.excluded.items()):
        log.warning("excluded %s: %s", rid, why)
    if res.excluded and not args.skip_bad:
        raise DataError(f"{len(res.excluded)} file(s) failed; rerun with --skip-bad to exclude them")
    return EXIT_OK


def _fold_arrays(recs, cfg, cache_dir, fold_idx):
    res = prep(recs, cfg.dsp, cache_dir, num_workers())
    if res.excluded:
        raise DataError(f"{len(res.excluded)} file(s) failed preprocessing; run prep --skip-bad first")
    plan = make_cv_folds(recs, cfg.eval.folds, cfg.eval.ratios, cfg.eval.seed)
    fold = plan[fold_idx]
    by_id = {r.id: r for r in recs}
    arrays = {}
    for k in ("train", "val", "test"):
        ids = getattr(fold, k)
        arrays[k] = (load_cached(res.index, cache_dir, ids), np.array([by_id[i].label for i in ids]), ids)
    return arrays, by_id


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _run_dir(args.out, cfg)
    recs = _records(args)
    arrays, by_id = _fold_arrays(recs, cfg, args.cache_dir or out / "cache", args.fold)
    x_tr, y_tr, ids_tr = arrays["train"]
    if cfg.eval.balance:
        x_tr, y_tr = balance_training_set(x_tr, y_tr, [by_id[i] for i in ids_tr], cfg.dsp,
                                          seed=cfg.train.seed * 1000 + args.fold)
    model = HstModel.create(cfg.model, seed=cfg.train.seed + args.fold)
    best, history = fit(model, (x_tr, y_tr), arrays["val"][:2], cfg.train, cfg.eval.threshold)
    history.to_csv(out / "history.csv")
    save_checkpoint(best.params, best.cfg, out / "checkpoint.hst", extra={"fold": args.fold})
    print(f"trained {len(history.rows)} epochs; checkpoint at {out / 'checkpoint.hst'}")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _config(args)
    recs = _records(args)
    out = _run_dir(args.out)
    report, _ = run_cv(recs, cfg, out, cache_dir=args.cache_dir, workers=num_workers(),
                       skip_bad=args.skip_bad)
    print("AUC & Precision & Recall & F1")
    print(report.table_row(args.digits))
    return EXIT_OK


def _load_model(path, cfg, explicit: bool):
    """Checkpoint model; without an explicit config the spectrogram size follows the checkpoint."""
    params, ckpt_cfg = load_checkpoint(path, cfg.model if explicit else None)
    if not explicit:
        cfg.dsp = dataclasses.replace(cfg.dsp, out_size=ckpt_cfg.img_size)
    return HstModel(ckpt_cfg, params)


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint, cfg, bool(args.config))
    out = _run_dir(args.out, cfg)
    recs = _records(args)
    res = prep(recs, cfg.dsp, args.cache_dir or out / "cache", num_workers())
    ids = [r.id for r in recs if r.id in res.index]
    x = load_cached(res.index, args.cache_dir or out / "cache", ids)
    y = np.array([r.label for r in recs if r.id in res.index])
    scores = predict_proba(model, x)
    row, points = score_metrics(scores, y, 0, cfg.eval.threshold)
    write_roc_csv(out / "roc.csv", points)
    MetricsReport([row]).to_csv(out / "metrics.csv")
    print(f"AUC {row.auc:.4f}  precision {row.precision:.4f}  recall {row.recall:.4f}  F1 {row.f1:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint, cfg, bool(args.config))
    out = _run_dir(args.out, cfg)
    recs = _records(args)
    cache = args.cache_dir or out / "cache"
    res = prep(recs, cfg.dsp, cache, num_workers())
    recs = [r for r in recs if r.id in res.index]
    x = load_cached(res.index, cache, [r.id for r in recs])
    prob = predict_proba(model, x)
    pred = (prob >= cfg.eval.threshold).astype(int)
    stage = args.stage or cfg.eval.gradcam_stage
    groups = defaultdict(list)
    (out / "maps").mkdir(exist_ok=True)
    for i, r in enumerate(recs):
        if pred[i] != r.label:
            continue
        amap = grad_cam(model, x[i:i + 1], target_class=r.label, stage=stage, sample_id=r.id)
        write_map_csv(out / "maps" / f"{r.id}.csv", amap.values)
        write_pgm(out / "maps" / f"{r.id}.pgm", amap.values)
        groups[r.group or f"label{r.label}"].append(amap)
    summary = {}
    for name in sorted({r.group or f"label{r.label}" for r in recs}):
        maps = groups.get(name, [])
        if len(maps) < 2:
            log.warning("group %s: %d correctly classified sample(s), PC1 skipped", name, len(maps))
            continue
        pc, ratio = pca_first_component(maps)
        write_map_csv(out / f"pc1_{name}.csv", pc)
        write_pgm(out / f"pc1_{name}.pgm", pc)
        summary[name] = {"n": len(maps), "explained_variance": ratio}
    if args.embeddings_stage:
        export_stage_embeddings(model, x, [r.id for r in recs], args.embeddings_stage, out / "embeddings.csv")
    (out / "explain.json").write_text(json.dumps({"stage": stage, "groups": summary}, indent=1))
    print(f"{sum(len(v) for v in groups.values())} maps, {len(summary)} group PC1 maps in {out}")
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    grid = [(p, m) for p in args.p for m in args.m]
    rows = run_bench(grid, args.variants.split(","), repeats=args.repeats, max_global_p=args.max_global_p)
    write_bench_csv(args.out, rows)
    for r in rows:
        print(f"P={r.p:3d} M={r.m} {r.variant:5s} {r.mode:8s} MACs={r.attention_macs:>14,d} "
              f"t={r.seconds * 1e3:8.2f} ms peak={r.peak_bytes / 2 ** 20:8.2f} MiB")
    print(f"base parameters: {count_params(load_run_config().model):,} (reference {REFERENCE_BASE_PARAMS // 10 ** 6} M)")
    p, m = grid[0]
    print(f"score MAC ratio windowed/global at P={p}, M={m}: {mac_ratio(p, m, 1)}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = MetricsReport.from_csv(args.a)
    b = MetricsReport.from_csv(args.b)
    if [r.fold for r in a.rows] != [r.fold for r in b.rows]:
        raise DataError("the two metrics files cover different folds")
    res = wilcoxon_signed_rank([getattr(r, args.metric) for r in a.rows],
                               [getattr(r, args.metric) for r in b.rows])
    print(f"{args.metric}: W+={res.statistic:g} p={res.pvalue:.4g} n={res.n} ({res.method})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hst", description="Spectrogram transformer for respiratory-sound screening.",
                                     epilog=EXIT_HELP + "\nHST_NUM_WORKERS caps worker processes for prep and cv.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if manifest:
            p.add_argument("--manifest", required=True)
            p.add_argument("--modality", choices=("cough", "breath", "unknown"))
            p.add_argument("--groups", help="comma-separated group tags to keep")
            p.add_argument("--cache-dir")

    p = sub.add_parser("synth", help="generate a synthetic two-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--non-separable", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="compute the spectrogram cache")
    common(p)
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train one fold and save its checkpoint")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="full cross-validation with per-fold metrics")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-bad", action="store_true")
    p.add_argument("--digits", type=int, default=2)
    p.add_argument("--task", type=int, choices=sorted(TASK_GROUPS),
                   help="Cambridge task: 1 = covid vs non-covid-asymptomatic, 2 = covid vs non-covid-symptomatic")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="score a manifest with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM maps and group PC1 maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int)
    p.add_argument("--embeddings-stage", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("bench-attn", help="windowed vs global attention cost")
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=int, nargs="+", default=[14, 28, 56])
    p.add_argument("--m", type=int, nargs="+", default=[7])
    p.add_argument("--variants", default="small,base,large")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--max-global-p", type=int, default=56)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("compare", help="Wilcoxon signed-rank test between two metrics CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", default="auc", choices=("auc", "precision", "recall", "f1"))
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RunConfigError, ConfigError, DspConfigError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (DataError, PrepFailure, ManifestError, IngestionError, StratificationError, UndefinedMetricError,
            DegenerateTestError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("unexpected failure")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
