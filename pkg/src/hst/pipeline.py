"""Manifest-to-metrics plumbing shared by the command-line tools."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .dsp import (AudioClip, DspConfig, augment, compute_spectrogram, load_audio, load_spectrogram,
                  prepare_clip, save_spectrogram)
from .evaluation import (FoldPlan, ManifestRecord, MetricsReport, MetricsRow, make_cv_folds,
                         save_fold_plan, score_metrics, write_roc_csv)
from .model import HstModel
from .training import fit, predict_proba

log = logging.getLogger(__name__)

AUGMENT_KINDS = ("amplify", "pitch_speed", "add_noise")


class PrepFailure(RuntimeError):
    """One or more clips could not be turned into spectrograms."""


def num_workers(default: int = 1) -> int:
    raw = os.environ.get("HST_NUM_WORKERS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def cache_key(audio_path, dsp: DspConfig) -> str:
    h = hashlib.sha256(Path(audio_path).read_bytes())
    h.update(json.dumps(dsp.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def audio_to_spectrogram(path, dsp: DspConfig) -> np.ndarray:
    clip = prepare_clip(load_audio(path, dsp.fs), dsp)
    return compute_spectrogram(clip, dsp).values


@dataclass
class PrepResult:
    index: dict[str, dict] = field(default_factory=dict)
    computed: list[str] = field(default_factory=list)
    reused: list[str] = field(default_factory=list)
    excluded: dict[str, str] = field(default_factory=dict)


def _prep_one(args):
    rec_id, path, key, target, dsp = args
    try:
        save_spectrogram(target, audio_to_spectrogram(path, dsp))
        return rec_id, None
    except Exception as exc:  # reported per file, the caller decides
        return rec_id, f"{type(exc).__name__}: {exc}"


def prep(records: Sequence[ManifestRecord], dsp: DspConfig, cache_dir, workers: int = 1) -> PrepResult:
    """Compute spectrogram cache files, skipping entries whose content hash is unchanged."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    index_path = cache / "index.json"
    old = json.loads(index_path.read_text()) if index_path.exists() else {}
    result = PrepResult()
    jobs = []
    for r in records:
        try:
            key = cache_key(r.path, dsp)
        except OSError as exc:
            result.excluded[r.id] = f"{type(exc).__name__}: {exc}"
            continue
        target = cache / f"{r.id}.spec"
        entry = {"file": target.name, "key": key, "label": r.label}
        if old.get(r.id, {}).get("key") == key and target.exists():
            result.index[r.id] = entry
            result.reused.append(r.id)
        else:
            jobs.append((r.id, r.path, key, str(target), dsp))
            result.index[r.id] = entry
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_prep_one, jobs))
    else:
        outcomes = [_prep_one(j) for j in jobs]
    for rec_id, err in outcomes:
        if err is None:
            result.computed.append(rec_id)
        else:
            result.excluded[rec_id] = err
            result.index.pop(rec_id, None)
    index_path.write_text(json.dumps(result.index, indent=1, sort_keys=True))
    if result.excluded:
        (cache / "exclusions.json").write_text(json.dumps(result.excluded, indent=1, sort_keys=True))
    return result


def load_cached(index: dict[str, dict], cache_dir, ids: Sequence[str]) -> np.ndarray:
    return np.stack([load_spectrogram(Path(cache_dir) / index[i]["file"]) for i in ids])


def augmented_spectrograms(records: Sequence[ManifestRecord], count: int, dsp: DspConfig,
                           seed: int) -> np.ndarray:
    """``count`` spectrograms from augmented copies of ``records``, cycling kinds and sources."""
    ss = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(ss.spawn(count)):
        rng = np.random.default_rng(child)
        rec = records[i % len(records)]
        clip = prepare_clip(load_audio(rec.path, dsp.fs), dsp)
        aug = augment(clip, rng, AUGMENT_KINDS[i % len(AUGMENT_KINDS)])
        out.append(compute_spectrogram(AudioClip(aug.samples, aug.fs), dsp).values)
    return np.stack(out) if out else np.zeros((0, dsp.out_size, dsp.out_size))


def balance_training_set(x: np.ndarray, y: np.ndarray, records: Sequence[ManifestRecord],
                         dsp: DspConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class with augmented audio until the classes are equal."""
    counts = np.bincount(y, minlength=2)
    if counts[0] == counts[1]:
        return x, y
    minority = int(np.argmin(counts))
    deficit = int(abs(counts[1] - counts[0]))
    pool = [r for r in records if r.label == minority]
    extra = augmented_spectrograms(pool, deficit, dsp, seed)
    return np.concatenate([x, extra.astype(x.dtype)]), np.concatenate([y, np.full(deficit, minority)])


@dataclass
class FoldOutcome:
    row: MetricsRow
    scores: np.ndarray
    labels: np.ndarray
    test_ids: list[str]


def train_fold(fold_idx: int, plan: FoldPlan, by_id: dict[str, ManifestRecord], index: dict,
               cache_dir, cfg: RunConfig, out_dir) -> FoldOutcome:
    fold = plan[fold_idx]
    fold_dir = Path(out_dir) / f"fold_{fold_idx:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    ids = {k: [i for i in getattr(fold, k) if i in index] for k in ("train", "val", "test")}
    xs = {k: load_cached(index, cache_dir, v) for k, v in ids.items()}
    ys = {k: np.array([by_id[i].label for i in v], dtype=int) for k, v in ids.items()}
    x_tr, y_tr = xs["train"], ys["train"]
    if cfg.eval.balance:
        x_tr, y_tr = balance_training_set(x_tr, y_tr, [by_id[i] for i in ids["train"]], cfg.dsp,
                                          seed=cfg.train.seed * 1000 + fold_idx)
    model = HstModel.create(cfg.model, seed=cfg.train.seed + fold_idx)
    train_cfg = type(cfg.train)(**{**cfg.train.to_dict(), "seed": cfg.train.seed + fold_idx})
    best, history = fit(model, (x_tr, y_tr), (xs["val"], ys["val"]), train_cfg, cfg.eval.threshold)
    history.to_csv(fold_dir / "history.csv")
    save_checkpoint(best.params, best.cfg, fold_dir / "checkpoint.hst", extra={"fold": fold_idx})
    scores = predict_proba(best, xs["test"])
    row, points = score_metrics(scores, ys["test"], fold_idx, cfg.eval.threshold)
    write_roc_csv(fold_dir / "roc.csv", points)
    with open(fold_dir / "scores.csv", "w") as fh:
        fh.write("id,label,score\n")
        for i, lab, s in zip(ids["test"], ys["test"], scores):
            fh.write(f"{i},{lab},{s:.8f}\n")
    return FoldOutcome(row, scores, ys["test"], ids["test"])


def _fold_job(args):
    return train_fold(*args)


def run_cv(records: Sequence[ManifestRecord], cfg: RunConfig, out_dir, cache_dir=None,
           workers: int = 1, skip_bad: bool = False) -> tuple[MetricsReport, list[FoldOutcome]]:
    """Full cross-validation: prep, fold plan, per-fold training and test metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    cache_dir = Path(cache_dir) if cache_dir else out / "cache"
    prepped = prep(records, cfg.dsp, cache_dir, workers)
    if prepped.excluded and not skip_bad:
        first = sorted(prepped.excluded)[0]
        raise PrepFailure(f"{len(prepped.excluded)} file(s) failed preprocessing, e.g. {first}: "
                           f"{prepped.excluded[first]}")
    admitted = [r for r in records if r.id in prepped.index]
    plan = make_cv_folds(admitted, cfg.eval.folds, cfg.eval.ratios, cfg.eval.seed)
    save_fold_plan(out / "folds.json", plan)
    by_id = {r.id: r for r in admitted}
    jobs = [(f, plan, by_id, prepped.index, cache_dir, cfg, out) for f in range(len(plan))]
    report = MetricsReport()
    outcomes: list[FoldOutcome] = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                for o in pool.map(_fold_job, jobs):
                    outcomes.append(o)
                    report.rows.append(o.row)
        else:
            for job in jobs:
                o = _fold_job(job)
                outcomes.append(o)
                report.rows.append(o.row)
                log.info("fold %d: auc %.3f f1 %.3f", o.row.fold, o.row.auc, o.row.f1)
    finally:
        report.to_csv(out / "metrics.csv")
    if len(report.rows) >= 2:
        (out / "summary.txt").write_text(
            "AUC & Precision & Recall & F1\n" + report.table_row() + "\n")
    return report, outcomes
