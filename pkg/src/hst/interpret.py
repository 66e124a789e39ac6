"""Grad-CAM relevance maps, group principal components and stage embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import resize_bilinear
from .model import HstModel, forward_features, head_forward, run_stages
from .tensor import Tensor, no_grad


class ZeroVarianceError(ValueError):
    pass


@dataclass
class ActivationMap:
    values: np.ndarray
    sample_id: str = ""
    target_class: int = 1
    flat: bool = False


@dataclass
class StageEmbedding:
    sample_id: str
    stage: int
    vector: np.ndarray


def cam_from_gradients(activation: np.ndarray, gradient: np.ndarray, out_size: int = 224) -> tuple[np.ndarray, bool]:
    """Channel-weighted, rectified activation map upsampled to ``out_size``.

    activation, gradient: (P, P, C). Channel weights are token-averaged
    gradients. Returns (map in [0, 1], flat flag).
    """
    weights = gradient.reshape(-1, gradient.shape[-1]).mean(axis=0)
    cam = np.maximum(activation @ weights, 0.0)
    if cam.shape[0] < 2:
        cam = np.broadcast_to(cam, (2, 2))
    up = np.maximum(resize_bilinear(cam, out_size), 0.0)
    peak = up.max()
    if peak <= 0.0:
        return np.zeros((out_size, out_size)), True
    return up / peak, False


def grad_cam(model: HstModel, spec, target_class: int = 1, stage: int | None = None,
             sample_id: str = "", out_size: int | None = None) -> ActivationMap:
    """Grad-CAM on the output of 1-based ``stage`` (default: last stage, before the head norm)."""
    cfg, params = model.cfg, model.params
    stage = cfg.num_stages if stage is None else stage
    out_size = cfg.img_size if out_size is None else out_size
    with no_grad():
        feat = forward_features(spec, params, cfg, stop=stage)[-1]
    a = Tensor(feat.data.copy(), requires_grad=True)
    tail = run_stages(a, params, cfg, start=stage)
    logits = head_forward(tail[-1] if tail else a, params, cfg.ln_eps)
    logits[0, target_class].backward()
    for p in params.values():
        p.grad = None
    values, flat = cam_from_gradients(a.data[0].astype(np.float64), a.grad[0].astype(np.float64), out_size)
    return ActivationMap(values, sample_id, target_class, flat)


def pca_first_component(maps: Sequence[ActivationMap | np.ndarray]) -> tuple[np.ndarray, float]:
    """First principal component of mean-centred maps and its explained-variance ratio.

    The sign is chosen so the component correlates nonnegatively with the mean map.
    """
    arrs = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    if len(arrs) < 2:
        raise ValueError("PCA needs at least two maps")
    shape = arrs[0].shape
    x = np.stack([a.reshape(-1) for a in arrs])
    mean_map = x.mean(axis=0)
    xc = x - mean_map
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    total = float((sv ** 2).sum())
    if total <= 1e-24:
        raise ZeroVarianceError("all maps are identical")
    pc = vt[0]
    if np.dot(pc - pc.mean(), mean_map - mean_map.mean()) < 0:
        pc = -pc
    return pc.reshape(shape), float(sv[0] ** 2 / total)


def stage_embeddings(model: HstModel, x: np.ndarray, ids: Sequence[str], stage: int,
                     batch_size: int = 16) -> list[StageEmbedding]:
    """Mean-pooled token responses at the end of 1-based ``stage``."""
    if not 1 <= stage <= model.cfg.num_stages:
        raise ValueError(f"stage must be in 1..{model.cfg.num_stages}, got {stage}")
    dtype = model.params["patch_embed.weight"].dtype
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            feat = forward_features(np.asarray(x[i:i + batch_size], dtype=dtype), model.params,
                                    model.cfg, stop=stage)[-1].data
            pooled = feat.reshape(feat.shape[0], -1, feat.shape[-1]).mean(axis=1)
            out += [StageEmbedding(sid, stage, v.astype(np.float64))
                    for sid, v in zip(ids[i:i + batch_size], pooled)]
    return out


def export_stage_embeddings(model: HstModel, x: np.ndarray, ids: Sequence[str], stage: int, path) -> list[StageEmbedding]:
    embs = stage_embeddings(model, x, ids, stage)
    dim = embs[0].vector.size if embs else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "stage", *(f"dim{i}" for i in range(dim))])
        for e in embs:
            w.writerow([e.sample_id, e.stage, *(f"{v:.8g}" for v in e.vector)])
    return embs


def fisher_ratio(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Between-class over within-class scatter (trace form)."""
    v = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    mu = v.mean(axis=0)
    between = within = 0.0
    for c in np.unique(y):
        vc = v[y == c]
        mc = vc.mean(axis=0)
        between += len(vc) * float(((mc - mu) ** 2).sum())
        within += float(((vc - mc) ** 2).sum())
    return between / within if within > 0 else float("inf")


def write_map_csv(path, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.6f")


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM; rows are flipped so low frequencies sit at the bottom."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pix = np.round(scaled[::-1] * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def band_mass_fraction(values: np.ndarray, rows: slice) -> float:
    total = float(np.sum(values))
    return float(np.sum(values[rows])) / total if total > 0 else 0.0
