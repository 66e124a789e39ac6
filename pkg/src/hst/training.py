"""Cross-entropy training loop with AdamW and global gradient-norm clipping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import HstModel, forward
from .tensor import NumericError, Tensor, no_grad

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 100
    clip_norm: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last good parameters."""

    def __init__(self, msg: str, model: HstModel | None = None, history=None):
        super().__init__(msg)
        self.model = model
        self.history = history


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of softmax class-1 probabilities.

    The log arguments are floored at 1e-12; floored entries pass no gradient.
    """
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"labels must be 0 or 1, got {np.unique(y)}")
    z = logits.data
    if z.ndim != 2 or z.shape[1] != 2 or z.shape[0] != y.size:
        raise ValueError(f"need (J, 2) logits for {y.size} labels, got {z.shape}")
    j = y.size
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = log_p[np.arange(j), y.astype(int)]
    floored = picked < math.log(PROB_FLOOR)
    loss = -np.where(floored, math.log(PROB_FLOOR), picked).mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(j), y.astype(int)] -= 1.0
        grad[floored] = 0.0
        return (grad * (g / j),)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float = 0.1) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm/g when their joint L2 norm g exceeds max_norm."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
               cfg: TrainConfig) -> None:
    """In-place AdamW update with decoupled weight decay."""
    state.t += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = (p.data - cfg.lr * update).astype(p.data.dtype)


def predict_proba(model: HstModel, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax probability of class 1 for each image in ``x`` (N, H, W)."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            z = forward(x[i:i + batch_size], model.params, model.cfg).data.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p[:, 1] / p.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def _val_loss(prob: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(prob, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def train_step(model: HstModel, xb: np.ndarray, yb: np.ndarray, state: AdamWState,
               cfg: TrainConfig) -> tuple[float, float]:
    """One forward/backward/clip/update cycle; returns (loss, pre-clip grad norm)."""
    for p in model.params.values():
        p.grad = None
    loss = cross_entropy(forward(xb, model.params, model.cfg), yb)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"loss is {value}")
    loss.backward()
    names = list(model.params)
    raw = [model.params[n].grad if model.params[n].grad is not None else np.zeros_like(model.params[n].data)
           for n in names]
    clipped, norm = clip_grad_norm(raw, cfg.clip_norm)
    adamw_step(model.params, dict(zip(names, clipped)), state, cfg)
    return value, norm


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def to_csv(self, path) -> None:
        cols = ["epoch", "train_loss", "val_f1", "lr", "grad_norm"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"], f"{r['train_loss']:.8f}", f"{r['val_f1']:.8f}",
                            f"{r['lr']:.3e}", f"{r['grad_norm']:.8f}"])


def fit(model: HstModel, train_set: tuple[np.ndarray, np.ndarray], val_set: tuple[np.ndarray, np.ndarray],
        cfg: TrainConfig, threshold: float = 0.5) -> tuple[HstModel, History]:
    """Train ``model`` in place and return (best-validation copy, history).

    The best epoch maximises validation F1, with lower validation loss
    breaking ties. Training stops after ``patience`` epochs without
    improvement or at ``max_epochs``.
    """
    from .evaluation import prf1

    x_tr, y_tr = train_set
    x_va, y_va = val_set
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if cfg.batch_size > len(x_tr):
        raise ValueError(f"batch size {cfg.batch_size} exceeds {len(x_tr)} training samples")
    dtype = model.params["patch_embed.weight"].dtype
    x_tr = np.asarray(x_tr, dtype=dtype)
    x_va = np.asarray(x_va, dtype=dtype)
    y_tr = np.asarray(y_tr, dtype=int)
    y_va = np.asarray(y_va, dtype=int)

    state = AdamWState()
    history = History()
    best = model.copy()
    best_key = (-1.0, -math.inf)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = epoch_permutation(len(x_tr), cfg.seed, epoch)
        losses, norms = [], []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            try:
                loss, norm = train_step(model, x_tr[idx], y_tr[idx], state, cfg)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, history) from exc
            losses.append(loss * len(idx))
            norms.append(norm)
        prob = predict_proba(model, x_va)
        f1 = prf1(prob, y_va, threshold)[2]
        vloss = _val_loss(prob, y_va)
        history.append(epoch=epoch, train_loss=sum(losses) / len(x_tr), val_f1=f1, val_loss=vloss,
                       lr=cfg.lr, grad_norm=float(np.mean(norms)))
        log.debug("epoch %d loss %.4f val_f1 %.3f", epoch, history.rows[-1]["train_loss"], f1)
        key = (f1, -vloss)
        if key > best_key:
            best_key, best, stale = key, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history
