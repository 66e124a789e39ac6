"""Hierarchical spectrogram transformer with local windowed attention.

Feature maps are tensors of shape (B, P, P, C): batch, token-grid rows
(frequency), token-grid columns (time), channels. Parameters live in a flat
``dict[str, Tensor]`` keyed by dotted names, e.g.
``stages.2.blocks.4.attn2.q``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9

VARIANTS = {
    "small": dict(depths=(1, 1, 3, 1), dims=(96, 192, 384, 768), heads=(3, 6, 12, 24)),
    "base": dict(depths=(1, 1, 9, 1), dims=(96, 192, 384, 768), heads=(3, 6, 12, 24)),
    "large": dict(depths=(1, 1, 9, 1), dims=(128, 256, 512, 1024), heads=(4, 8, 16, 32)),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HstConfig:
    variant: str = "base"
    img_size: int = 224
    patch_size: int = 4
    window_size: int = 7
    depths: tuple[int, ...] = (1, 1, 9, 1)
    dims: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: int = 4
    num_classes: int = 2
    shift_mask: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        self.validate()

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> HstConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(variant=variant, **{**VARIANTS[variant], **overrides})

    @classmethod
    def micro(cls, **overrides) -> HstConfig:
        """Tiny configuration for oracle, gradient and learnability tests."""
        base = dict(variant="micro", img_size=64, patch_size=4, window_size=2,
                    depths=(1, 1, 1, 1), dims=(8, 16, 32, 64), heads=(2, 2, 2, 2))
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("depths", "dims", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HstConfig:
        return cls(**d)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def grid(self, stage: int) -> int:
        """Token-grid side length at 0-based ``stage``."""
        return self.img_size // self.patch_size // (2 ** stage)

    def window(self, stage: int) -> int:
        return min(self.window_size, self.grid(stage))

    def shift(self, stage: int) -> int:
        # a single window covering the whole grid has nothing to shift across
        return 0 if self.grid(stage) <= self.window_size else self.window_size // 2

    def validate(self) -> None:
        n = len(self.depths)
        if not (len(self.dims) == len(self.heads) == n):
            raise ConfigError("depths, dims and heads need one entry per stage")
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch {self.patch_size}")
        for s in range(n):
            p = self.img_size // self.patch_size // (2 ** s)
            if p < 1 or (s < n - 1 and p % 2):
                raise ConfigError(f"stage {s + 1} grid {p} cannot be merged 2x2")
            w = min(self.window_size, p)
            if p % w:
                raise ConfigError(f"stage {s + 1} grid {p} not divisible by window {w}")
            if self.dims[s] % self.heads[s]:
                raise ConfigError(f"stage {s + 1}: {self.dims[s]} channels not divisible by {self.heads[s]} heads")
            if s and self.dims[s] != 2 * self.dims[s - 1]:
                raise ConfigError("patch merging doubles channel width; dims must double per stage")


# -- parameters -------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(cfg: HstConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    patch_dim = cfg.patch_size ** 2
    shapes["patch_embed.weight"] = (patch_dim, cfg.dims[0])
    shapes["patch_embed.bias"] = (cfg.dims[0],)
    for s, (depth, c, h) in enumerate(zip(cfg.depths, cfg.dims, cfg.heads)):
        if s:
            prev = cfg.dims[s - 1]
            shapes[f"stages.{s}.merge.weight"] = (4 * prev, c)
            shapes[f"stages.{s}.merge.bias"] = (c,)
        table = (2 * cfg.window(s) - 1) ** 2
        hidden = cfg.mlp_ratio * c
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            for unit in (1, 2):
                shapes[f"{pre}.norm_attn{unit}.weight"] = (c,)
                shapes[f"{pre}.norm_attn{unit}.bias"] = (c,)
                for proj in ("q", "k", "v"):
                    shapes[f"{pre}.attn{unit}.{proj}"] = (c, c)
                shapes[f"{pre}.attn{unit}.proj.weight"] = (c, c)
                shapes[f"{pre}.attn{unit}.proj.bias"] = (c,)
                shapes[f"{pre}.attn{unit}.rel_bias"] = (table, h)
                shapes[f"{pre}.norm_mlp{unit}.weight"] = (c,)
                shapes[f"{pre}.norm_mlp{unit}.bias"] = (c,)
                shapes[f"{pre}.mlp{unit}.fc1.weight"] = (c, hidden)
                shapes[f"{pre}.mlp{unit}.fc1.bias"] = (hidden,)
                shapes[f"{pre}.mlp{unit}.fc2.weight"] = (hidden, c)
                shapes[f"{pre}.mlp{unit}.fc2.bias"] = (c,)
    shapes["head.norm.weight"] = (cfg.dims[-1],)
    shapes["head.norm.bias"] = (cfg.dims[-1],)
    shapes["head.weight"] = (cfg.dims[-1], cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: HstConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight" and ".norm" in name:
            value = np.ones(shape)
        elif leaf in ("bias", "rel_bias"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def count_params(cfg: HstConfig) -> int:
    """Closed-form parameter count, independent of ``param_shapes``."""
    h2 = cfg.patch_size ** 2
    total = h2 * cfg.dims[0] + cfg.dims[0]
    for s, (depth, c, heads) in enumerate(zip(cfg.depths, cfg.dims, cfg.heads)):
        if s:
            total += 4 * cfg.dims[s - 1] * c + c
        m = cfg.window(s)
        hidden = cfg.mlp_ratio * c
        per_unit = 4 * c * c + c + (2 * m - 1) ** 2 * heads + 4 * c + 2 * c * hidden + hidden + c
        total += depth * 2 * per_unit
    c = cfg.dims[-1]
    return total + 2 * c + c * cfg.num_classes + cfg.num_classes


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in params.items()}


# -- windowing ----------------------------------------------------------------------


def window_partition(x: Tensor, m: int) -> Tensor:
    """(B, P, P, C) -> (B, (P/M)^2, M*M, C), windows in row-major order."""
    b, p, p2, c = x.shape
    if p != p2 or p % m:
        raise ShapeError(f"grid {p}x{p2} cannot be tiled by {m}x{m} windows")
    n = p // m
    y = x.reshape(b, n, m, n, m, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, n * n, m * m, c)


def window_reverse(w: Tensor, m: int, p: int) -> Tensor:
    b, _, _, c = w.shape
    n = p // m
    y = w.reshape(b, n, n, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, p, p, c)


def cyclic_shift(x: Tensor, s: tuple[int, int]) -> Tensor:
    """Torus roll of the token grid: token (i, j) moves to (i + s0, j + s1)."""
    if s == (0, 0):
        return x
    return T.roll(x, s, axis=(1, 2))


def inverse_cyclic_shift(x: Tensor, s: tuple[int, int]) -> Tensor:
    return cyclic_shift(x, (-s[0], -s[1]))


@lru_cache(maxsize=None)
def shift_attention_mask(p: int, m: int, s: int) -> np.ndarray:
    """Additive (nW, M^2, M^2) mask for windows over a grid rolled by (-s, -s).

    After the roll, the last ``s`` rows and columns hold tokens wrapped from
    the opposite edge. Token pairs from different pre-roll regions get
    MASK_VALUE; everything else is 0.
    """
    if p % m:
        raise ShapeError(f"grid {p} not divisible by window {m}")
    labels = np.zeros((p, p), dtype=np.int64)
    if s:
        bands = (slice(0, p - m), slice(p - m, p - s), slice(p - s, p))
        region = 0
        for rows in bands:
            for cols in bands:
                labels[rows, cols] = region
                region += 1
    n = p // m
    win = labels.reshape(n, m, n, m).transpose(0, 2, 1, 3).reshape(n * n, m * m)
    mask = np.where(win[:, :, None] == win[:, None, :], 0.0, MASK_VALUE)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """(M^2, M^2) map from token pairs to rows of the (2M-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]
    idx.setflags(write=False)
    return idx


# -- layers ---------------------------------------------------------------------------


def lwmsa(x: Tensor, w: dict[str, Tensor], heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    x: (B, nW, N, C). ``w`` holds q, k, v (C x C), proj.weight/bias and
    rel_bias ((2M-1)^2 x heads). ``mask`` is (nW, N, N) or None.
    """
    b, nw, n, c = x.shape
    if c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    dh = c // heads
    m = int(round(math.sqrt(n)))

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, nw, n, heads, dh).transpose(0, 1, 3, 2, 4)

    q = split(T.linear(x, w["q"])) * (1.0 / math.sqrt(dh))
    k = split(T.linear(x, w["k"]))
    v = split(T.linear(x, w["v"]))
    scores = q @ k.transpose(0, 1, 2, 4, 3)
    bias = T.take(w["rel_bias"], relative_position_index(m)).transpose(2, 0, 1)
    scores = scores + bias
    if mask is not None:
        scores = scores + Tensor(mask[:, None].astype(x.dtype))
    out = T.softmax(scores) @ v
    out = out.transpose(0, 1, 3, 2, 4).reshape(b, nw, n, c)
    return T.linear(out, w["proj.weight"], w["proj.bias"])


def mlp(x: Tensor, w: dict[str, Tensor]) -> Tensor:
    h = T.gelu(T.linear(x, w["fc1.weight"], w["fc1.bias"]))
    return T.linear(h, w["fc2.weight"], w["fc2.bias"])


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _attend(y: Tensor, w: dict[str, Tensor], heads: int, m: int, s: int, use_mask: bool) -> Tensor:
    p = y.shape[1]
    if s:
        y = cyclic_shift(y, (-s, -s))
    mask = shift_attention_mask(p, m, s) if (s and use_mask) else None
    out = window_reverse(lwmsa(window_partition(y, m), w, heads, mask), m, p)
    if s:
        out = inverse_cyclic_shift(out, (-s, -s))
    return out


def block_forward(y: Tensor, w: dict[str, Tensor], heads: int, m: int, s: int,
                  shift_mask: bool = True, eps: float = 1e-5) -> Tensor:
    """One dual unit: unshifted LWMSA + MLP, then shifted LWMSA + MLP, each pre-LN residual."""
    for unit, shift in ((1, 0), (2, s)):
        normed = T.layer_norm(y, w[f"norm_attn{unit}.weight"], w[f"norm_attn{unit}.bias"], eps)
        y = y + _attend(normed, _sub(w, f"attn{unit}"), heads, m, shift, shift_mask)
        normed = T.layer_norm(y, w[f"norm_mlp{unit}.weight"], w[f"norm_mlp{unit}.bias"], eps)
        y = y + mlp(normed, _sub(w, f"mlp{unit}"))
    return y


def patch_embed(x: Tensor, w: Tensor, b: Tensor, patch: int) -> Tensor:
    """(B, H, W) image -> (B, H/h, W/h, d); each h x h patch flattened row-major."""
    bsz, hgt, wid = x.shape
    if hgt != wid or hgt % patch:
        raise ShapeError(f"input {hgt}x{wid} cannot be split into {patch}x{patch} patches")
    p = hgt // patch
    tiles = x.reshape(bsz, p, patch, p, patch).transpose(0, 1, 3, 2, 4).reshape(bsz, p, p, patch * patch)
    return T.linear(tiles, w, b)


def patch_merge(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Concatenate each 2x2 token group to 4C channels and project to 2C."""
    bsz, p, _, c = x.shape
    if p % 2:
        raise ShapeError(f"cannot merge an odd grid of {p}")
    g = x.reshape(bsz, p // 2, 2, p // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return T.linear(g.reshape(bsz, p // 2, p // 2, 4 * c), w, b)


def head_forward(x: Tensor, params: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    """Layer norm, mean over all tokens, affine map to class logits."""
    if x.ndim != 4:
        raise ShapeError(f"head expects (B, P, P, C), got {x.shape}")
    if x.shape[-1] != params["head.weight"].shape[0]:
        raise ShapeError(f"head expects {params['head.weight'].shape[0]} channels, got {x.shape[-1]}")
    normed = T.layer_norm(x, params["head.norm.weight"], params["head.norm.bias"], eps)
    pooled = normed.reshape(x.shape[0], -1, x.shape[-1]).mean(axis=1)
    return T.linear(pooled, params["head.weight"], params["head.bias"])


def _as_batch(spec, dtype) -> Tensor:
    if isinstance(spec, Tensor):
        x = spec
    else:
        x = Tensor(np.asarray(getattr(spec, "values", spec), dtype=dtype))
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    return x


def run_stages(y: Tensor, params: dict[str, Tensor], cfg: HstConfig, start: int = 0,
               stop: int | None = None) -> list[Tensor]:
    """Apply 0-based stages ``start..stop-1`` to a feature map entering ``start``.

    ``y`` is the patch embedding when ``start`` is 0, otherwise the output of
    stage ``start - 1``. Returns each applied stage's output.
    """
    stop = cfg.num_stages if stop is None else stop
    outs = []
    for s in range(start, stop):
        if s:
            y = patch_merge(y, params[f"stages.{s}.merge.weight"], params[f"stages.{s}.merge.bias"])
        m, sh = cfg.window(s), cfg.shift(s)
        for bi in range(cfg.depths[s]):
            w = _sub(params, f"stages.{s}.blocks.{bi}")
            y = block_forward(y, w, cfg.heads[s], m, sh, cfg.shift_mask, cfg.ln_eps)
        outs.append(y)
    return outs


def forward_features(spec, params: dict[str, Tensor], cfg: HstConfig, stop: int | None = None) -> list[Tensor]:
    """Outputs of each stage, [(B, P_s, P_s, C_s) for s in stages]."""
    dtype = params["patch_embed.weight"].dtype
    x = _as_batch(spec, dtype)
    if x.shape[1:] != (cfg.img_size, cfg.img_size):
        raise ShapeError(f"expected {cfg.img_size}x{cfg.img_size} input, got {x.shape[1:]}")
    y = patch_embed(x, params["patch_embed.weight"], params["patch_embed.bias"], cfg.patch_size)
    return run_stages(y, params, cfg, 0, stop)


def forward(spec, params: dict[str, Tensor], cfg: HstConfig) -> Tensor:
    """Logits of shape (B, num_classes) for one (H, W) image or a (B, H, W) batch."""
    return head_forward(forward_features(spec, params, cfg)[-1], params, cfg.ln_eps)


@dataclass
class HstModel:
    cfg: HstConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: HstConfig, seed: int = 0, dtype=np.float32) -> HstModel:
        return cls(cfg, init_params(cfg, seed, dtype))

    def __call__(self, spec) -> Tensor:
        return forward(spec, self.params, self.cfg)

    def features(self, spec) -> list[Tensor]:
        return forward_features(spec, self.params, self.cfg)

    def copy(self) -> HstModel:
        return HstModel(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def with_config(self, **changes) -> HstModel:
        return HstModel(replace(self.cfg, **changes), self.params)


# -- complexity model -------------------------------------------------------------------


def flops_estimate(cfg: HstConfig, attention: str = "windowed") -> dict:
    """Multiply-accumulate counts per stage and in total.

    Attention scores and the weighted value sum each cost P^2 * n_ctx * C,
    where n_ctx is M^2 for windowed attention and P^2 for global attention.
    Projections and MLPs are included; layer norms, softmax and GELU are not.
    """
    if attention not in ("windowed", "global"):
        raise ValueError(f"attention must be 'windowed' or 'global', got {attention!r}")
    stages = []
    p0 = cfg.grid(0)
    embed = p0 * p0 * cfg.patch_size ** 2 * cfg.dims[0]
    for s in range(cfg.num_stages):
        p, c = cfg.grid(s), cfg.dims[s]
        tokens = p * p
        ctx = cfg.window(s) ** 2 if attention == "windowed" else tokens
        merge = tokens * 4 * cfg.dims[s - 1] * c if s else 0
        scores = tokens * ctx * c
        per_msa = {
            "qkv": 3 * tokens * c * c,
            "scores": scores,
            "weighted_sum": scores,
            "proj": tokens * c * c,
        }
        per_mlp = 2 * tokens * c * cfg.mlp_ratio * c
        n_msa = 2 * cfg.depths[s]
        msa = {k: v * n_msa for k, v in per_msa.items()}
        total = merge + sum(msa.values()) + n_msa * per_mlp
        stages.append({"stage": s + 1, "grid": p, "channels": c, "merge": merge,
                       "attention_scores": msa["scores"], "attention": sum(msa.values()),
                       "mlp": n_msa * per_mlp, "total": total})
    head = cfg.dims[-1] * cfg.num_classes
    total = embed + sum(st["total"] for st in stages) + head
    return {"attention": attention, "embed": embed, "head": head, "stages": stages, "total": total}
