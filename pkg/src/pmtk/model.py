"""Dual-branch segmentation model at desk scale.

Two four-stage encoders read the same image: a convolutional branch whose
residual blocks run a wavelet diffusion step ahead of their convolutions, and
a token-mixing branch of patch embeddings and residual Vim blocks. Stage
outputs at scales 1/4..1/32 are fused by elementwise sum and decoded twice:
a multi-scale top-down head produces the primary logits, a single-scale
fully-convolutional head the first auxiliary. Each branch additionally gets
its own single-scale auxiliary head, for a four-term cross-entropy loss.

Positional embeddings tie a built model to one input extent; the default toy
configuration uses 64x64 images.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .pmd import PmdBlock
from .ssm import PatchEmbed, VimBlockWeights, tokens_to_map, vim_block


@dataclass(frozen=True)
class StagePlan:
    widths: tuple = (16, 32, 64, 128)
    pmd_blocks: tuple = (3, 4, 6, 3)
    vim_blocks: tuple = (2, 2, 2, 2)
    patch_sizes: tuple = (4, 2, 2, 2)
    in_channels: int = 1
    num_classes: int = 2
    state_dim: int = 8
    expand: int = 2
    k_diff: float = 1.0
    head_width: int = 32
    preprocess: str = "dwt"

    def __post_init__(self):
        if not (len(self.widths) == len(self.pmd_blocks) == len(self.vim_blocks)
                == len(self.patch_sizes) == 4):
            raise ConfigError("StagePlan requires exactly four stages")
        if any(b >= a for a, b in zip(self.widths[1:], self.widths)):
            raise ConfigError(f"widths must be strictly increasing, got {self.widths}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.patch_sizes))


MICRO_PLAN = StagePlan(widths=(4, 8, 16, 32))


@dataclass(frozen=True)
class LossWeights:
    w_prim: float = 1.0
    w_fcn: float = 0.4
    w_pmd: float = 0.4
    w_vim: float = 0.4

    def __post_init__(self):
        if self.w_prim <= 0:
            raise ConfigError("w_prim must be positive")
        if min(self.w_fcn, self.w_pmd, self.w_vim) < 0:
            raise ConfigError("loss weights must be nonnegative")


# ---------------------------------------------------------------------------
# Branches
# ---------------------------------------------------------------------------

class _ConvNormRelu(T.Module):
    def __init__(self, rng, c_in, c_out, ksize=3, stride=1, pad=1):
        self.stride = stride
        self.pad = pad
        self.w = T.uniform_param(rng, (c_out, c_in, ksize, ksize), c_in * ksize * ksize)
        self.g = T.Parameter(np.ones(c_out))
        self.b = T.zeros_param((c_out,))

    def __call__(self, x):
        return T.relu(T.norm_affine(T.conv2d(x, self.w, self.stride, self.pad),
                                    self.g, self.b))


class PmdBranch(T.Module):
    """Stem to 1/4 scale, then four stages of diffusion-residual blocks."""

    def __init__(self, rng: np.random.Generator, plan: StagePlan):
        c1 = plan.widths[0]
        self.stem1 = _ConvNormRelu(rng, plan.in_channels, c1, stride=2)
        self.stem2 = _ConvNormRelu(rng, c1, c1, stride=2)
        self.stages = []
        c_prev = c1
        for i, (c, depth) in enumerate(zip(plan.widths, plan.pmd_blocks)):
            blocks = []
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(PmdBlock(rng, c_prev if j == 0 else c, c,
                                       stride=stride, k=plan.k_diff,
                                       preprocess=plan.preprocess))
            self.stages.append(blocks)
            c_prev = c

    def __call__(self, x: T.Tensor) -> list:
        cur = self.stem2(self.stem1(x))
        feats = []
        for blocks in self.stages:
            for blk in blocks:
                cur = blk(cur)
            feats.append(cur)
        return feats


class VimBranch(T.Module):
    """Per stage: patch embedding, two residual Vim blocks, back to a map."""

    def __init__(self, rng: np.random.Generator, plan: StagePlan, size: int):
        if size % plan.total_stride:
            raise DimensionError(f"input extent {size} not divisible by {plan.total_stride}")
        self.embeds = []
        self.blocks = []
        self.grids = []
        c_prev = plan.in_channels
        extent = size
        for c, n, depth in zip(plan.widths, plan.patch_sizes, plan.vim_blocks):
            extent //= n
            grid = (extent, extent)
            self.embeds.append(PatchEmbed(rng, n, c_prev, c, grid))
            self.blocks.append([VimBlockWeights(rng, c, plan.state_dim, plan.expand)
                                for _ in range(depth)])
            self.grids.append(grid)
            c_prev = c

    def __call__(self, x: T.Tensor) -> list:
        feats = []
        cur = x
        for embed, blocks, grid in zip(self.embeds, self.blocks, self.grids):
            tokens = embed(cur)
            for blk in blocks:
                tokens = vim_block(tokens, blk)
            cur = tokens_to_map(tokens, grid)
            feats.append(cur)
        return feats


def fuse(a: list, b: list) -> list:
    """Elementwise sum of two four-scale feature lists."""
    if len(a) != len(b):
        raise DimensionError(f"fuse: {len(a)} vs {len(b)} scales")
    return [T.add(x, y) for x, y in zip(a, b)]


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------

class SegHead(T.Module):
    """Top-down multi-scale decoder to full-resolution class logits."""

    def __init__(self, rng: np.random.Generator, widths, k: int, mid: int = 32):
        self.laterals = [T.uniform_param(rng, (mid, c, 1, 1), c) for c in widths]
        self.smooth = T.uniform_param(rng, (mid, mid, 3, 3), mid * 9)
        self.classify = T.uniform_param(rng, (k, mid, 1, 1), mid)

    def __call__(self, feats: list) -> T.Tensor:
        t = T.conv2d(feats[-1], self.laterals[-1], 1, 0)
        for f, lat in zip(feats[-2::-1], self.laterals[-2::-1]):
            t = T.add(T.bilinear_upsample(t, 2), T.conv2d(f, lat, 1, 0))
        tops = T.conv2d(t, self.smooth, 1, 1)
        full = T.bilinear_upsample(tops, 4)
        return T.conv2d(full, self.classify, 1, 0)


class FCNHead(T.Module):
    """Single-scale decoder: conv-norm-relu, classifier, upsample to input."""

    def __init__(self, rng: np.random.Generator, c_in: int, k: int,
                 factor: int, mid: int = 32):
        self.factor = factor
        self.body = _ConvNormRelu(rng, c_in, mid)
        self.classify = T.uniform_param(rng, (k, mid, 1, 1), mid)

    def __call__(self, f: T.Tensor) -> T.Tensor:
        return T.bilinear_upsample(T.conv2d(self.body(f), self.classify, 1, 0),
                                   self.factor)


class PMamba(T.Module):
    """The full dual-branch model bound to one input extent."""

    def __init__(self, rng: np.random.Generator, plan: StagePlan = StagePlan(),
                 size: int = 64):
        self.plan = plan
        self.size = size
        k = plan.num_classes
        stride = plan.total_stride
        self.pmd_branch = PmdBranch(rng, plan)
        self.vim_branch = VimBranch(rng, plan, size)
        self.seg_head = SegHead(rng, plan.widths, k, plan.head_width)
        self.fcn_head = FCNHead(rng, plan.widths[-1], k, stride, plan.head_width)
        self.aux_pmd = FCNHead(rng, plan.widths[-1], k, stride, plan.head_width)
        self.aux_vim = FCNHead(rng, plan.widths[-1], k, stride, plan.head_width)

    def __call__(self, x: T.Tensor) -> dict:
        feats_p = self.pmd_branch(x)
        feats_v = self.vim_branch(x)
        fused = fuse(feats_p, feats_v)
        return {
            "prim": self.seg_head(fused),
            "fcn": self.fcn_head(fused[-1]),
            "pmd": self.aux_pmd(feats_p[-1]),
            "vim": self.aux_vim(feats_v[-1]),
        }


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------

def total_loss(outputs: dict, target: np.ndarray,
               lw: LossWeights = LossWeights()) -> tuple:
    """Weighted four-term cross-entropy; returns (total, per-term floats)."""
    terms = {}
    weighted = []
    for name, w in (("prim", lw.w_prim), ("fcn", lw.w_fcn),
                    ("pmd", lw.w_pmd), ("vim", lw.w_vim)):
        ce = T.softmax_cross_entropy(outputs[name], target)
        terms[name] = ce.item()
        if w:
            weighted.append(T.scale(ce, w))
    total = weighted[0]
    for term in weighted[1:]:
        total = T.add(total, term)
    return total, terms


def mask_metrics(pred: np.ndarray, true: np.ndarray) -> tuple:
    """(precision, recall, dice) for binary masks.

    Both masks empty counts as perfect agreement (all 1); with exactly one
    empty, dice is 0 and the undefined ratio is reported as 0.
    """
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    dice = 2 * tp / (2 * tp + fp + fn)
    return precision, recall, dice


def predict(model: PMamba, images: np.ndarray) -> np.ndarray:
    """Argmax masks from the primary head; images [B,1,H,W] -> [B,H,W]."""
    out = model(T.Tensor(images))
    return np.argmax(out["prim"].data, axis=1)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

LOG_HEADER = "epoch,loss_prim,loss_fcn,loss_pmd,loss_vim,val_precision,val_recall,val_dice"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    # 0.1 with momentum 0.9 overflows the conv activations within the first
    # epochs on the synthetic task; 0.05 is the fastest stable setting tried
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    size: int = 64
    plan: StagePlan = field(default_factory=StagePlan)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    log_path: str | None = None


def _stack(samples) -> tuple:
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    masks = np.stack([np.asarray(s.mask, dtype=np.int64) for s in samples])
    return images, masks


def train_toy(train_samples, val_samples, cfg: TrainConfig = TrainConfig()) -> tuple:
    """Momentum-SGD training; returns (model, history rows as dicts).

    Fully determined by cfg.seed: initialization, shuffles and therefore the
    whole trajectory. Writes the metric log incrementally when cfg.log_path
    is set (header LOG_HEADER).
    """
    if not train_samples:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = PMamba(rng, cfg.plan, cfg.size)
    opt = T.Momentum(model.parameters(), cfg.lr, cfg.momentum)
    images, masks = _stack(train_samples)
    n = len(train_samples)
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    if log_fh:
        log_fh.write(LOG_HEADER + "\n")
    history = []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            sums = dict.fromkeys(("prim", "fcn", "pmd", "vim"), 0.0)
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                with T.Tape() as tape:
                    outputs = model(T.Tensor(images[idx]))
                    loss, parts = total_loss(outputs, masks[idx], cfg.loss_weights)
                grads = T.backward(tape, loss)
                opt.step(grads)
                for key in sums:
                    sums[key] += parts[key]
                batches += 1
            row = {"epoch": epoch}
            for key in sums:
                row[f"loss_{key}"] = sums[key] / batches
            if val_samples:
                _, means = evaluate(model, val_samples, cfg.batch_size)
                row.update(val_precision=means["precision"],
                           val_recall=means["recall"], val_dice=means["dice"])
            else:
                row.update(val_precision=float("nan"), val_recall=float("nan"),
                           val_dice=float("nan"))
            history.append(row)
            if log_fh:
                log_fh.write(",".join(format(row[col], ".6f") if col != "epoch"
                                      else str(row[col])
                                      for col in LOG_HEADER.split(",")) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return model, history


def evaluate(model: PMamba, samples, batch_size: int = 8) -> tuple:
    """Per-sample (id, precision, recall, dice) rows plus their means."""
    if not samples:
        raise DataError("empty evaluation set")
    images, masks = _stack(samples)
    rows = []
    for start in range(0, len(samples), batch_size):
        pred = predict(model, images[start:start + batch_size])
        for j, sample in enumerate(samples[start:start + batch_size]):
            p, r, d = mask_metrics(pred[j], masks[start + j])
            rows.append((sample.id, p, r, d))
    means = {
        "precision": float(np.mean([r[1] for r in rows])),
        "recall": float(np.mean([r[2] for r in rows])),
        "dice": float(np.mean([r[3] for r in rows])),
    }
    return rows, means


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

VARIANTS = {"full": "dwt", "no-pmd": "none", "sobel": "sobel"}


@dataclass(frozen=True)
class AblateConfig:
    variants: tuple = ("full", "no-pmd", "sobel")
    seeds: tuple = (0, 1, 2, 3, 4)
    count: int = 120
    noise_sigma: float = 0.5
    epochs: int = 8
    lr: float = 0.05
    size: int = 64
    batch_size: int = 8


def ablate(cfg: AblateConfig = AblateConfig()) -> dict:
    """Train every variant under identical data/seed/budget per seed.

    Returns {"runs": [(variant, seed, precision, recall, dice)],
    "summary": [(variant, mean_precision, mean_recall, mean_dice)]}.
    """
    from .data import SynthConfig, split, synth_generate

    for v in cfg.variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; valid: {sorted(VARIANTS)}")
    runs = []
    for seed in cfg.seeds:
        data_cfg = SynthConfig(seed=seed, count=cfg.count, size=cfg.size,
                               noise_sigma=cfg.noise_sigma)
        train_set, val_set, _ = split(synth_generate(data_cfg), seed=seed)
        for variant in cfg.variants:
            plan = replace(StagePlan(), preprocess=VARIANTS[variant])
            tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                               lr=cfg.lr, seed=seed, size=cfg.size, plan=plan)
            model, _ = train_toy(train_set, val_set, tcfg)
            _, means = evaluate(model, val_set, cfg.batch_size)
            runs.append((variant, seed, means["precision"], means["recall"],
                         means["dice"]))
    summary = []
    for variant in cfg.variants:
        rows = [r for r in runs if r[0] == variant]
        summary.append((variant,
                        float(np.mean([r[2] for r in rows])),
                        float(np.mean([r[3] for r in rows])),
                        float(np.mean([r[4] for r in rows]))))
    return {"runs": runs, "summary": summary}


# ---------------------------------------------------------------------------
# Profiling (CLI `bench` model table)
# ---------------------------------------------------------------------------

def model_profile(model: PMamba, reps: int = 3) -> dict:
    """Parameter count, mean forward milliseconds, peak allocation estimate."""
    x = np.zeros((1, model.plan.in_channels, model.size, model.size))
    predict(model, x)  # warm up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        predict(model, x)
        times.append((time.perf_counter() - t0) * 1e3)
    tracemalloc.start()
    predict(model, x)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return {
        "params": model.parameter_count(),
        "forward_ms": float(np.mean(times)),
        "peak_bytes": int(peak),
    }
