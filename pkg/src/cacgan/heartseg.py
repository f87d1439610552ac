"""Patch-based 3D heart segmentation: training, sliding-window inference, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .checkpoint import save_checkpoint, seed_everything
from .nets import HeartSegNet
from .volume import SEG_SPACING, BinaryMask, Volume, hu_to_unit, resample

log = logging.getLogger(__name__)


@dataclass
class HeartSegConfig:
    widths: tuple = (16, 32, 64)
    n_blocks: int = 9
    patch: tuple = (64, 64, 64)
    batch: int = 10
    iterations: int = 250_000
    lr: float = 1e-3
    heart_fraction: float = 0.5
    stride: tuple = None  # inference stride, default half a patch
    spacing: tuple = SEG_SPACING
    window: tuple = (-1000.0, 1000.0)
    log_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.widths = tuple(self.widths)
        if self.stride is None:
            self.stride = tuple(p // 2 for p in self.patch)
        self.stride = tuple(int(s) for s in self.stride)


def dice_loss(prob, target, smooth=1.0):
    """Soft Dice loss over the whole batch."""
    inter = (prob * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (prob.sum() + target.sum() + smooth)


def _prepare(v: Volume, m: BinaryMask | None, cfg: HeartSegConfig):
    if not np.allclose(v.spacing, cfg.spacing):
        v = resample(v, cfg.spacing, "linear")
        if m is not None:
            m = resample(m, cfg.spacing, "nearest")
    x = hu_to_unit(v.data, cfg.window).astype(np.float32)
    return x, (None if m is None else m.data.astype(np.float32))


def _extract(arr, start, size):
    out = np.zeros(size, dtype=np.float32)
    src = tuple(slice(max(s, 0), min(s + n, d)) for s, n, d in zip(start, size, arr.shape))
    dst = tuple(slice(sl.start - s, sl.stop - s) for sl, s in zip(src, start))
    out[dst] = arr[src]
    return out


class PatchSampler:
    """Draws patches, a fixed fraction of them centred on a heart voxel."""

    def __init__(self, cases, patch, heart_fraction, rng):
        self.cases = cases
        self.patch = patch
        self.heart_fraction = heart_fraction
        self.rng = rng
        self.fg = [np.argwhere(m > 0) for _, m in cases]

    def sample(self):
        i = int(self.rng.integers(len(self.cases)))
        x, m = self.cases[i]
        half = np.asarray(self.patch) // 2
        on_heart = self.rng.random() < self.heart_fraction and len(self.fg[i])
        if on_heart:
            c = self.fg[i][int(self.rng.integers(len(self.fg[i])))]
        else:
            c = np.array([self.rng.integers(0, d) for d in x.shape])
        start = c - half
        return _extract(x, start, self.patch), _extract(m, start, self.patch), bool(on_heart)

    def batch(self, n):
        xs, ms, flags = zip(*(self.sample() for _ in range(n)))
        return np.stack(xs)[:, None], np.stack(ms)[:, None], flags


def train_heartseg(dataset, cfg: HeartSegConfig, out_dir=None):
    """Fit the segmenter on ``(Volume, BinaryMask)`` pairs; returns (model, loss history)."""
    if not dataset:
        raise ValueError("empty training set")
    if any(p % 4 for p in cfg.patch):
        raise ValueError(f"patch {cfg.patch} must be divisible by 4")
    cases = [_prepare(v, m, cfg) for v, m in dataset]
    if all(any(p > d for p, d in zip(cfg.patch, x.shape)) for x, _ in cases):
        raise ValueError(f"patch {cfg.patch} larger than every training volume")
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    sampler = PatchSampler(cases, cfg.patch, cfg.heart_fraction, rng)
    model = HeartSegNet(cfg.widths, cfg.n_blocks)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for it in range(1, cfg.iterations + 1):
        x, m, _ = sampler.batch(cfg.batch)
        prob = model(torch.from_numpy(x))[:, 1:2]
        loss = dice_loss(prob, torch.from_numpy(m))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append((it, loss.item()))
            log.info("heartseg it %d dice loss %.4f", it, loss.item())
        if out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir, {"heartseg": model}, cfg, it, working_spacing=list(cfg.spacing))
    model.eval()
    if out_dir:
        save_checkpoint(out_dir, {"heartseg": model}, cfg, cfg.iterations, working_spacing=list(cfg.spacing))
    return model, history


def _starts(dim, patch, stride):
    if dim <= patch:
        return [0]
    s = list(range(0, dim - patch + 1, stride))
    if s[-1] != dim - patch:
        s.append(dim - patch)
    return s


@torch.no_grad()
def heart_probability(model, x, patch, stride, batch=4):
    """Average of overlapping patch predictions (heart channel) over array ``x``."""
    model.eval()
    shape = tuple(max(d, p) for d, p in zip(x.shape, patch))
    padded = np.zeros(shape, dtype=np.float32)
    padded[: x.shape[0], : x.shape[1], : x.shape[2]] = x
    acc = np.zeros(shape, dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.float64)
    starts = [(a, b, c) for a in _starts(shape[0], patch[0], stride[0])
              for b in _starts(shape[1], patch[1], stride[1])
              for c in _starts(shape[2], patch[2], stride[2])]
    for k in range(0, len(starts), batch):
        chunk = starts[k:k + batch]
        xs = np.stack([padded[a:a + patch[0], b:b + patch[1], c:c + patch[2]] for a, b, c in chunk])[:, None]
        out = model(torch.from_numpy(xs))[:, 1].numpy()
        for (a, b, c), p in zip(chunk, out):
            acc[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += p
            cnt[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += 1
    prob = acc / cnt
    return prob[: x.shape[0], : x.shape[1], : x.shape[2]]


def largest_component(mask):
    lab, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n <= 1:
        return mask.astype(bool)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(sizes.argmax())


def segment_heart(model, v: Volume, cfg: HeartSegConfig, stride=None, keep_largest=True) -> BinaryMask:
    """Binary heart mask on the grid of ``v`` (expected at the working spacing)."""
    x = hu_to_unit(v.data, cfg.window).astype(np.float32)
    prob = heart_probability(model, x, cfg.patch, stride or cfg.stride)
    mask = prob >= 0.5
    if keep_largest:
        mask = largest_component(mask)
    return BinaryMask(mask, v.spacing, v.origin)


def _surface(mask):
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def seg_metrics(pred: BinaryMask, ref: BinaryMask):
    """(Dice, Hausdorff mm, mean asymmetric surface distance pred->ref mm)."""
    if pred.shape != ref.shape or not np.allclose(pred.spacing, ref.spacing):
        raise ValueError("masks are not on the same grid")
    a, b = pred.data.astype(bool), ref.data.astype(bool)
    if not b.any():
        raise ValueError("empty reference mask")
    dice = 2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum())
    if not a.any():
        return float(dice), float("inf"), float("inf")
    sa, sb = _surface(a), _surface(b)
    to_b = ndimage.distance_transform_edt(~sb, sampling=ref.spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=ref.spacing)
    d_ab = to_b[sa]
    d_ba = to_a[sb]
    hausdorff = max(d_ab.max(), d_ba.max())
    return float(dice), float(hausdorff), float(d_ab.mean())
