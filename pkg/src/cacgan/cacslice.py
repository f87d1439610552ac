"""Per-slice classifier flagging axial heart slices with visible calcium."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint, seed_everything
from .nets import SliceClassifierNet
from .volume import BinaryMask, NormalizedSlice, Volume, center_of_mass, heart_slice_range, normalize_slice, relative_position

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    widths: tuple = (64, 128, 256)
    n_blocks: int = 6
    side: int = 224
    batch: int = 20
    iterations: int = 1_500_000
    lr: float = 1e-3
    positive_fraction: float = 0.5
    flip: bool = True  # random left-right / up-down flips
    shift_px: int = 8  # random in-plane shift (zero-HU fill) up to this many pixels
    log_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)


def heart_slices(v: Volume, heart: BinaryMask, side: int, center=None):
    """Normalized crops of every axial slice touching the heart mask."""
    c = center_of_mass(heart) if center is None else center
    z0, z1 = heart_slice_range(heart)
    return [normalize_slice(v, k, c, side, position=relative_position(k, z0, z1)) for k in range(z0, z1 + 1)]


def _stack(slices):
    return torch.from_numpy(np.stack([np.asarray(s.data, dtype=np.float32) for s in slices])[:, None])


def _augment(x, rng, cfg: ClassifierConfig, fill):
    """Per-sample flips and integer shifts of a (n, 1, h, w) batch."""
    out = np.full_like(x, fill)
    h, w = x.shape[2:]
    for i in range(len(x)):
        a = x[i, 0]
        if cfg.flip:
            if rng.random() < 0.5:
                a = a[::-1]
            if rng.random() < 0.5:
                a = a[:, ::-1]
        dy, dx = (rng.integers(-cfg.shift_px, cfg.shift_px + 1, 2) if cfg.shift_px else (0, 0))
        src = a[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
        out[i, 0, max(dy, 0):max(dy, 0) + src.shape[0], max(dx, 0):max(dx, 0) + src.shape[1]] = src
    return out


def train_classifier(slices, cfg: ClassifierConfig, out_dir=None):
    """Train on ``(NormalizedSlice, flag)`` pairs with class-balanced batches."""
    flags = np.array([bool(f) for _, f in slices])
    if flags.all() or not flags.any():
        raise ValueError("training set must contain both classes")
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pos, neg = np.flatnonzero(flags), np.flatnonzero(~flags)
    data = np.stack([np.asarray(s.data, dtype=np.float32) for s, _ in slices])[:, None]
    lo, hi = slices[0][0].hu_window
    fill = np.float32((0.0 - lo) / (hi - lo))  # zero-HU padding value
    model = SliceClassifierNet(cfg.widths, cfg.n_blocks)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n_pos = int(round(cfg.batch * cfg.positive_fraction))
    history = []
    model.train()
    for it in range(1, cfg.iterations + 1):
        idx = np.concatenate([rng.choice(pos, n_pos), rng.choice(neg, cfg.batch - n_pos)])
        x = data[idx]
        if cfg.flip or cfg.shift_px:
            x = _augment(x, rng, cfg, fill)
        x = torch.from_numpy(np.ascontiguousarray(x))
        y = torch.from_numpy(flags[idx].astype(np.int64))
        loss = F.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append((it, loss.item()))
            log.info("classifier it %d xent %.4f", it, loss.item())
        if out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir, {"classifier": model}, cfg, it)
    model.eval()
    if out_dir:
        save_checkpoint(out_dir, {"classifier": model}, cfg, cfg.iterations)
    return model, history


@torch.no_grad()
def slice_probabilities(model, slices, batch=64):
    if not slices:
        return np.zeros((0, 2))
    model.eval()
    out = [model.predict_proba(_stack(slices[i:i + batch])).numpy() for i in range(0, len(slices), batch)]
    return np.concatenate(out)


def classify_slices(model, slices: list[NormalizedSlice]) -> list[bool]:
    """Argmax of the softmax: True where visible calcium is predicted."""
    p = slice_probabilities(model, slices)
    return [bool(a) for a in p.argmax(axis=1)] if len(p) else []
