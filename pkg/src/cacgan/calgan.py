"""Adjusted CycleGAN that splits a calcium slice into healthy tissue plus a CAC map.

The removing generator ``g_r`` predicts a nonnegative map that is subtracted
from a CAC image; the synthesizing generator ``g_s`` predicts a map that is
added to a noCAC image and only exists to stabilise training through the
cycle constraint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import save_checkpoint, seed_everything
from .nets import CacGenerator, PatchDiscriminator
from .volume import HU_PER_UNIT, NormalizedSlice

log = logging.getLogger(__name__)


@dataclass
class GanTrainConfig:
    lam: float = 10.0  # cycle weight
    alpha: float = 10.0  # identity weight
    beta: float = 0.001  # sparsity weight
    lr: float = 1e-4
    disc_lr: float | None = None  # defaults to lr
    adam_betas: tuple = (0.5, 0.999)
    batch: int = 4
    iterations: int = 375_000
    adversarial: str = "log"  # or "lsgan"
    gen_widths: tuple = (64, 128, 256)
    gen_blocks: int = 6
    gen_norm: str = "batch"
    disc_base: int = 64
    disc_layers: int = 3
    side: int = 224
    noise_sigma: float = 0.5
    crop_jitter: int = 16
    rotation_deg: float = 10.0
    position_bins: int = 3
    log_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.adversarial not in ("log", "lsgan"):
            raise ValueError(f"unknown adversarial loss {self.adversarial!r}")
        self.gen_widths = tuple(self.gen_widths)
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class CacMap:
    """Nonnegative calcium attenuation in normalized units (1 unit = 1000 HU)."""

    data: np.ndarray

    @property
    def hu(self):
        return np.asarray(self.data, dtype=np.float64) * HU_PER_UNIT


def build_models(cfg: GanTrainConfig):
    return {
        "g_r": CacGenerator(cfg.gen_widths, cfg.gen_blocks, cfg.gen_norm),
        "g_s": CacGenerator(cfg.gen_widths, cfg.gen_blocks, cfg.gen_norm),
        "d_cac": PatchDiscriminator(cfg.disc_base, cfg.disc_layers),
        "d_nocac": PatchDiscriminator(cfg.disc_base, cfg.disc_layers),
    }


# -------------------------------------------------------------- inference


def _batch(slices):
    arrs = [np.asarray(s.data if isinstance(s, NormalizedSlice) else s, dtype=np.float32) for s in slices]
    return torch.from_numpy(np.stack(arrs)[:, None])


def _like(s, data):
    if isinstance(s, NormalizedSlice):
        return NormalizedSlice(data, s.crop_center, s.side, s.slice_index, s.hu_window, s.position)
    return data


@torch.no_grad()
def predict_maps(g, slices, batch=32):
    if not len(slices):
        return np.zeros((0, 0, 0), dtype=np.float32)
    g.eval()
    out = [g(_batch(slices[i:i + batch]))[:, 0].numpy() for i in range(0, len(slices), batch)]
    return np.concatenate(out)


def decompose(g_r, s):
    """Split ``s`` into (CAC map, synthetic noCAC slice) with ``s = noCAC + map``."""
    m = predict_maps(g_r, [s])[0]
    x = np.asarray(s.data if isinstance(s, NormalizedSlice) else s, dtype=np.float32)
    return CacMap(m), _like(s, x - m)


def decompose_many(g_r, slices):
    maps = predict_maps(g_r, slices)
    return [(CacMap(m), _like(s, np.asarray(getattr(s, "data", s), np.float32) - m)) for s, m in zip(slices, maps)]


def synthesize(g_s, s):
    """Add the synthesized map: returns the synthetic CAC slice."""
    m = predict_maps(g_s, [s])[0]
    x = np.asarray(s.data if isinstance(s, NormalizedSlice) else s, dtype=np.float32)
    return _like(s, x + m)


# ------------------------------------------------------------------ losses


def log_d(logits):
    """log of the discriminator output, the mean of patch sigmoids, per image."""
    z = logits.flatten(1)
    return torch.logsumexp(F.logsigmoid(z), dim=1) - math.log(z.shape[1])


def log_one_minus_d(logits):
    z = logits.flatten(1)
    return torch.logsumexp(F.logsigmoid(-z), dim=1) - math.log(z.shape[1])


def d_output(d, x, mode="log"):
    """Scalar discriminator response per image (probability for the log form)."""
    z = d(x)
    return torch.exp(log_d(z)) if mode == "log" else z.flatten(1).mean(dim=1)


def generator_adversarial(logits, mode):
    if mode == "log":
        return -log_d(logits).mean()
    return ((logits.flatten(1).mean(dim=1) - 1.0) ** 2).mean()


def discriminator_loss(real_logits, fake_logits, mode):
    if mode == "log":
        return -(log_d(real_logits).mean() + log_one_minus_d(fake_logits).mean())
    r = real_logits.flatten(1).mean(dim=1)
    f = fake_logits.flatten(1).mean(dim=1)
    return 0.5 * (((r - 1.0) ** 2).mean() + (f ** 2).mean())


@dataclass
class LossTerms:
    adversarial: torch.Tensor
    cycle: torch.Tensor
    identity: torch.Tensor
    sparsity: torch.Tensor
    total: torch.Tensor
    fakes: dict = field(default_factory=dict)

    def values(self):
        return {k: float(getattr(self, k).detach()) for k in ("adversarial", "cycle", "identity", "sparsity", "total")}


def gan_losses(batch_cac, batch_nocac, g_r, g_s, d_cac, d_nocac, cfg: GanTrainConfig) -> LossTerms:
    """Generator objective: adversarial + lam*cycle + alpha*identity + beta*sparsity.

    L1 terms are per-pixel means. The adversarial term is the non-saturating
    form ``-log D(fake)`` (or least squares when ``cfg.adversarial == "lsgan"``).
    """
    if batch_cac.shape[0] == 0 or batch_nocac.shape[0] == 0:
        raise ValueError("both domains need a nonempty batch")
    map_r = g_r(batch_cac)
    nocac_hat = batch_cac - map_r
    map_s = g_s(batch_nocac)
    cac_hat = batch_nocac + map_s

    cac_rec = nocac_hat + g_s(nocac_hat)
    nocac_rec = cac_hat - g_r(cac_hat)
    cycle = (cac_rec - batch_cac).abs().mean() + (nocac_rec - batch_nocac).abs().mean()
    identity = g_r(batch_nocac).abs().mean() + g_s(batch_cac).abs().mean()
    sparsity = map_r.abs().mean() + map_s.abs().mean()
    adversarial = (generator_adversarial(d_nocac(nocac_hat), cfg.adversarial)
                   + generator_adversarial(d_cac(cac_hat), cfg.adversarial))
    total = adversarial + cfg.lam * cycle + cfg.alpha * identity + cfg.beta * sparsity
    return LossTerms(adversarial, cycle, identity, sparsity, total,
                     {"nocac_hat": nocac_hat, "cac_hat": cac_hat})


def discriminator_losses(batch_cac, batch_nocac, fakes, d_cac, d_nocac, cfg):
    l_cac = discriminator_loss(d_cac(batch_cac), d_cac(fakes["cac_hat"].detach()), cfg.adversarial)
    l_nocac = discriminator_loss(d_nocac(batch_nocac), d_nocac(fakes["nocac_hat"].detach()), cfg.adversarial)
    return l_cac + l_nocac


# ------------------------------------------------------------ augmentation


def noise_augment(s, mode, sigma=0.5):
    """``smooth``: Gaussian filter; ``amplify``: add back the residual of that filter."""
    x = np.asarray(s.data if isinstance(s, NormalizedSlice) else s, dtype=np.float64)
    if mode == "none":
        out = x
    else:
        smooth = ndimage.gaussian_filter(x, sigma, mode="reflect")
        if mode == "smooth":
            out = smooth
        elif mode == "amplify":
            out = x + (x - smooth)
        else:
            raise ValueError(f"unknown noise mode {mode!r}")
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return _like(s, out)


def augment(arr, side, rng, cfg: GanTrainConfig):
    """Random rotation, random ``side`` crop out of a margin crop, random noise mode."""
    x = np.asarray(arr, dtype=np.float64)
    if cfg.rotation_deg:
        ang = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        x = ndimage.rotate(x, ang, reshape=False, order=1, mode="nearest")
    slack = x.shape[0] - side
    ox, oy = (int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1))) if slack > 0 else (0, 0)
    x = x[ox:ox + side, oy:oy + side]
    mode = ("none", "smooth", "amplify")[int(rng.integers(0, 3))]
    return noise_augment(x, mode, cfg.noise_sigma)


class DomainSampler:
    """Batches from one domain, balanced over relative slice position bins."""

    def __init__(self, arrays, positions, n_bins, rng):
        if not len(arrays):
            raise ValueError("domain has no slices")
        self.arrays = arrays
        self.rng = rng
        bins = np.minimum((np.asarray(positions) * n_bins).astype(int), n_bins - 1)
        self.bins = [np.flatnonzero(bins == b) for b in range(n_bins)]
        # bins missing from this domain are merged away
        self.bins = [b for b in self.bins if len(b)]

    def draw(self, n):
        out = []
        for _ in range(n):
            b = self.bins[int(self.rng.integers(len(self.bins)))]
            out.append(self.arrays[int(b[int(self.rng.integers(len(b)))])])
        return out


def _to_tensor(arrs):
    return torch.from_numpy(np.stack([np.asarray(a, np.float32) for a in arrs])[:, None])


def train_cyclegan(slices, cfg: GanTrainConfig, out_dir=None, callback=None):
    """Train all four networks.

    ``slices`` holds ``(array, has_cac, position)`` triples where ``array`` is a
    square normalized crop of side ``cfg.side + 2 * cfg.crop_jitter``.
    Returns (models, history) with one history entry per ``log_every`` iterations.
    """
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    cac = [(a, p) for a, d, p in slices if d]
    nocac = [(a, p) for a, d, p in slices if not d]
    if not cac or not nocac:
        raise ValueError("both CAC and noCAC slices are required")
    s_cac = DomainSampler([a for a, _ in cac], [p for _, p in cac], cfg.position_bins, rng)
    s_nocac = DomainSampler([a for a, _ in nocac], [p for _, p in nocac], cfg.position_bins, rng)
    models = build_models(cfg)
    g_r, g_s, d_cac, d_nocac = (models[k] for k in ("g_r", "g_s", "d_cac", "d_nocac"))
    opt_g = torch.optim.Adam(list(g_r.parameters()) + list(g_s.parameters()), lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(list(d_cac.parameters()) + list(d_nocac.parameters()),
                             lr=cfg.disc_lr or cfg.lr, betas=cfg.adam_betas)
    history = []
    for m in models.values():
        m.train()
    for it in range(1, cfg.iterations + 1):
        xc = _to_tensor([augment(a, cfg.side, rng, cfg) for a in s_cac.draw(cfg.batch)])
        xn = _to_tensor([augment(a, cfg.side, rng, cfg) for a in s_nocac.draw(cfg.batch)])

        with torch.no_grad():
            fakes = {"nocac_hat": xc - g_r(xc), "cac_hat": xn + g_s(xn)}
        d_loss = discriminator_losses(xc, xn, fakes, d_cac, d_nocac, cfg)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        terms = gan_losses(xc, xn, g_r, g_s, d_cac, d_nocac, cfg)
        opt_g.zero_grad()
        terms.total.backward()
        opt_g.step()

        if it % cfg.log_every == 0 or it == cfg.iterations:
            rec = {"iteration": it, **terms.values(), "discriminator": float(d_loss.detach())}
            history.append(rec)
            log.info("cyclegan %s", " ".join(f"{k}={v:.4g}" for k, v in rec.items()))
            if callback:
                callback(it, models, rec)
        if out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir, models, cfg, it)
    for m in models.values():
        m.eval()
    if out_dir:
        save_checkpoint(out_dir, models, cfg, cfg.iterations)
    return models, history
