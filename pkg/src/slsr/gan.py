"""Per-cluster DCGAN training and sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import ImageRecord
from .optim import NumericError, seeded

logger = logging.getLogger(__name__)


@dataclass
class GanConfig:
    latent_dim: int = 100
    image_size: int = 128
    base_channels: int = 64
    epochs: int = 30
    batch_size: int = 64
    adam_lr: float = 0.0002
    adam_beta1: float = 0.5
    seed: int = 0
    max_steps: Optional[int] = None
    loss: str = "non_saturating"

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.loss not in ("non_saturating", "minimax"):
            raise ValueError(f"unknown generator loss {self.loss!r}")

    @classmethod
    def desk(cls, **kw) -> "GanConfig":
        kw.setdefault("image_size", 32)
        kw.setdefault("base_channels", 64)
        kw.setdefault("batch_size", 32)
        return cls(**kw)

    def to_json(self) -> dict:
        return asdict(self)


class Generator(nn.Module):
    """Linear projection to ``s/16 x s/16 x 8c``, four 5x5 stride-2 deconvolutions, tanh."""

    def __init__(self, latent_dim: int, image_size: int, base: int):
        super().__init__()
        self.s0 = image_size // 16
        self.c0 = base * 8
        self.project = nn.Sequential(
            nn.Linear(latent_dim, self.c0 * self.s0 * self.s0, bias=False),
            nn.BatchNorm1d(self.c0 * self.s0 * self.s0),
            nn.ReLU(True),
        )
        chans = [base * 8, base * 4, base * 2, base, 3]
        layers = []
        for i in range(4):
            layers.append(nn.ConvTranspose2d(chans[i], chans[i + 1], 5, stride=2, padding=2,
                                             output_padding=1, bias=i == 3))
            if i < 3:
                layers += [nn.BatchNorm2d(chans[i + 1]), nn.ReLU(True)]
        layers.append(nn.Tanh())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        h = self.project(z).view(-1, self.c0, self.s0, self.s0)
        return self.deconv(h)


class Discriminator(nn.Module):
    """Four 5x5 stride-2 convolutions with batch norm, a linear layer and a sigmoid."""

    def __init__(self, image_size: int, base: int):
        super().__init__()
        chans = [3, base, base * 2, base * 4, base * 8]
        layers = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 5, stride=2, padding=2, bias=False),
                       nn.BatchNorm2d(chans[i + 1]), nn.LeakyReLU(0.2, True)]
        self.conv = nn.Sequential(*layers)
        s = image_size // 16
        self.head = nn.Linear(base * 8 * s * s, 1)

    def logits(self, x):
        return self.head(self.conv(x).flatten(1)).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def _dcgan_init(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


@dataclass
class GanPair:
    generator: Generator
    discriminator: Discriminator
    cluster_id: int
    config: GanConfig
    steps_trained: int = 0
    history: list = field(default_factory=list)


def init_pair(cfg: GanConfig, cluster_id: int = 0) -> GanPair:
    with seeded(_stream(cfg.seed, cluster_id, 0)):
        g = Generator(cfg.latent_dim, cfg.image_size, cfg.base_channels)
        d = Discriminator(cfg.image_size, cfg.base_channels)
        g.apply(_dcgan_init)
        d.apply(_dcgan_init)
    return GanPair(g, d, cluster_id, cfg)


def _stream(seed: int, cluster_id: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, cluster_id, purpose]).generate_state(1)[0])


def _latent(n: int, dim: int, gen: torch.Generator) -> torch.Tensor:
    return torch.rand(n, dim, generator=gen) * 2.0 - 1.0


def _stack(images: Sequence[ImageRecord], size: int) -> torch.Tensor:
    arrs = []
    for r in images:
        r.load()
        if r.pixels.shape[:2] != (size, size):
            raise ValueError(f"image {r.image_id} is {r.pixels.shape[:2]}, GAN expects {size}x{size}")
        arrs.append(np.asarray(r.pixels, dtype=np.float32))
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy())


def _bce_logits(logits: torch.Tensor, target: float) -> torch.Tensor:
    return nn.functional.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def train_gan(cluster_images: Sequence[ImageRecord], cfg: GanConfig, cluster_id: int = 0) -> GanPair:
    """Alternating updates: D ascends ``log D(x) + log(1 - D(G(z)))``; G either
    descends ``log(1 - D(G(z)))`` (minimax) or ascends ``log D(G(z))``."""
    pair = init_pair(cfg, cluster_id)
    if not cluster_images:
        raise ValueError("no images for GAN training")
    data = _stack(cluster_images, cfg.image_size)
    n = data.shape[0]
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = cfg.epochs * steps_per_epoch if cfg.max_steps is None else cfg.max_steps
    if total <= 0:
        return pair

    G, D = pair.generator, pair.discriminator
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.adam_lr, betas=(cfg.adam_beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.adam_lr, betas=(cfg.adam_beta1, 0.999))
    gen = torch.Generator().manual_seed(_stream(cfg.seed, cluster_id, 1))
    G.train()
    D.train()
    step = 0
    with seeded(_stream(cfg.seed, cluster_id, 2)):
        while step < total:
            perm = torch.randperm(n, generator=gen)
            for b in range(steps_per_epoch):
                if step >= total:
                    break
                real = data[perm[b * bs:(b + 1) * bs]]
                z = _latent(real.shape[0], cfg.latent_dim, gen)
                fake = G(z)

                d_real = _bce_logits(D.logits(real), 1.0)
                d_fake = _bce_logits(D.logits(fake.detach()), 0.0)
                d_loss = d_real + d_fake
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

                fake_logits = D.logits(fake)
                if cfg.loss == "non_saturating":
                    g_loss = _bce_logits(fake_logits, 1.0)
                else:
                    g_loss = -_bce_logits(fake_logits, 0.0)
                opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                opt_g.step()

                rec = {"step": step, "d_loss": d_loss.item(), "d_real": d_real.item(),
                       "d_fake": d_fake.item(), "g_loss": g_loss.item()}
                if not all(math.isfinite(v) for v in rec.values()):
                    raise NumericError(f"non-finite GAN loss at step {step} (cluster {cluster_id})")
                pair.history.append(rec)
                step += 1
    pair.steps_trained = step
    logger.debug("cluster %d GAN: %d steps, last %s", cluster_id, step, pair.history[-1])
    return pair


def sample(pair: GanPair, n: int, seed: int, start_index: int = 0) -> list[ImageRecord]:
    """Draw ``n`` images in [-1, 1]; batch-norm statistics are frozen (eval mode)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(_stream(seed, pair.cluster_id, 3))
    G = pair.generator
    G.eval()
    with torch.no_grad():
        z = _latent(n, pair.config.latent_dim, gen)
        imgs = torch.cat([G(z[s:s + 256]) for s in range(0, n, 256)])
    arr = imgs.permute(0, 2, 3, 1).numpy().astype(np.float32)
    return [ImageRecord(image_id=f"gen_c{pair.cluster_id}_{start_index + i:06d}", identity=-1, camera=0,
                        split="generated", pixels=arr[i], cluster=pair.cluster_id) for i in range(n)]


def pseudo_generator_sample(cluster_images: Sequence[ImageRecord], n: int, noise_scale: float, seed: int,
                            cluster_id: int = 0, start_index: int = 0) -> list[ImageRecord]:
    """Stand-in generator: resampled cluster images plus clipped uniform noise."""
    if not cluster_images:
        raise ValueError("empty cluster")
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    rng = np.random.default_rng([seed, cluster_id])
    out = []
    for i in range(n):
        src = cluster_images[int(rng.integers(len(cluster_images)))].load()
        px = np.asarray(src.pixels, dtype=np.float32)
        if noise_scale > 0:
            px = np.clip(px + rng.uniform(-noise_scale, noise_scale, size=px.shape).astype(np.float32), -1.0, 1.0)
        else:
            px = px.copy()
        out.append(ImageRecord(image_id=f"gen_c{cluster_id}_{start_index + i:06d}", identity=-1, camera=0,
                               split="generated", pixels=px, cluster=cluster_id))
    return out
