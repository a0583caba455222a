"""A 2-D MLP GAN on an eight-Gaussian ring.

Convolutional image training is not verifiable at desk scale, so this tiny
regime exists purely to make the alternating-update dynamics testable: after
a few thousand steps the generator should cover most of the ring's modes.
Mode coverage is the diagnostic for the collapse failure where a generator
emits nearly identical samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import gan_loss, generator_objective
from .optim import Adam


@dataclass
class ToyConfig:
    n_modes: int = 8
    radius: float = 2.0
    sigma: float = 0.15
    z_dim: int = 16
    hidden: int = 128
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    steps: int = 5000
    seed: int = 0


def mode_centers(n_modes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def ring_samples(cfg: ToyConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    centers = mode_centers(cfg.n_modes, cfg.radius)
    which = rng.integers(cfg.n_modes, size=n)
    return (centers[which] + rng.normal(0, cfg.sigma, (n, 2))).astype(np.float32)


class ToyGenerator(nn.Module):
    def __init__(self, z_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(z_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 2)

    def forward(self, z):
        h = F.relu(self.fc1(z))
        h = F.relu(self.fc2(h))
        return self.fc3(h)


class ToyDiscriminator(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)

    def forward(self, x):
        h = F.leaky_relu(self.fc1(x), 0.2)
        h = F.leaky_relu(self.fc2(h), 0.2)
        return torch.sigmoid(self.fc3(h)).squeeze(1)


def _init(module: nn.Module, seed: int):
    g = torch.Generator().manual_seed(seed)
    for mod in module.modules():
        if isinstance(mod, nn.Linear):
            with torch.no_grad():
                mod.weight.normal_(0.0, 0.1, generator=g)
                mod.bias.zero_()


def train_toy(cfg: ToyConfig, progress=None) -> tuple[ToyGenerator, ToyDiscriminator]:
    """Alternating updates (discriminator ascent, then generator descent with
    the fresh discriminator), non-saturating generator objective."""
    seeds = [int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3)]
    gen = ToyGenerator(cfg.z_dim, cfg.hidden)
    disc = ToyDiscriminator(cfg.hidden)
    _init(gen, seeds[0])
    _init(disc, seeds[1])
    rng = np.random.default_rng(seeds[2])
    betas = (cfg.beta1, cfg.beta2)
    opt_d = Adam(dict(disc.named_parameters()), cfg.learning_rate, betas)
    opt_g = Adam(dict(gen.named_parameters()), cfg.learning_rate, betas)

    for step in range(cfg.steps):
        real = torch.from_numpy(ring_samples(cfg, rng, cfg.batch_size))
        z = torch.from_numpy(rng.uniform(-1, 1, (cfg.batch_size, cfg.z_dim)).astype(np.float32))
        fake = gen(z)

        d_loss = gan_loss(disc(real), disc(fake.detach()))
        opt_d.zero_grad()
        (-d_loss.tensor).backward()
        opt_d.step()

        g_loss = generator_objective(disc(fake))
        opt_g.zero_grad()
        g_loss.tensor.backward()
        opt_g.step()

        if progress is not None and (step + 1) % 1000 == 0:
            progress(step + 1, d_loss.value, g_loss.value)
    return gen, disc


def generate(gen: ToyGenerator, cfg: ToyConfig, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.uniform(-1, 1, (n, cfg.z_dim)).astype(np.float32))
    with torch.no_grad():
        return gen(z).numpy()


def mode_coverage(samples: np.ndarray, cfg: ToyConfig,
                  min_fraction: float = 0.02, n_sigma: float = 3.0) -> int:
    """Number of ring modes holding at least ``min_fraction`` of the samples
    within ``n_sigma`` standard deviations of their center."""
    centers = mode_centers(cfg.n_modes, cfg.radius)
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = d.argmin(axis=1)
    within = d[np.arange(len(samples)), nearest] <= n_sigma * cfg.sigma
    covered = 0
    for mode in range(cfg.n_modes):
        hits = np.sum((nearest == mode) & within)
        if hits >= math.ceil(min_fraction * len(samples)):
            covered += 1
    return covered
