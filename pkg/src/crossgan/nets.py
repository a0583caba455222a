"""Generator, discriminator, and shared-trunk domain-adaptation networks.

Generator blocks are fractional-strided convolutions + batch norm + ReLU with
a tanh output stage; discriminator blocks are strided convolutions + batch
norm + LeakyReLU(0.2) with a sigmoid realness head. Both ladders start/end at
a 4x4 map, so a resolution-R net has log2(R/4) up/down blocks. Channels halve
per upsample from base_channels * 2^(blocks-1), capped at 8 * base_channels.

The penultimate discriminator activation (flattened final conv features) is a
named output so it can serve as an embedding space.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CrossganError


@dataclass(frozen=True)
class GeneratorSpec:
    z_dim: int = 1024
    resolution: int = 64
    base_channels: int = 128


@dataclass(frozen=True)
class DiscriminatorSpec:
    resolution: int = 64
    base_channels: int = 128


@dataclass(frozen=True)
class CoupledSpec:
    """Two GAN pairs with early generator blocks and final discriminator blocks tied."""

    gen: GeneratorSpec
    disc: DiscriminatorSpec
    tie_gen: tuple[str, ...] | None = None   # default: all generator blocks except the final two
    tie_disc: tuple[str, ...] | None = None  # default: last conv block + realness head


@dataclass(frozen=True)
class DannSpec:
    """Two independent generators plus a shared conv trunk with realness and domain heads."""

    gen: GeneratorSpec
    disc: DiscriminatorSpec
    classifier_width: int = 256
    n_domains: int = 2


def n_blocks(resolution: int) -> int:
    """Up/downsampling block count between a 4x4 map and the image."""
    if resolution < 8:
        raise CrossganError(f"resolution {resolution} too small (minimum 8)")
    n = math.log2(resolution / 4)
    if n != int(n):
        raise CrossganError(
            f"resolution {resolution} is not a power-of-two multiple of 4"
        )
    return int(n)


def _gen_channels(base: int, blocks: int) -> list[int]:
    return [min(base * 2 ** (blocks - 1 - s), 8 * base) for s in range(blocks)]


def _disc_channels(base: int, blocks: int) -> list[int]:
    return [min(base * 2 ** s, 8 * base) for s in range(blocks)]


def feature_width(resolution: int, base_channels: int) -> int:
    """Width F of the flattened penultimate discriminator activation."""
    return 16 * _disc_channels(base_channels, n_blocks(resolution))[-1]


class _Project(nn.Module):
    """z -> 4x4 seed map, with batch norm and ReLU."""

    def __init__(self, z_dim: int, channels: int):
        super().__init__()
        self.fc = nn.Linear(z_dim, channels * 16, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, z):
        x = self.fc(z).view(z.shape[0], -1, 4, 4)
        return F.relu(self.bn(x))


class _UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class _DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, 2, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.leaky_relu(self.bn(self.conv(x)), 0.2)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        blocks = n_blocks(spec.resolution)
        ch = _gen_channels(spec.base_channels, blocks)
        self.spec = spec
        self.proj = _Project(spec.z_dim, ch[0])
        self.block_names = ["proj"]
        for s in range(1, blocks):
            setattr(self, f"up{s}", _UpBlock(ch[s - 1], ch[s]))
            self.block_names.append(f"up{s}")
        self.out = nn.ConvTranspose2d(ch[-1], 3, 4, 2, 1, bias=True)
        self.block_names.append("out")

    def forward(self, z, return_activations: bool = False):
        acts = {}
        x = self.proj(z)
        acts["proj"] = x
        for name in self.block_names[1:-1]:
            x = getattr(self, name)(x)
            acts[name] = x
        img = torch.tanh(self.out(x))
        if return_activations:
            return img, acts
        return img


DiscOutput = namedtuple("DiscOutput", ["realness", "features"])


class ConvTrunk(nn.Module):
    """Strided-conv stack from image to flattened 4x4 features."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        blocks = n_blocks(spec.resolution)
        ch = _disc_channels(spec.base_channels, blocks)
        self.spec = spec
        self.block_names = []
        cin = 3
        for s in range(blocks):
            setattr(self, f"blk{s}", _DownBlock(cin, ch[s]))
            self.block_names.append(f"blk{s}")
            cin = ch[s]
        self.feature_width = 16 * ch[-1]

    def forward(self, images):
        x = images
        for name in self.block_names:
            x = getattr(self, name)(x)
        return x.flatten(1)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.trunk = ConvTrunk(spec)
        self.head = nn.Linear(self.trunk.feature_width, 1)

    @property
    def feature_width(self) -> int:
        return self.trunk.feature_width

    def forward(self, images) -> DiscOutput:
        feats = self.trunk(images)
        prob = torch.sigmoid(self.head(feats)).squeeze(1)
        return DiscOutput(prob, feats)


class ClassifierHead(nn.Module):
    """Two-layer domain classifier; the hidden layer is the exposed penultimate."""

    def __init__(self, feature_width: int, hidden: int, n_domains: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_width, hidden)
        self.fc2 = nn.Linear(hidden, n_domains)

    def forward(self, feats):
        penult = F.leaky_relu(self.fc1(feats), 0.2)
        return self.fc2(penult), penult


DannOutput = namedtuple(
    "DannOutput",
    ["realness", "domain_logits", "trunk_features", "classifier_penultimate"],
)


class DannModel(nn.Module):
    """Two generators over a shared discriminator trunk with two heads.

    Parameter groups: gen_s, gen_l, trunk, real_head, cls_head. Both heads
    consume the identical trunk feature vector for the same input.
    """

    GROUPS = ("gen_s", "gen_l", "trunk", "real_head", "cls_head")

    def __init__(self, spec: DannSpec):
        super().__init__()
        self.spec = spec
        self.gen_s = Generator(spec.gen)
        self.gen_l = Generator(spec.gen)
        self.trunk = ConvTrunk(spec.disc)
        self.real_head = nn.Linear(self.trunk.feature_width, 1)
        self.cls_head = ClassifierHead(
            self.trunk.feature_width, spec.classifier_width, spec.n_domains
        )

    def generator(self, domain: str) -> Generator:
        if domain == "S":
            return self.gen_s
        if domain == "L":
            return self.gen_l
        raise CrossganError(f"unknown domain {domain!r}")

    def discriminate(self, images) -> DiscOutput:
        feats = self.trunk(images)
        return DiscOutput(torch.sigmoid(self.real_head(feats)).squeeze(1), feats)

    def classify(self, images):
        feats = self.trunk(images)
        logits, penult = self.cls_head(feats)
        return logits, penult

    def forward(self, images) -> DannOutput:
        feats = self.trunk(images)
        realness = torch.sigmoid(self.real_head(feats)).squeeze(1)
        logits, penult = self.cls_head(feats)
        return DannOutput(realness, logits, feats, penult)


class CoGan(nn.Module):
    """Per-domain GAN pairs with tied early generator / final discriminator blocks."""

    GROUPS = ("gen_s", "gen_l", "disc_s", "disc_l")

    def __init__(self, gen_s, gen_l, disc_s, disc_l, tie_gen, tie_disc):
        super().__init__()
        self.gen_s = gen_s
        self.gen_l = gen_l
        self.disc_s = disc_s
        self.disc_l = disc_l
        self.tie_gen = tuple(tie_gen)
        self.tie_disc = tuple(tie_disc)

    def generator(self, domain: str) -> Generator:
        return {"S": self.gen_s, "L": self.gen_l}[domain]

    def discriminator(self, domain: str) -> Discriminator:
        return {"S": self.disc_s, "L": self.disc_l}[domain]


def _component_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _init_params(module: nn.Module, seed: int):
    """Gaussian(0, 0.02) conv/linear weights, batch-norm scale 1 / shift 0."""
    g = torch.Generator().manual_seed(seed)
    for mod in module.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                mod.weight.normal_(0.0, 0.02, generator=g)
                if mod.bias is not None:
                    mod.bias.zero_()
        elif isinstance(mod, nn.BatchNorm2d):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.zero_()


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    net = Generator(spec)
    _init_params(net, seed)
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Discriminator:
    net = Discriminator(spec)
    _init_params(net, seed)
    return net


def build_dann(spec: DannSpec, seed: int) -> DannModel:
    net = DannModel(spec)
    seeds = _component_seeds(seed, 5)
    for group, s in zip(DannModel.GROUPS, seeds):
        _init_params(getattr(net, group), s)
    return net


def default_tie_gen(spec: GeneratorSpec) -> tuple[str, ...]:
    names = Generator(spec).block_names
    return tuple(names[:-2])


def default_tie_disc(spec: DiscriminatorSpec) -> tuple[str, ...]:
    last = n_blocks(spec.resolution) - 1
    return (f"trunk.blk{last}", "head")


def build_cogan(spec: CoupledSpec, seed: int) -> CoGan:
    tie_gen = spec.tie_gen if spec.tie_gen is not None else default_tie_gen(spec.gen)
    tie_disc = spec.tie_disc if spec.tie_disc is not None else default_tie_disc(spec.disc)
    seeds = _component_seeds(seed, 4)
    gen_s = build_generator(spec.gen, seeds[0])
    gen_l = build_generator(spec.gen, seeds[1])
    disc_s = build_discriminator(spec.disc, seeds[2])
    disc_l = build_discriminator(spec.disc, seeds[3])
    tie_parameters(gen_s, gen_l, tie_gen)
    tie_parameters(disc_s, disc_l, tie_disc)
    return CoGan(gen_s, gen_l, disc_s, disc_l, tie_gen, tie_disc)


CoupledParams = namedtuple("CoupledParams", ["a", "b", "tied"])


def tie_parameters(a: nn.Module, b: nn.Module, tie_list) -> CoupledParams:
    """Alias the listed blocks of ``b`` to ``a``'s storage, in place.

    Tied parameters (and batch-norm buffers) become one array with two views,
    so gradients from both sides accumulate into the same storage.
    """
    for name in tie_list:
        try:
            sub_a = a.get_submodule(name)
            sub_b = b.get_submodule(name)
        except AttributeError:
            raise CrossganError(f"tie target {name!r} not present in both networks") from None
        pa = dict(sub_a.named_parameters())
        pb = dict(sub_b.named_parameters())
        if set(pa) != set(pb):
            raise CrossganError(f"tie target {name!r} has mismatched parameter sets")
        for pname in sorted(pa):
            if pa[pname].shape != pb[pname].shape:
                raise CrossganError(
                    f"tie shape mismatch for {name}.{pname}: "
                    f"{tuple(pa[pname].shape)} vs {tuple(pb[pname].shape)}"
                )
        parent_path, _, leaf = name.rpartition(".")
        parent = b.get_submodule(parent_path) if parent_path else b
        setattr(parent, leaf, sub_a)
    return CoupledParams(a, b, tuple(tie_list))


def tied_state_equal(a: nn.Module, b: nn.Module, tie_list) -> bool:
    """Bitwise equality of the tied blocks as seen through both views."""
    for name in tie_list:
        sa = a.get_submodule(name).state_dict()
        sb = b.get_submodule(name).state_dict()
        for key in sa:
            if not torch.equal(sa[key], sb[key]):
                return False
    return True


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg()


def gradient_reversal(x: torch.Tensor) -> torch.Tensor:
    """Identity on the forward pass; negates the upstream gradient on backward."""
    return _GradReverse.apply(x)
