"""Plain SGD and Adam over named parameter dicts.

Hand-rolled (rather than torch.optim) so the moment arrays serialize directly
into the checkpoint binary format and resumes are bitwise across versions.
Both optimizers minimize; gradient-ascent steps are expressed by negating the
objective before backward.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import CrossganError


def merge_params(groups: dict[str, nn.Module]) -> dict[str, nn.Parameter]:
    """Named parameters of several modules, deduplicated by storage identity.

    Tied parameters reachable under two names are stepped once, under the
    first (sorted) prefix encountered.
    """
    seen: dict[int, str] = {}
    out: dict[str, nn.Parameter] = {}
    for prefix in groups:
        for name, p in groups[prefix].named_parameters():
            if id(p) in seen:
                continue
            seen[id(p)] = f"{prefix}.{name}"
            out[f"{prefix}.{name}"] = p
    return out


class Sgd:
    def __init__(self, params: dict[str, nn.Parameter], lr: float):
        self.params = dict(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p -= self.lr * p.grad

    def state_arrays(self) -> dict[str, torch.Tensor]:
        return {}

    def load_state_arrays(self, arrays, t: int = 0):
        if arrays:
            raise CrossganError("sgd optimizer carries no state arrays")

    @property
    def t(self) -> int:
        return 0


class Adam:
    def __init__(self, params: dict[str, nn.Parameter], lr: float,
                 betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k].mul_(b1).add_(g, alpha=1 - b1)
            self.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            p -= self.lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + self.eps)

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor], t: int):
        self.t = int(t)
        for k in self.params:
            for store, tag in ((self.m, "m"), (self.v, "v")):
                src = arrays.get(f"{tag}.{k}")
                if src is None:
                    raise CrossganError(f"optimizer state missing {tag}.{k}")
                if tuple(src.shape) != tuple(store[k].shape):
                    raise CrossganError(f"optimizer state shape mismatch for {tag}.{k}")
                store[k].copy_(src)


def make_optimizer(kind: str, params: dict[str, nn.Parameter], lr: float,
                   betas=(0.5, 0.999)):
    if kind == "sgd":
        return Sgd(params, lr)
    if kind == "adam":
        return Adam(params, lr, betas)
    raise CrossganError(f"unknown optimizer {kind!r}; expected sgd or adam")
