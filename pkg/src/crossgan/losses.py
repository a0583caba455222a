"""Training objectives: minimax GAN loss, the four-term domain-adaptation
cross-entropy L1, the softmax log-loss L2, and the total energy E = L1 + L2.

Every operation returns a LossReport carrying the scalar value, a per-term
breakdown, and (when built from tensors) the differentiable total for
backpropagation. Expectations are realized as minibatch means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import CrossganError

EPS = 1e-7

LOSS_NAMES = ("L", "L1", "L2", "E", "G")


@dataclass
class LossReport:
    name: str
    value: float
    breakdown: dict[str, float]
    batch_size: int
    clamped: int = 0
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise CrossganError(f"unknown loss name {self.name!r}")
        if not math.isfinite(self.value):
            return  # surfaced by the training loop, not here
        combined = sum(self.breakdown.values())
        if abs(combined - self.value) > 1e-6 * max(1.0, abs(self.value)):
            raise CrossganError(
                f"loss breakdown does not sum to value: {combined} vs {self.value}"
            )

    def log_line(self, iteration: int, label: str | None = None) -> str:
        terms = "\t".join(f"{k}={v:.6f}" for k, v in self.breakdown.items())
        return f"{iteration}\t{label or self.name}\t{self.value:.6f}\t{terms}"


def _as_probs(scores, what: str) -> tuple[torch.Tensor, int]:
    """Validate a probability batch and clamp exact endpoints to [EPS, 1-EPS]."""
    t = torch.as_tensor(scores)
    if not t.is_floating_point():
        t = t.double()
    t = t.reshape(-1)
    if t.numel() == 0:
        raise CrossganError(f"{what} batch is empty")
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise CrossganError(f"{what} scores must lie in [0, 1]")
    clamped = int((t < EPS).sum()) + int((t > 1 - EPS).sum())
    return t.clamp(EPS, 1 - EPS), clamped


def gan_loss(real_scores, fake_scores) -> LossReport:
    """Discriminator objective: mean log f(x) + mean log(1 - f(g(z)))."""
    real, c1 = _as_probs(real_scores, "real")
    fake, c2 = _as_probs(fake_scores, "fake")
    real_term = torch.log(real).mean()
    fake_term = torch.log1p(-fake).mean()
    total = real_term + fake_term
    return LossReport(
        name="L",
        value=total.detach().item(),
        breakdown={"real": real_term.detach().item(), "fake": fake_term.detach().item()},
        batch_size=real.numel() + fake.numel(),
        clamped=c1 + c2,
        tensor=total,
    )


def generator_objective(fake_scores, saturating: bool = False) -> LossReport:
    """Generator loss to minimize.

    Non-saturating (default): -mean log f(g(z)), i.e. generated images are
    treated as real. Saturating: +mean log(1 - f(g(z))), the literal descent
    direction of the minimax objective.
    """
    fake, clamped = _as_probs(fake_scores, "fake")
    if saturating:
        total = torch.log1p(-fake).mean()
        breakdown = {"fake_log1m": total.detach().item()}
    else:
        total = -torch.log(fake).mean()
        breakdown = {"fake_as_real": total.detach().item()}
    return LossReport("G", total.detach().item(), breakdown, fake.numel(), clamped, total)


def da_l1(real_s_scores, real_l_scores, fake_s_scores, fake_l_scores) -> LossReport:
    """Four-term cross entropy over both domains' real and generated batches."""
    real_s, c1 = _as_probs(real_s_scores, "real_s")
    real_l, c2 = _as_probs(real_l_scores, "real_l")
    fake_s, c3 = _as_probs(fake_s_scores, "fake_s")
    fake_l, c4 = _as_probs(fake_l_scores, "fake_l")
    terms = {
        "real_s": torch.log(real_s).mean(),
        "real_l": torch.log(real_l).mean(),
        "fake_s": torch.log1p(-fake_s).mean(),
        "fake_l": torch.log1p(-fake_l).mean(),
    }
    total = sum(terms.values())
    return LossReport(
        name="L1",
        value=total.detach().item(),
        breakdown={k: v.detach().item() for k, v in terms.items()},
        batch_size=real_s.numel() + real_l.numel() + fake_s.numel() + fake_l.numel(),
        clamped=c1 + c2 + c3 + c4,
        tensor=total,
    )


def da_l2(logits, labels) -> LossReport:
    """Mean negative log softmax probability of the true class (max-subtracted)."""
    z = torch.as_tensor(logits)
    if not z.is_floating_point():
        z = z.double()
    if z.ndim != 2:
        raise CrossganError(f"logits must be (N, k), got shape {tuple(z.shape)}")
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n, k = z.shape
    if n == 0:
        raise CrossganError("logits batch is empty")
    if y.shape[0] != n:
        raise CrossganError(f"{n} logit rows but {y.shape[0]} labels")
    if bool((y < 0).any()) or bool((y >= k).any()):
        raise CrossganError(f"labels must lie in [0, {k})")
    shifted = z - z.max(dim=1, keepdim=True).values
    log_probs = shifted - shifted.exp().sum(dim=1, keepdim=True).log()
    total = -log_probs[torch.arange(n), y].mean()
    value = total.detach().item()
    return LossReport("L2", value, {"nll": value}, n, 0, total)


def da_energy(l1: LossReport, l2: LossReport) -> LossReport:
    """Total energy E = L1 + L2."""
    if l1.name != "L1" or l2.name != "L2":
        raise CrossganError(
            f"da_energy expects (L1, L2) reports, got ({l1.name}, {l2.name})"
        )
    tensor = None
    if l1.tensor is not None and l2.tensor is not None:
        tensor = l1.tensor + l2.tensor
    return LossReport(
        name="E",
        value=l1.value + l2.value,
        breakdown={"L1": l1.value, "L2": l2.value},
        batch_size=l1.batch_size + l2.batch_size,
        clamped=l1.clamped + l2.clamped,
        tensor=tensor,
    )
