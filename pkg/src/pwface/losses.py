"""Loss terms of the multi-task objective as pure functions of network outputs.

Pixel losses are means over every pixel and channel so the default weights
carry over between image sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

GENERATOR_TERMS = ("aux", "feat", "adv", "rec_cls", "rec", "l1", "gan")
DISCRIMINATOR_TERMS = ("gan_d", "adv_d")


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    aux: float = 1.0
    feat: float = 2.0
    adv: float = 2.0
    rec_cls: float = 1.0
    l1: float = 10.0
    rec: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise LossError(f"loss weight {f.name} must be nonnegative")

    def for_term(self, name: str) -> float:
        # the photo-realism terms are unweighted
        if name in ("gan", "gan_d"):
            return 1.0
        if name == "adv_d":
            return self.adv
        return getattr(self, name)


@dataclass
class LossBreakdown:
    stage: str
    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    total: Optional[torch.Tensor] = None

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        return out


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l_dis(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    """Hinged cosine similarity max(0, cos(e1, e2)), averaged over the batch."""
    _check_same_shape(e1, e2)
    if e1.dim() == 1:
        e1, e2 = e1[None], e2[None]
    n1, n2 = e1.norm(dim=1), e2.norm(dim=1)
    if bool((n1 == 0).any()) or bool((n2 == 0).any()):
        raise LossError("cosine similarity undefined for a zero-norm embedding")
    cos = (e1 * e2).sum(dim=1) / (n1 * n2)
    return cos.clamp(min=0).mean()


def l_feat(emb_a1, emb_a2, emb_wr1, emb_wr2, pairs: Sequence[str] = ("aa", "ww", "aw")) -> torch.Tensor:
    """Sum of the dissimilarity terms over (A1, A2), (WR1, WR2) and (A1, WR1).

    ``pairs`` selects a subset for the ablations.
    """
    parts = {
        "aa": lambda: l_dis(emb_a1, emb_a2),
        "ww": lambda: l_dis(emb_wr1, emb_wr2),
        "aw": lambda: l_dis(emb_a1, emb_wr1),
    }
    return sum(parts[k]() for k in pairs)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise LossError(f"label out of range for {k} classes")
    return F.cross_entropy(logits, labels, reduction=reduction)


def l_adv_generator(
    logits_a: torch.Tensor,
    logits_wr: Optional[torch.Tensor],
    labels: torch.Tensor,
    floor: Optional[float] = None,
) -> torch.Tensor:
    """-CE(F(A), y) - CE(F(WR), y). Each negated term is kept >= ``floor``
    per sample (default -2 ln K) so the term cannot run off to -inf."""
    k = logits_a.shape[-1]
    cap = -floor if floor is not None else 2 * math.log(k)
    out = -cross_entropy(logits_a, labels, "none").clamp(max=cap).mean()
    if logits_wr is not None:
        out = out - cross_entropy(logits_wr, labels, "none").clamp(max=cap).mean()
    return out


def l_adv_discriminator(
    logits_i: torch.Tensor, logits_a: torch.Tensor, logits_wr: Optional[torch.Tensor], labels: torch.Tensor
) -> torch.Tensor:
    """F's side: classify the real and both transformed faces as the real identity."""
    out = cross_entropy(logits_i, labels) + cross_entropy(logits_a, labels)
    if logits_wr is not None:
        out = out + cross_entropy(logits_wr, labels)
    return out


def l_rec(recovered: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    _check_same_shape(recovered, original)
    return (recovered - original).abs().mean()


def l_rec_cls(logits_r: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(logits_r, labels)


def l_background(anon: torch.Tensor, wrong: Optional[torch.Tensor], original: torch.Tensor) -> torch.Tensor:
    out = l_rec(anon, original)
    if wrong is not None:
        out = out + l_rec(wrong, original)
    return out


def lsgan_d(real_scores: Iterable[torch.Tensor], fake_scores: Iterable[torch.Tensor]) -> torch.Tensor:
    """1/2 mean((D(real)-1)^2) + 1/2 mean(D(fake)^2), summed over discriminators."""
    real_scores, fake_scores = list(real_scores), list(fake_scores)
    if len(real_scores) != len(fake_scores):
        raise LossError("need one real and one fake score grid per discriminator")
    total = 0.0
    for r, f in zip(real_scores, fake_scores):
        total = total + 0.5 * ((r - 1) ** 2).mean() + 0.5 * (f**2).mean()
    return total


def lsgan_g(fake_scores: Iterable[torch.Tensor]) -> torch.Tensor:
    return sum(((f - 1) ** 2).mean() for f in fake_scores)


def l_aux(logits: torch.Tensor, chunk_targets: torch.Tensor) -> torch.Tensor:
    """Sum over password chunks of the per-chunk cross-entropy, batch-averaged.

    ``logits`` is (B, N/4, 16); ``chunk_targets`` is (B, N/4).
    """
    if logits.dim() != 3 or logits.shape[:2] != chunk_targets.shape:
        raise LossError(f"head count mismatch: logits {tuple(logits.shape)}, targets {tuple(chunk_targets.shape)}")
    b, h, k = logits.shape
    ce = cross_entropy(logits.reshape(b * h, k), chunk_targets.reshape(b * h), "none").view(b, h)
    return ce.sum(dim=1).mean()


def _weighted_total(terms: Mapping[str, torch.Tensor], weights: LossWeights, required: Iterable[str]) -> torch.Tensor:
    missing = [t for t in required if t not in terms]
    if missing:
        raise LossError(f"missing loss terms: {missing}")
    total = 0.0
    for name, value in terms.items():
        w = weights.for_term(name)
        if w:
            total = total + w * value
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total))


def total_generator_loss(
    terms: Mapping[str, torch.Tensor], weights: LossWeights, required: Iterable[str] = GENERATOR_TERMS
) -> torch.Tensor:
    unknown = set(terms) - set(GENERATOR_TERMS)
    if unknown:
        raise LossError(f"not generator-stage terms: {sorted(unknown)}")
    return _weighted_total(terms, weights, required)


def total_discriminator_loss(
    terms: Mapping[str, torch.Tensor], weights: LossWeights, required: Iterable[str] = DISCRIMINATOR_TERMS
) -> torch.Tensor:
    unknown = set(terms) - set(DISCRIMINATOR_TERMS)
    if unknown:
        raise LossError(f"not discriminator-stage terms: {sorted(unknown)}")
    return _weighted_total(terms, weights, required)
