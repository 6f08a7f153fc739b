"""Differentiable losses for source training and source-relaxed adaptation.

Every function accepts a single probability map of shape ``(K, H, W)`` or a
batch ``(B, K, H, W)``.  Reductions are means over pixels and then over
images; the class-ratio KL term is computed per image before averaging.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

EPS = 1e-8
SIMPLEX_ATOL = 1e-4


def _as_batch(pred: torch.Tensor) -> torch.Tensor:
    if pred.dim() == 3:
        return pred.unsqueeze(0)
    if pred.dim() != 4:
        raise ValueError(f"expected a (K,H,W) or (B,K,H,W) map, got shape {tuple(pred.shape)}")
    return pred


def check_simplex(pred: torch.Tensor, atol: float = SIMPLEX_ATOL) -> None:
    """Raise ``ValueError`` unless every pixel of ``pred`` is a probability vector."""
    p = _as_batch(pred).detach()
    if p.numel() == 0:
        raise ValueError("empty probability map")
    if torch.any(p < -atol) or torch.any(p > 1 + atol):
        raise ValueError("probability map has entries outside [0, 1]")
    err = (p.sum(dim=1) - 1).abs().max().item()
    if err > atol:
        raise ValueError(f"probability map is not normalised over classes (max error {err:.2e})")


def _safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=EPS))


def one_hot(target: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B,H,W) or (H,W) integer mask -> float one-hot with the class axis at dim 1 (or 0)."""
    if target.dtype.is_floating_point:
        raise TypeError("label mask must be an integer tensor")
    if target.numel() and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(f"label mask has entries outside [0, {num_classes})")
    oh = F.one_hot(target.long(), num_classes).to(torch.get_default_dtype())
    return oh.movedim(-1, -3)


def cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross-entropy between soft predictions and a hard mask."""
    p = _as_batch(pred)
    y = target.unsqueeze(0) if target.dim() == 2 else target
    if y.dim() != 3 or p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    check_simplex(p)
    y = one_hot(y, p.shape[1]).to(p.dtype)
    return -(y * _safe_log(p)).sum(dim=1).mean()


def entropy_loss(pred: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel Shannon entropy (nats); lies in ``[0, ln K]``."""
    p = _as_batch(pred)
    check_simplex(p)
    return -(p * _safe_log(p)).sum(dim=1).mean()


def predicted_ratio(pred: torch.Tensor) -> torch.Tensor:
    """Soft class proportions: spatial mean of the probabilities.

    Returns shape ``(K,)`` for a single map and ``(B, K)`` for a batch.
    """
    if pred.shape[-1] * pred.shape[-2] == 0 or pred.numel() == 0:
        raise ValueError("cannot compute class ratio of an empty image")
    if pred.dim() not in (3, 4):
        raise ValueError(f"expected a (K,H,W) or (B,K,H,W) map, got shape {tuple(pred.shape)}")
    return pred.mean(dim=(-2, -1))


def kl_ratio(prior: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """KL(prior || predicted), averaged over images when batched.

    The prior is treated as a constant; zero prior entries contribute nothing.
    """
    prior = torch.as_tensor(prior, dtype=predicted.dtype, device=predicted.device).detach()
    if prior.shape[-1] != predicted.shape[-1]:
        raise ValueError(f"class count mismatch: prior K={prior.shape[-1]}, predicted K={predicted.shape[-1]}")
    if prior.dim() == 1 and predicted.dim() == 2:
        prior = prior.expand_as(predicted)
    if prior.shape != predicted.shape:
        raise ValueError(f"shape mismatch: prior {tuple(prior.shape)} vs predicted {tuple(predicted.shape)}")
    # x log x -> 0 at x = 0
    terms = torch.where(prior > 0, prior * (_safe_log(prior) - _safe_log(predicted)), torch.zeros_like(prior))
    return terms.sum(dim=-1).mean()


class AdaptationTerms(NamedTuple):
    total: torch.Tensor
    entropy: torch.Tensor
    kl: torch.Tensor


def adaptation_terms(pred: torch.Tensor, prior: torch.Tensor, lam: float) -> AdaptationTerms:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    ent = entropy_loss(pred)
    kl = kl_ratio(prior, predicted_ratio(pred))
    return AdaptationTerms(ent + lam * kl, ent, kl)


def adaptation_loss(pred: torch.Tensor, prior: torch.Tensor, lam: float = 1e-2) -> torch.Tensor:
    """Entropy of the target predictions plus ``lam`` times the class-ratio KL."""
    return adaptation_terms(pred, prior, lam).total


def adasource_loss(
    source_pred: torch.Tensor,
    source_target: torch.Tensor,
    target_pred: torch.Tensor,
    prior: torch.Tensor,
    lam: float = 1e-2,
) -> torch.Tensor:
    """Supervised source cross-entropy plus the target class-ratio KL (needs both domains)."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    ce = cross_entropy(source_pred, source_target)
    return ce + lam * kl_ratio(prior, predicted_ratio(target_pred))
