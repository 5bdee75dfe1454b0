"""Per-modality encoders, modality embeddings, mean imputation and the instance contrastive loss."""

from __future__ import annotations

from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AllMissing, InsufficientBatch, ShapeMismatch


class MaskedBatchNorm(nn.Module):
    """Batch normalization whose batch statistics only use rows flagged as available.

    Missing modality slots hold zeros that are not real observations, so they must
    not pull the statistics. With fewer than two available rows the running
    statistics are used instead.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def normalize(self, z, avail=None):
        n = z.shape[0] if avail is None else int(avail.sum())
        if self.training and n >= 2:
            if avail is None or n == z.shape[0]:
                mean = z.mean(0)
                var = z.var(0, unbiased=False)
            else:
                wts = avail.to(z.dtype).unsqueeze(-1)
                mean = (z * wts).sum(0) / n
                var = ((z - mean) ** 2 * wts).sum(0) / n
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean.detach())
                self.running_var.mul_(1 - m).add_(m * var.detach() * n / (n - 1))
        else:
            mean, var = self.running_mean, self.running_var
        return (z - mean) / torch.sqrt(var + self.eps)

    def forward(self, z, avail=None):
        return self.weight * self.normalize(z, avail) + self.bias


class ModalityEncoder(nn.Module):
    """Two-layer perceptron followed by :class:`MaskedBatchNorm`; output h = gamma * norm(base(x)) + beta."""

    def __init__(self, in_dim, embed_dim, hidden_dim=None):
        super().__init__()
        self.in_dim = in_dim
        hidden_dim = hidden_dim or 2 * embed_dim
        self.base = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, embed_dim))
        self.norm = MaskedBatchNorm(embed_dim)

    def forward(self, x, avail=None, return_normalized=False):
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"encoder expects inputs of length {self.in_dim}, got {x.shape[-1]}")
        z = self.norm.normalize(self.base(x), avail)
        h = self.norm.weight * z + self.norm.bias
        return (h, z) if return_normalized else h


class ModalityEmbeddingTable(nn.Module):
    """One learnable vector per modality, shared by every instance."""

    def __init__(self, n_modalities, embed_dim):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_modalities, embed_dim) / embed_dim ** 0.5)

    def forward(self, batch_size):
        return self.weight.unsqueeze(0).expand(batch_size, -1, -1)


def encode(encoder: ModalityEncoder, raw):
    raw = torch.as_tensor(raw)
    squeeze = raw.dim() == 1
    if squeeze:
        raw = raw.unsqueeze(0)
    h = encoder(raw.to(encoder.norm.weight.dtype))
    return h[0] if squeeze else h


def impute(features_available: Mapping[int, torch.Tensor], missing_set, n_modalities: int) -> dict:
    """Fill every missing modality with the mean of the available features.

    ``features_available`` maps modality index -> feature for the modalities not
    in ``missing_set``; the result covers all ``n_modalities``.
    """
    missing = set(missing_set)
    present = [i for i in range(n_modalities) if i not in missing]
    if not present:
        raise AllMissing("every modality is missing; nothing to impute from")
    absent = [i for i in present if i not in features_available]
    if absent:
        raise ShapeMismatch(f"no feature supplied for available modalities {absent}")
    total = features_available[present[0]]
    for i in present[1:]:
        total = total + features_available[i]
    mean = total / len(present)
    return {i: (features_available[i] if i not in missing else mean) for i in range(n_modalities)}


def impute_batch(h, avail):
    """Batched mean imputation. h: (B, M, C); avail: (B, M) bool.

    Instances with no available modality receive a zero vector.
    """
    mask = avail.unsqueeze(-1)
    kept = torch.where(mask, h, torch.zeros((), dtype=h.dtype))
    count = avail.sum(1, keepdim=True).clamp(min=1).unsqueeze(-1).to(h.dtype)
    mean = kept.sum(1, keepdim=True) / count
    return torch.where(mask, h, mean.expand_as(h))


def contrastive_loss(feats, avail=None, reduction="sum"):
    """Instance-level contrastive loss over per-modality features.

    feats: (B, M, C); avail: (B, M) bool or None (all available). Features are
    l2-normalized inside. Positive terms are ordered pairs (i, j), i != j, of
    available modalities of one instance; the shared denominator sums
    exp(similarity) over every pair of available slots from two different
    instances. ``reduction``: "sum" (total), "mean" (per positive pair) or
    "none" (per-instance sums, shape (B,)).
    """
    if feats.dim() != 3:
        raise ShapeMismatch(f"expected (batch, modalities, dim) features, got shape {tuple(feats.shape)}")
    B, M, _ = feats.shape
    if B < 2:
        raise InsufficientBatch("contrastive loss needs at least 2 instances")
    if avail is None:
        avail = torch.ones(B, M, dtype=torch.bool, device=feats.device)
    z = F.normalize(feats, dim=-1).reshape(B * M, -1)
    a = avail.reshape(B * M)
    inst = torch.arange(B, device=feats.device).repeat_interleave(M)
    sims = z @ z.T
    both = a.unsqueeze(0) & a.unsqueeze(1)
    same = inst.unsqueeze(0) == inst.unsqueeze(1)
    den_mask = both & ~same
    num_mask = both & same & ~torch.eye(B * M, dtype=torch.bool, device=feats.device)

    n_pairs = int(num_mask.sum())
    zero = feats.sum() * 0.0
    if n_pairs == 0 or not bool(den_mask.any()):
        return zero.expand(B).clone() if reduction == "none" else zero
    log_den = torch.logsumexp(sims.masked_fill(~den_mask, float("-inf")).reshape(-1), dim=0)
    per_pair = torch.where(num_mask, log_den - sims, torch.zeros((), dtype=sims.dtype))
    if reduction == "none":
        return per_pair.sum(1).reshape(B, M).sum(1)
    total = per_pair.sum()
    if reduction == "mean":
        return total / n_pairs
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def data_specific_loss(h, avail, reduction="sum"):
    """Contrastive alignment of one instance's available modality features."""
    return contrastive_loss(h, avail, reduction)
