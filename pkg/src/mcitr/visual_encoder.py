"""Region-feature enhancement and projection into the joint space.

Two mutually exclusive enhancement paths produce a global image vector:

* self-guided: score each region against the average region feature through
  two tanh+batch-norm mapped branches, softmax the scores, and L2-normalize
  the weighted region sum;
* clip-guided: lift a (frozen, precomputed) clip image vector through two
  batch-normed fully-connected layers with a GELU in between.

The global vector then re-weights the regions additively, and a fully
connected layer maps the enhanced regions to the joint space where the shared
learned pooling aggregates them.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pooling import LearnedPooling, _xavier_init


class DegenerateInputError(ValueError):
    """Raised when an input collapses the computation (e.g. zero-norm sum)."""


def average_global(regions: torch.Tensor) -> torch.Tensor:
    """Mean over the region axis: [..., K, d] -> [..., d]. K must be >= 1."""
    if regions.dim() < 2 or regions.shape[-2] < 1:
        raise ValueError("regions must have at least one region row")
    return regions.mean(dim=-2)


class SingleSampleSafeBatchNorm(nn.BatchNorm1d):
    """BatchNorm1d that falls back to running statistics for 1-sample batches."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] <= 1:
            return F.batch_norm(x, self.running_mean, self.running_var,
                                self.weight, self.bias, False, 0.0, self.eps)
        return super().forward(x)


class TanhBatchNorm(nn.Module):
    """Tanh followed by batch normalization over all leading dims."""

    def __init__(self, dim: int):
        super().__init__()
        self.bn = SingleSampleSafeBatchNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        flat = torch.tanh(x).reshape(-1, shape[-1])
        return self.bn(flat).reshape(shape)


class SelfGuidedEnhancement(nn.Module):
    """Global image vector from attention of regions against their average.

    Regions and the average feature go through separate affine + tanh +
    batch-norm branches; their elementwise product is scored by a single
    linear unit, softmaxed over regions, and the weighted region sum is
    L2-normalized.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.region_map = nn.Linear(dim, dim)
        self.global_map = nn.Linear(dim, dim)
        self.region_tb = TanhBatchNorm(dim)
        self.global_tb = TanhBatchNorm(dim)
        self.score = nn.Linear(dim, 1, bias=False)
        _xavier_init(self.region_map)
        _xavier_init(self.global_map)
        _xavier_init(self.score)

    def forward(self, regions: torch.Tensor,
                v_ave: torch.Tensor | None = None,
                return_weights: bool = False):
        if regions.dim() != 3:
            raise ValueError("regions must be [B, K, d]")
        if v_ave is None:
            v_ave = average_global(regions)
        g = self.global_tb(self.global_map(v_ave))          # [B, d]
        r = g.unsqueeze(1) * self.region_tb(self.region_map(regions))
        logits = self.score(r).squeeze(-1)                  # [B, K]
        weights = torch.softmax(logits, dim=1)
        pooled = (weights.unsqueeze(-1) * regions).sum(dim=1)
        norm = pooled.norm(dim=-1, keepdim=True)
        if (norm == 0).any():
            raise DegenerateInputError("weighted region sum has zero norm")
        v_glo = pooled / norm
        return (v_glo, weights) if return_weights else v_glo


class ClipGuidedEnhancement(nn.Module):
    """Global image vector lifted from a clip image embedding.

    Accepts either a pooled [B, clip_dim] vector (default; the clip backbone
    is frozen and its output precomputed) or a spatial [B, HW, clip_dim] map,
    which is layer-normalized and mean-pooled first.
    """

    def __init__(self, clip_dim: int, region_dim: int):
        super().__init__()
        self.spatial_norm = nn.LayerNorm(clip_dim)
        self.bn_in = SingleSampleSafeBatchNorm(clip_dim)
        self.fc1 = nn.Linear(clip_dim, region_dim)
        self.bn_mid = SingleSampleSafeBatchNorm(region_dim)
        self.fc2 = nn.Linear(region_dim, region_dim)
        _xavier_init(self.fc1)
        _xavier_init(self.fc2)

    def forward(self, clip_feat: torch.Tensor) -> torch.Tensor:
        if clip_feat.dim() == 3:
            clip_feat = self.spatial_norm(clip_feat).mean(dim=1)
        elif clip_feat.dim() != 2:
            raise ValueError("clip feature must be [B, d] or [B, HW, d]")
        h = self.fc1(self.bn_in(clip_feat))
        h = self.bn_mid(F.gelu(h))
        return self.fc2(h)


def enhance_regions(regions: torch.Tensor,
                    v_glo: torch.Tensor,
                    return_weights: bool = False):
    """Add the softmax-weighted global vector to each region.

    Weights are the softmax over regions of the inner product between the
    global vector and each region, so the output is equivariant to region
    permutation. A zero global vector leaves regions unchanged.
    """
    if regions.dim() != 3:
        raise ValueError("regions must be [B, K, d]")
    if not torch.isfinite(v_glo).all():
        raise ValueError("global vector must be finite")
    logits = torch.einsum("bkd,bd->bk", regions, v_glo)
    weights = torch.softmax(logits, dim=1)
    enhanced = regions + weights.unsqueeze(-1) * v_glo.unsqueeze(1)
    return (enhanced, weights) if return_weights else enhanced


class ImageEncoder(nn.Module):
    """Full image branch: enhancement, joint-space projection, pooling."""

    def __init__(self,
                 region_dim: int,
                 joint_dim: int,
                 enhancement: str = "sge",
                 clip_dim: int | None = None,
                 pool_d_t: int = 32,
                 pool_hidden: int = 128,
                 n_max: int = 36):
        super().__init__()
        if enhancement not in ("none", "sge", "cge"):
            raise ValueError(f"unknown enhancement `{enhancement}`")
        self.enhancement = enhancement
        if enhancement == "sge":
            self.sge = SelfGuidedEnhancement(region_dim)
        elif enhancement == "cge":
            if clip_dim is None:
                raise ValueError("cge enhancement requires clip_dim")
            self.cge = ClipGuidedEnhancement(clip_dim, region_dim)
        self.fc = nn.Linear(region_dim, joint_dim)
        _xavier_init(self.fc)
        self.pool = LearnedPooling(d_t=pool_d_t, hidden=pool_hidden, n_max=n_max)

    def global_vector(self, regions: torch.Tensor,
                      clip_global: torch.Tensor | None = None) -> torch.Tensor | None:
        if self.enhancement == "sge":
            return self.sge(regions)
        if self.enhancement == "cge":
            if clip_global is None:
                raise ValueError("cge enhancement requires a clip feature")
            return self.cge(clip_global)
        return None

    def forward(self, regions: torch.Tensor,
                clip_global: torch.Tensor | None = None) -> torch.Tensor:
        v_glo = self.global_vector(regions, clip_global)
        x = regions if v_glo is None else enhance_regions(regions, v_glo)
        projected = self.fc(x)                              # [B, K, dJ]
        return self.pool(projected)
