"""Caption branch: word features to the joint space, then shared pooling.

Word-level features arrive precomputed by default (frozen-backbone mode) or
from a pluggable live backbone adapter. There is no text-side enhancement;
the only learned pieces are the joint-space projection and the pooling
coefficient generator (its own instance, separate from the image branch).
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn

from .feature_store import TokenFeatureSet
from .pooling import LearnedPooling, _xavier_init

ADAPTER_MODES = ("precomputed", "frozen-live", "trainable-live")


class BackboneAdapter(Protocol):
    """Produces word-level features [l, dT] for raw caption input.

    Implementations must be deterministic in eval mode and emit vectors whose
    dimension matches the configured token dimension.
    """

    def extract(self, raw: object) -> np.ndarray: ...


_BACKBONES: dict[str, Callable[[], BackboneAdapter]] = {}


def register_backbone(backbone_id: str,
                      factory: Callable[[], BackboneAdapter]) -> None:
    _BACKBONES[backbone_id] = factory


def resolve_backbone(mode: str, backbone_id: str = "") -> BackboneAdapter | None:
    """Return the adapter for live modes; None for precomputed features."""
    if mode not in ADAPTER_MODES:
        raise ValueError(f"unknown text mode `{mode}`")
    if mode == "precomputed":
        return None
    if backbone_id not in _BACKBONES:
        raise ValueError(f"no backbone registered under id `{backbone_id}`")
    return _BACKBONES[backbone_id]()


class TextEncoder(nn.Module):
    """Word-feature projection plus learned pooling."""

    def __init__(self,
                 token_dim: int,
                 joint_dim: int,
                 pool_d_t: int = 32,
                 pool_hidden: int = 128,
                 n_max: int = 100):
        super().__init__()
        self.fc = nn.Linear(token_dim, joint_dim)
        _xavier_init(self.fc)
        self.pool = LearnedPooling(d_t=pool_d_t, hidden=pool_hidden, n_max=n_max)

    def forward(self, tokens: torch.Tensor,
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        """tokens: [B, L, dT]; lengths: [B]. Padded rows contribute nothing."""
        if tokens.dim() != 3:
            raise ValueError("tokens must be [B, L, dT]")
        if lengths is not None and (lengths < 1).any():
            raise ValueError("captions must contain at least one token")
        projected = self.fc(tokens)
        return self.pool(projected, lengths)

    def encode(self, caption: TokenFeatureSet) -> torch.Tensor:
        """Embed a single caption; returns a [dJ] vector."""
        if caption.length < 1:
            raise ValueError(f"caption {caption.caption_id} is empty")
        p = next(self.parameters())
        tokens = torch.as_tensor(
            np.ascontiguousarray(caption.tokens[None, :caption.length]),
            dtype=p.dtype, device=p.device)
        lengths = torch.tensor([caption.length], dtype=torch.long)
        return self.forward(tokens, lengths).squeeze(0)

    def encode_raw(self, raw: object, adapter: BackboneAdapter) -> torch.Tensor:
        """Embed a raw caption through a live backbone adapter."""
        feats = np.asarray(adapter.extract(raw))
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("adapter must return a [l, dT] feature matrix")
        if feats.shape[1] != self.fc.in_features:
            raise ValueError(
                f"adapter emitted dimension {feats.shape[1]}, "
                f"encoder expects {self.fc.in_features}")
        p = next(self.parameters())
        tokens = torch.as_tensor(feats[None], dtype=p.dtype, device=p.device)
        lengths = torch.tensor([feats.shape[0]], dtype=torch.long)
        return self.forward(tokens, lengths).squeeze(0)
