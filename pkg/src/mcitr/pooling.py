"""Learned set-to-vector aggregation shared by both encoders.

A variable-length set of joint-space vectors is reduced to one holistic
embedding: per-position coefficients are generated from trigonometric
position codes by a BiGRU + MLP head (they depend only on the sequence
length, never on feature values), normalized to sum to 1 with a masked
softmax, and applied to the per-dimension descending sort of the features.
Sorting makes the result permutation-invariant; with coefficients
(1, 0, ..., 0) it reduces to max pooling, with uniform coefficients to mean
pooling.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


def positional_encoding(n: int,
                        dim: int,
                        dtype: torch.dtype = torch.float32,
                        device: torch.device | None = None) -> torch.Tensor:
    """[n, dim] table of sin/cos position codes for positions 0..n-1.

    Column 2j holds sin(w_j t) and column 2j+1 holds cos(w_j t) with
    w_j = 10000^(-2j / dim).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    t = torch.arange(n, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(dim, dtype=dtype, device=device)
    j = torch.div(idx, 2, rounding_mode="floor")
    freq = torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), -2.0 * j / dim)
    angles = t * freq.unsqueeze(0)
    table = torch.where((idx.long() % 2) == 0, torch.sin(angles), torch.cos(angles))
    return table


def _xavier_init(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if p.dim() >= 2:
            nn.init.xavier_uniform_(p)
        else:
            nn.init.zeros_(p)


class CoefficientGenerator(nn.Module):
    """Position-code BiGRU + MLP head emitting normalized pooling coefficients.

    Coefficients are a pure function of the sequence length: queried twice for
    the same length they are identical, and they sum to 1 by construction
    (masked softmax over valid positions).
    """

    def __init__(self, d_t: int = 32, hidden: int = 128):
        super().__init__()
        self.d_t = d_t
        self.hidden = hidden
        self.gru = nn.GRU(d_t, hidden, batch_first=True, bidirectional=True)
        self.mlp = nn.Sequential(
            nn.Linear(2 * hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        _xavier_init(self)

    def forward(self, lengths: torch.Tensor, n_max: int | None = None) -> torch.Tensor:
        """Coefficients [B, n_max]; zeros at positions >= length.

        The recurrent pass runs over exactly `length` positions per sample
        (packed), so a sequence of length N gets the same coefficients
        regardless of the padded buffer size.
        """
        if lengths.dim() != 1:
            raise ValueError("lengths must be a 1-D tensor")
        if (lengths < 1).any():
            raise ValueError("every length must be >= 1")
        n_max = int(lengths.max()) if n_max is None else n_max
        # coefficients depend only on the length: run the recurrent pass once
        # per distinct length and scatter
        unique, inverse = torch.unique(lengths, return_inverse=True)
        p = next(self.parameters())
        codes = positional_encoding(n_max, self.d_t, dtype=p.dtype, device=p.device)
        batch_codes = codes.unsqueeze(0).expand(len(unique), n_max, self.d_t)
        packed = pack_padded_sequence(batch_codes, unique.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=n_max)
        logits = self.mlp(out).squeeze(-1)                       # [U, n_max]
        valid = torch.arange(n_max, device=logits.device).unsqueeze(0) < \
            unique.to(logits.device).unsqueeze(1)
        logits = logits.masked_fill(~valid, float("-inf"))
        return torch.softmax(logits, dim=1)[inverse]

    def coefficients(self, n: int) -> torch.Tensor:
        """Coefficient vector [n] for a single sequence of length n."""
        lengths = torch.tensor([n], dtype=torch.long)
        return self.forward(lengths, n_max=n).squeeze(0)


def sort_aggregate(features: torch.Tensor,
                   theta: torch.Tensor,
                   lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted sum of the per-dimension descending sort of `features`.

    features: [B, N, d]; theta: [B, N] with zeros at padded positions;
    lengths: [B] (defaults to full N). Ties sort stably by original index, so
    the subgradient through the sort is deterministic.
    """
    if features.dim() != 3:
        raise ValueError("features must be [B, N, d]")
    b, n, _ = features.shape
    if lengths is None:
        lengths = torch.full((b,), n, dtype=torch.long, device=features.device)
    valid = torch.arange(n, device=features.device).unsqueeze(0) < lengths.unsqueeze(1)
    filled = features.masked_fill(~valid.unsqueeze(-1), float("-inf"))
    ordered, _ = torch.sort(filled, dim=1, descending=True, stable=True)
    # padding sinks below every finite value; zero it before weighting
    ordered = ordered.masked_fill(~valid.unsqueeze(-1), 0.0)
    return (theta.unsqueeze(-1) * ordered).sum(dim=1)


class LearnedPooling(nn.Module):
    """Coefficient generator + sorted weighted sum as one module."""

    def __init__(self, d_t: int = 32, hidden: int = 128, n_max: int = 100):
        super().__init__()
        self.n_max = n_max
        self.coeffs = CoefficientGenerator(d_t=d_t, hidden=hidden)

    def forward(self, features: torch.Tensor,
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        b, n, _ = features.shape
        if lengths is None:
            lengths = torch.full((b,), n, dtype=torch.long)
        if int(lengths.max()) > self.n_max:
            raise ValueError(
                f"sequence length {int(lengths.max())} exceeds n_max={self.n_max}")
        theta = self.coeffs(lengths, n_max=n)
        return sort_aggregate(features, theta, lengths)
