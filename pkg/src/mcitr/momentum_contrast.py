"""Momentum key encoders and fixed-capacity FIFO embedding queues.

Each modality has a gradient-updated query encoder and a structurally
identical key encoder that never receives gradients: its tensors track the
query's as an exponential moving average (theta_k <- m*theta_k +
(1-m)*theta_q). Key-encoder outputs for each training batch are pushed into a
per-modality queue whose snapshot serves as extra negatives; once full, every
push evicts the oldest entries.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn


class EncoderPair:
    """A query encoder together with its momentum-updated key copy.

    The key encoder is frozen (no gradients) and kept in eval mode so its
    normalization layers use running statistics; its float tensors, running
    statistics included, follow the momentum rule.
    """

    def __init__(self, query: nn.Module, key: nn.Module, momentum: float):
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self._check_shapes(query, key)
        self.query = query
        self.key = key
        self.momentum = momentum
        for p in self.key.parameters():
            p.requires_grad_(False)
        self.key.eval()

    @staticmethod
    def _check_shapes(query: nn.Module, key: nn.Module) -> None:
        q = dict(query.state_dict())
        k = dict(key.state_dict())
        if q.keys() != k.keys():
            raise ValueError("query and key encoders have different structure")
        for name, qt in q.items():
            if qt.shape != k[name].shape:
                raise ValueError(f"shape mismatch for `{name}`: "
                                 f"{tuple(qt.shape)} vs {tuple(k[name].shape)}")

    @classmethod
    def from_factory(cls, factory: Callable[[], nn.Module],
                     momentum: float) -> "EncoderPair":
        pair = cls(factory(), factory(), momentum)
        pair.initialize_key_from_query()
        return pair

    @torch.no_grad()
    def initialize_key_from_query(self) -> None:
        """Copy all query tensors into the key encoder. Idempotent."""
        self.key.load_state_dict(self.query.state_dict())

    @torch.no_grad()
    def momentum_update(self) -> None:
        """theta_k <- m*theta_k + (1-m)*theta_q on every float tensor.

        Computed as theta_k + (1-m)*(theta_q - theta_k) so that equal
        parameters are an exact fixed point in floating point."""
        q_state = dict(self.query.state_dict())
        for name, kt in self.key.state_dict().items():
            qt = q_state[name]
            if qt.shape != kt.shape:
                raise ValueError(f"shape mismatch for `{name}` during momentum update")
            if kt.is_floating_point():
                kt.add_(qt - kt, alpha=1.0 - self.momentum)
            else:
                kt.copy_(qt)

    @torch.no_grad()
    def key_forward(self, *args, **kwargs) -> torch.Tensor:
        """Key-encoder forward pass; never part of the autograd graph."""
        self.key.eval()
        return self.key(*args, **kwargs)

    def train(self, mode: bool = True) -> None:
        """Set the query encoder's mode; the key always stays in eval."""
        self.query.train(mode)
        self.key.eval()


class DynamicQueue(nn.Module):
    """Fixed-capacity FIFO of key embeddings for one modality.

    Entries are stored exactly as emitted by the key encoder (no
    re-normalization). Snapshots are detached copies in FIFO order, so loss
    gradients can never reach queue contents. Enqueuing more than capacity in
    one call is a configuration error; once full, each push of B rows evicts
    the B oldest.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.register_buffer("buf", torch.zeros(capacity, dim, dtype=dtype))
        self.register_buffer("ptr", torch.zeros((), dtype=torch.long))
        self.register_buffer("count", torch.zeros((), dtype=torch.long))

    def __len__(self) -> int:
        return int(self.count)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    @torch.no_grad()
    def enqueue(self, embeddings: torch.Tensor) -> None:
        if embeddings.dim() != 2 or embeddings.shape[1] != self.dim:
            raise ValueError(
                f"expected [B, {self.dim}] embeddings, got {tuple(embeddings.shape)}")
        b = embeddings.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} exceeds queue capacity {self.capacity}")
        if b == 0:
            return
        embeddings = embeddings.detach().to(self.buf.dtype)
        ptr = int(self.ptr)
        first = min(b, self.capacity - ptr)
        self.buf[ptr:ptr + first] = embeddings[:first]
        if b > first:
            self.buf[:b - first] = embeddings[first:]
        self.ptr.fill_((ptr + b) % self.capacity)
        self.count.fill_(min(int(self.count) + b, self.capacity))

    @torch.no_grad()
    def snapshot(self) -> torch.Tensor:
        """Detached [count, dim] copy, oldest entry first."""
        n = len(self)
        if n < self.capacity:
            return self.buf[:n].clone()
        ptr = int(self.ptr)
        return torch.cat([self.buf[ptr:], self.buf[:ptr]], dim=0).clone()
