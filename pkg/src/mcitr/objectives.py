"""Training objectives: hubness-aware contrastive losses and their sum.

All terms are built from cosine similarities. The mini-batch loss treats
every non-matching in-batch pair as a negative, weighting it through a
temperature-scaled, margin-shifted log-sum-exp; the queue losses do the same
against the visual and textual queue snapshots, with the positive pair formed
between a query embedding and the matching key-encoder embedding. Every
negative sum is computed as log(1 + sum(exp(...))) through a zero-padded
logsumexp, so large temperatures cannot overflow.

Gradients flow only into query-side embeddings: key embeddings and queue
snapshots are detached here regardless of what the caller passes.
"""

from __future__ import annotations

import torch

from .config import LossConfig


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarity: [n, d] x [p, d] -> [n, p]."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    for side, m in (("first", a), ("second", b)):
        norms = m.norm(dim=1)
        if (norms == 0).any():
            idx = int((norms == 0).nonzero()[0])
            raise ValueError(f"zero-norm row {idx} in {side} argument")
    a = a / a.norm(dim=1, keepdim=True)
    b = b / b.norm(dim=1, keepdim=True)
    return a @ b.t()


def cosine_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity between aligned [n, d] matrices."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=1), b.norm(dim=1)
    for side, n in (("first", na), ("second", nb)):
        if (n == 0).any():
            idx = int((n == 0).nonzero()[0])
            raise ValueError(f"zero-norm row {idx} in {side} argument")
    return (a * b).sum(dim=1) / (na * nb)


def _log1p_sum_exp(logits: torch.Tensor, dim: int) -> torch.Tensor:
    """log(1 + sum(exp(logits))) along `dim`, stable for large logits.

    An empty `dim` yields exactly 0 (the negative sum vanishes)."""
    if logits.shape[dim] == 0:
        shape = list(logits.shape)
        del shape[dim]
        return torch.zeros(shape, dtype=logits.dtype, device=logits.device)
    pad_shape = list(logits.shape)
    pad_shape[dim] = 1
    zero = torch.zeros(pad_shape, dtype=logits.dtype, device=logits.device)
    return torch.logsumexp(torch.cat([zero, logits], dim=dim), dim=dim)


def _positive_term(sims: torch.Tensor) -> torch.Tensor:
    """-log(1 + s) for positive-pair similarities; guards the log domain."""
    if (sims <= -1.0).any():
        raise ValueError("positive-pair similarity at or below -1; log(1+s) undefined")
    return torch.log1p(sims)


def mini_hal_loss(v_emb: torch.Tensor, w_emb: torch.Tensor,
                  cfg: LossConfig) -> torch.Tensor:
    """Hubness-aware loss over one mini-batch of aligned embedding pairs.

    Both retrieval directions contribute a weighted-negative term per anchor:
    for caption anchor i all other images, for image anchor i all other
    captions. With batch size 1 both negative sums are empty and only the
    positive term -log(1 + s_ii) remains.
    """
    if v_emb.shape != w_emb.shape or v_emb.dim() != 2:
        raise ValueError("embeddings must be aligned [B, d] matrices")
    b = v_emb.shape[0]
    gamma, eps = cfg.gamma, cfg.epsilon
    sims = cosine_matrix(v_emb, w_emb)
    logits = gamma * (sims - eps)
    off_diag = logits.masked_fill(
        torch.eye(b, dtype=torch.bool, device=logits.device), float("-inf"))
    # images m != i against caption i (columns), captions n != i against image i (rows)
    col_term = _log1p_sum_exp(off_diag, dim=0) / gamma
    row_term = _log1p_sum_exp(off_diag, dim=1) / gamma
    pos_term = _positive_term(torch.diagonal(sims))
    return (col_term + row_term - pos_term).mean()


def visual_queue_hal_loss(v_key: torch.Tensor, w_query: torch.Tensor,
                 visual_queue: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Queue loss for the visual queue.

    Positive: key-encoder image embedding vs the matching query caption
    embedding. Negatives: every queued visual embedding vs each query caption.
    Gradients reach only `w_query`; `v_key` and the queue are detached.
    """
    v_key = v_key.detach()
    visual_queue = visual_queue.detach()
    pos = cosine_pairs(v_key, w_query)
    if visual_queue.shape[0] > 0:
        logits = cfg.gamma * (cosine_matrix(visual_queue, w_query) - cfg.epsilon)
        neg_term = _log1p_sum_exp(logits, dim=0) / cfg.gamma      # [B]
    else:
        neg_term = torch.zeros_like(pos)
    return (neg_term - _positive_term(pos)).mean()


def text_queue_hal_loss(v_query: torch.Tensor, w_key: torch.Tensor,
                 text_queue: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Queue loss for the textual queue (mirror of the visual-queue loss)."""
    w_key = w_key.detach()
    text_queue = text_queue.detach()
    pos = cosine_pairs(v_query, w_key)
    if text_queue.shape[0] > 0:
        logits = cfg.gamma * (cosine_matrix(v_query, text_queue) - cfg.epsilon)
        neg_term = _log1p_sum_exp(logits, dim=1) / cfg.gamma      # [B]
    else:
        neg_term = torch.zeros_like(pos)
    return (neg_term - _positive_term(pos)).mean()


def queue_hal_loss(v_query: torch.Tensor, w_query: torch.Tensor,
                v_key: torch.Tensor, w_key: torch.Tensor,
                visual_queue_snapshot: torch.Tensor, text_queue_snapshot: torch.Tensor,
                cfg: LossConfig) -> torch.Tensor:
    """Sum of both queue losses. Snapshots may be empty during warm-up."""
    if visual_queue_snapshot.shape[0] and visual_queue_snapshot.shape[1] != w_query.shape[1]:
        raise ValueError("visual queue dimension does not match embeddings")
    if text_queue_snapshot.shape[0] and text_queue_snapshot.shape[1] != v_query.shape[1]:
        raise ValueError("text queue dimension does not match embeddings")
    return (visual_queue_hal_loss(v_key, w_query, visual_queue_snapshot, cfg)
            + text_queue_hal_loss(v_query, w_key, text_queue_snapshot, cfg))


def total_loss(mini: torch.Tensor, dq: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Weighted sum of the mini-batch and queue losses."""
    return cfg.lam * mini + dq


def triplet_ranking_loss(v_emb: torch.Tensor, w_emb: torch.Tensor,
                         margin: float = 0.2) -> torch.Tensor:
    """Bidirectional hardest-negative ranking loss (ablation baseline)."""
    sims = cosine_matrix(v_emb, w_emb)
    b = sims.shape[0]
    pos = torch.diagonal(sims)
    neg_mask = torch.eye(b, dtype=torch.bool, device=sims.device)
    masked = sims.masked_fill(neg_mask, float("-inf"))
    if b < 2:
        return torch.zeros((), dtype=sims.dtype, device=sims.device)
    hardest_row = masked.max(dim=1).values        # image anchor, caption negatives
    hardest_col = masked.max(dim=0).values        # caption anchor, image negatives
    loss_row = torch.clamp(margin + hardest_row - pos, min=0)
    loss_col = torch.clamp(margin + hardest_col - pos, min=0)
    return (loss_row + loss_col).mean()
