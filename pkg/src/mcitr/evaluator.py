"""Retrieval metrics, evaluation protocols, and inference timing.

Recall@K is computed in both directions from one image-by-caption cosine
similarity matrix. Ranks break ties by lower index, matching a stable
descending sort, so results are identical across platforms. The fold protocol
partitions test images into contiguous equal folds, evaluates each fold
against its own captions, and arithmetic-means the metrics.

Inference timing is split into encoding time (running both encoders) and
matching time (similarity product + ranking), each the median over repeated
measured passes with one untimed warm-up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .feature_store import SplitData, iter_batches

DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalMetrics:
    """R@1/5/10 per direction, in percent; rsum is their six-way sum."""

    cap_r1: float
    cap_r5: float
    cap_r10: float
    img_r1: float
    img_r5: float
    img_r10: float
    n_folds: int = 1

    @property
    def rsum(self) -> float:
        return (self.cap_r1 + self.cap_r5 + self.cap_r10
                + self.img_r1 + self.img_r5 + self.img_r10)

    def as_dict(self) -> dict[str, float]:
        return {
            "caption_r@1": self.cap_r1, "caption_r@5": self.cap_r5,
            "caption_r@10": self.cap_r10,
            "image_r@1": self.img_r1, "image_r@5": self.img_r5,
            "image_r@10": self.img_r10,
            "r_sum": self.rsum, "n_folds": float(self.n_folds),
        }

    def lines(self) -> list[str]:
        return [f"{k}={v:.4f}" for k, v in self.as_dict().items()]


def _validate_ground_truth(sim: np.ndarray,
                           image_to_captions: Sequence[Sequence[int]]) -> np.ndarray:
    n_img, n_cap = sim.shape
    if len(image_to_captions) != n_img:
        raise ValueError(
            f"ground truth covers {len(image_to_captions)} images, matrix has {n_img}")
    source = np.full(n_cap, -1, dtype=np.int64)
    for i, caps in enumerate(image_to_captions):
        if len(caps) == 0:
            raise ValueError(f"image {i} has no ground-truth caption")
        for c in caps:
            if not (0 <= c < n_cap):
                raise ValueError(f"ground-truth caption {c} absent from matrix")
            if source[c] != -1:
                raise ValueError(f"caption {c} assigned to two images")
            source[c] = i
    if (source == -1).any():
        missing = int(np.argmax(source == -1))
        raise ValueError(f"caption {missing} has no source image in the ground truth")
    return source


def ranking_positions(sim: np.ndarray,
                      image_to_captions: Sequence[Sequence[int]]
                      ) -> tuple[np.ndarray, np.ndarray]:
    """0-based rank of the best ground-truth hit for every query.

    Returns (per-image best caption rank [n_img], per-caption image rank
    [n_cap]). Rank of entry j = #(strictly higher scores) + #(equal scores at
    lower index), i.e. its position under a stable descending sort.
    """
    sim = np.asarray(sim)
    source = _validate_ground_truth(sim, image_to_captions)
    n_img, n_cap = sim.shape

    cap_rank = np.empty(n_img, dtype=np.int64)
    for i, caps in enumerate(image_to_captions):
        row = sim[i]
        ranks = [int(np.count_nonzero(row > row[c])
                     + np.count_nonzero(row[:c] == row[c])) for c in caps]
        cap_rank[i] = min(ranks)

    img_rank = np.empty(n_cap, dtype=np.int64)
    for j in range(n_cap):
        col = sim[:, j]
        i = source[j]
        img_rank[j] = int(np.count_nonzero(col > col[i])
                          + np.count_nonzero(col[:i] == col[i]))
    return cap_rank, img_rank


def _hit_rate(ranks: np.ndarray, k: int) -> float:
    return 100.0 * int((ranks < k).sum()) / len(ranks)


def recall_at_k(sim: np.ndarray,
                image_to_captions: Sequence[Sequence[int]],
                k: int) -> tuple[float, float]:
    """(caption retrieval R@k, image retrieval R@k), each in [0, 100]."""
    cap_rank, img_rank = ranking_positions(sim, image_to_captions)
    return _hit_rate(cap_rank, k), _hit_rate(img_rank, k)


def metrics_from_sim(sim: np.ndarray,
                     image_to_captions: Sequence[Sequence[int]],
                     ks: Sequence[int] = DEFAULT_KS) -> RetrievalMetrics:
    cap_rank, img_rank = ranking_positions(sim, image_to_captions)
    cap = [_hit_rate(cap_rank, k) for k in ks]
    img = [_hit_rate(img_rank, k) for k in ks]
    return RetrievalMetrics(cap[0], cap[1], cap[2], img[0], img[1], img[2])


def cosine_similarity(img_emb: np.ndarray, cap_emb: np.ndarray) -> np.ndarray:
    img_norm = np.linalg.norm(img_emb, axis=1, keepdims=True)
    cap_norm = np.linalg.norm(cap_emb, axis=1, keepdims=True)
    if (img_norm == 0).any() or (cap_norm == 0).any():
        raise ValueError("zero-norm embedding row")
    return (img_emb / img_norm) @ (cap_emb / cap_norm).T


def average_metrics(folds: Sequence[RetrievalMetrics]) -> RetrievalMetrics:
    """Arithmetic mean of per-fold metrics."""
    if not folds:
        raise ValueError("no folds to average")

    def mean(attr: str) -> float:
        return float(np.mean([getattr(m, attr) for m in folds]))

    return RetrievalMetrics(
        mean("cap_r1"), mean("cap_r5"), mean("cap_r10"),
        mean("img_r1"), mean("img_r5"), mean("img_r10"),
        n_folds=len(folds),
    )


def fold_slices(n_img: int, fold_count: int) -> list[range]:
    """Contiguous equal folds over images in manifest order."""
    if fold_count < 1 or n_img % fold_count != 0:
        raise ValueError(
            f"{n_img} test images cannot be split into {fold_count} equal folds")
    per_fold = n_img // fold_count
    return [range(f * per_fold, (f + 1) * per_fold) for f in range(fold_count)]


def evaluate_protocol(img_emb: np.ndarray,
                      cap_emb: np.ndarray,
                      image_to_captions: Sequence[Sequence[int]],
                      protocol: str = "full",
                      fold_count: int = 5) -> RetrievalMetrics:
    """Retrieval metrics under a named protocol.

    `cocofold1k` splits the images into `fold_count` contiguous equal folds
    (manifest order), evaluates each fold against its own captions, and
    averages the metrics. `full5k`, `flickr1k`, and `full` evaluate the whole
    set once.
    """
    if protocol in ("full", "full5k", "flickr1k"):
        sim = cosine_similarity(img_emb, cap_emb)
        return metrics_from_sim(sim, image_to_captions)
    if protocol != "cocofold1k":
        raise ValueError(f"unknown protocol `{protocol}`")

    folds = []
    for images in fold_slices(img_emb.shape[0], fold_count):
        cap_indices = [c for i in images for c in image_to_captions[i]]
        remap = {c: pos for pos, c in enumerate(cap_indices)}
        fold_gt = [[remap[c] for c in image_to_captions[i]] for i in images]
        sim = cosine_similarity(img_emb[list(images)], cap_emb[cap_indices])
        folds.append(metrics_from_sim(sim, fold_gt))
    return average_metrics(folds)


@torch.no_grad()
def extract_embeddings(image_encoder: torch.nn.Module,
                       text_encoder: torch.nn.Module,
                       data: SplitData,
                       dtype: torch.dtype = torch.float32,
                       batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Embed every image and caption of a split with the given encoders.

    Each image is encoded once (not once per caption). Returns float64 numpy
    arrays in manifest order.
    """
    image_encoder.eval()
    text_encoder.eval()
    img_chunks, cap_chunks = [], []
    seen_images: set[str] = set()
    for batch in iter_batches(data, batch_size, shuffle=False, dtype=dtype):
        keep = []
        for pos, img in enumerate(batch.image_ids):
            if img not in seen_images:
                seen_images.add(img)
                keep.append(pos)
        if keep:
            idx = torch.as_tensor(keep)
            clip = None if batch.clip_global is None else batch.clip_global[idx]
            img_chunks.append(image_encoder(batch.regions[idx], clip).cpu().numpy())
        cap_chunks.append(text_encoder(batch.tokens, batch.lengths).cpu().numpy())
    img_emb = np.concatenate(img_chunks, axis=0).astype(np.float64)
    cap_emb = np.concatenate(cap_chunks, axis=0).astype(np.float64)
    if img_emb.shape[0] != data.n_images or cap_emb.shape[0] != data.n_captions:
        raise RuntimeError("embedding extraction produced a wrong count")
    return img_emb, cap_emb


@dataclass(frozen=True)
class EmbeddingDump:
    """Cached embeddings with ids; self-describing and training-independent."""

    image_ids: list[str]
    caption_ids: list[str]
    caption_image_ids: list[str]        # source image id per caption
    image_embeddings: np.ndarray
    caption_embeddings: np.ndarray

    @property
    def dim(self) -> int:
        return self.image_embeddings.shape[1]

    def image_to_caption_indices(self) -> list[list[int]]:
        by_image: dict[str, list[int]] = {img: [] for img in self.image_ids}
        for j, img in enumerate(self.caption_image_ids):
            by_image[img].append(j)
        return [by_image[img] for img in self.image_ids]


def save_embeddings(path: str | Path, dump: EmbeddingDump) -> None:
    np.savez(
        Path(path),
        count_images=np.int64(len(dump.image_ids)),
        count_captions=np.int64(len(dump.caption_ids)),
        dim=np.int64(dump.dim),
        image_ids=np.asarray(dump.image_ids),
        caption_ids=np.asarray(dump.caption_ids),
        caption_image_ids=np.asarray(dump.caption_image_ids),
        image_embeddings=dump.image_embeddings,
        caption_embeddings=dump.caption_embeddings,
    )


def load_embeddings(path: str | Path) -> EmbeddingDump:
    with np.load(Path(path), allow_pickle=False) as z:
        return EmbeddingDump(
            image_ids=[str(s) for s in z["image_ids"]],
            caption_ids=[str(s) for s in z["caption_ids"]],
            caption_image_ids=[str(s) for s in z["caption_image_ids"]],
            image_embeddings=z["image_embeddings"],
            caption_embeddings=z["caption_embeddings"],
        )


@dataclass(frozen=True)
class TimingReport:
    """Wall-clock inference split: encoding vs matching (product + ranking)."""

    label: str
    encoding_s: float
    similarity_s: float
    ranking_s: float
    n_images: int
    n_captions: int
    repeats: int
    cached_embeddings: bool

    @property
    def matching_s(self) -> float:
        return self.similarity_s + self.ranking_s

    @property
    def total_s(self) -> float:
        return self.encoding_s + self.matching_s

    def as_dict(self) -> dict[str, float | str | int | bool]:
        return {
            "method": self.label,
            "encoding_s": self.encoding_s,
            "similarity_s": self.similarity_s,
            "ranking_s": self.ranking_s,
            "matching_s": self.matching_s,
            "total_s": self.total_s,
            "n_images": self.n_images,
            "n_captions": self.n_captions,
            "repeats": self.repeats,
            "cached_embeddings": self.cached_embeddings,
        }

    def lines(self) -> list[str]:
        out = []
        for k, v in self.as_dict().items():
            out.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return out


def _rank_pass(sim: np.ndarray, image_to_captions: Sequence[Sequence[int]]) -> None:
    ranking_positions(sim, image_to_captions)


def benchmark_inference(image_encoder: torch.nn.Module | None = None,
                        text_encoder: torch.nn.Module | None = None,
                        data: SplitData | None = None,
                        embeddings: EmbeddingDump | None = None,
                        image_to_captions: Sequence[Sequence[int]] | None = None,
                        repeats: int = 3,
                        label: str = "default",
                        dtype: torch.dtype = torch.float32,
                        batch_size: int = 128) -> TimingReport:
    """Measure the encoding/matching inference-time split.

    Live mode (encoders + data) times embedding extraction per repeat; cached
    mode (embeddings) reports zero encoding time. Matching covers the cosine
    similarity product and the ranking pass, timed separately. Each phase
    reports the median over `repeats` measured passes after one untimed
    warm-up.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    live = embeddings is None
    if live:
        if image_encoder is None or text_encoder is None or data is None:
            raise ValueError("live benchmarking needs both encoders and a dataset")
        gt = data.manifest.image_to_caption_indices()
    else:
        gt = (embeddings.image_to_caption_indices()
              if image_to_captions is None else list(image_to_captions))

    def encode() -> tuple[np.ndarray, np.ndarray]:
        if live:
            return extract_embeddings(image_encoder, text_encoder, data,
                                      dtype=dtype, batch_size=batch_size)
        return embeddings.image_embeddings, embeddings.caption_embeddings

    # warm-up pass, excluded from every measurement
    img_emb, cap_emb = encode()
    sim = cosine_similarity(img_emb, cap_emb)
    _rank_pass(sim, gt)

    enc_times, sim_times, rank_times = [], [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        img_emb, cap_emb = encode()
        t1 = time.perf_counter()
        sim = cosine_similarity(img_emb, cap_emb)
        t2 = time.perf_counter()
        _rank_pass(sim, gt)
        t3 = time.perf_counter()
        enc_times.append(t1 - t0 if live else 0.0)
        sim_times.append(t2 - t1)
        rank_times.append(t3 - t2)

    return TimingReport(
        label=label,
        encoding_s=float(np.median(enc_times)),
        similarity_s=float(np.median(sim_times)),
        ranking_s=float(np.median(rank_times)),
        n_images=img_emb.shape[0],
        n_captions=cap_emb.shape[0],
        repeats=repeats,
        cached_embeddings=not live,
    )
