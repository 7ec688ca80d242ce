"""On-disk feature containers, split manifests, batching, and synthetic data.

A dataset root holds one directory per split. Each split directory contains
dense arrays plus a JSON manifest:

    <root>/<split>/regions.npy       float [n_images, K, dI]
    <root>/<split>/clip_global.npy   float [n_images, dIc]   (optional)
    <root>/<split>/tokens.npy        float [n_captions, L, dT], zero-padded
    <root>/<split>/manifest.json     ids, pairing, dims, fold count
    <root>/<split>/latents.npz       synthetic corpora only (probe diagnostics)

Captions appear in ``tokens.npy`` in manifest order (image-major). Feature
objects are immutable after load; save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import queue as queue_mod
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"
REGIONS_NAME = "regions.npy"
CLIP_NAME = "clip_global.npy"
TOKENS_NAME = "tokens.npy"
LATENTS_NAME = "latents.npz"

CAPTIONS_PER_IMAGE = 5


class DatasetError(RuntimeError):
    """Missing files, malformed manifests, or corrupt features. Fatal."""


@dataclass(frozen=True)
class RegionFeatureSet:
    """K region vectors for one image, plus an optional pooled clip vector."""

    image_id: str
    regions: np.ndarray                 # [K, dI]
    clip_global: np.ndarray | None = None

    def validate(self) -> None:
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise DatasetError(f"image {self.image_id}: regions must be [K, dI] with K > 0")
        if not np.isfinite(self.regions).all():
            raise DatasetError(f"image {self.image_id}: non-finite region feature")
        if self.clip_global is not None and not np.isfinite(self.clip_global).all():
            raise DatasetError(f"image {self.image_id}: non-finite clip feature")


@dataclass(frozen=True)
class TokenFeatureSet:
    """Word-level vectors for one caption; rows past `length` are zero padding."""

    caption_id: str
    image_id: str                       # ground-truth link
    tokens: np.ndarray                  # [L_buf, dT]
    length: int

    def validate(self, max_length: int | None = None) -> None:
        if self.length < 1:
            raise DatasetError(f"caption {self.caption_id}: length must be >= 1")
        if self.length > self.tokens.shape[0]:
            raise DatasetError(f"caption {self.caption_id}: length exceeds token buffer")
        if max_length is not None and self.length > max_length:
            raise DatasetError(f"caption {self.caption_id}: length exceeds max_length")
        if not np.isfinite(self.tokens).all():
            raise DatasetError(f"caption {self.caption_id}: non-finite token feature")
        if self.length < self.tokens.shape[0] and np.any(self.tokens[self.length:]):
            raise DatasetError(f"caption {self.caption_id}: nonzero rows beyond length")


@dataclass(frozen=True)
class SplitManifest:
    split: str
    entries: tuple[tuple[str, tuple[str, ...]], ...]  # (image_id, caption_ids)
    fold_count: int
    K: int
    dims: dict[str, int]                # dI, dT, and dIc when cge-capable
    cge: bool
    max_length: int
    caption_lengths: dict[str, int]

    @property
    def n_images(self) -> int:
        return len(self.entries)

    @property
    def n_captions(self) -> int:
        return sum(len(caps) for _, caps in self.entries)

    def caption_ids(self) -> list[str]:
        return [c for _, caps in self.entries for c in caps]

    def image_ids(self) -> list[str]:
        return [img for img, _ in self.entries]

    def image_to_caption_indices(self) -> list[list[int]]:
        """Column indices of each image's ground-truth captions."""
        out, j = [], 0
        for _, caps in self.entries:
            out.append(list(range(j, j + len(caps))))
            j += len(caps)
        return out

    def validate(self) -> None:
        if self.n_images < 1:
            raise DatasetError(f"split {self.split}: empty manifest")
        for image_id, caps in self.entries:
            if len(caps) != CAPTIONS_PER_IMAGE:
                raise DatasetError(
                    f"split {self.split}: image {image_id} has {len(caps)} captions, "
                    f"expected {CAPTIONS_PER_IMAGE}")
        cap_ids = self.caption_ids()
        if len(set(cap_ids)) != len(cap_ids):
            raise DatasetError(f"split {self.split}: duplicate caption ids")
        if set(cap_ids) != set(self.caption_lengths):
            raise DatasetError(f"split {self.split}: caption_lengths does not match entries")

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "images": [{"image_id": img, "caption_ids": list(caps)}
                       for img, caps in self.entries],
            "fold_count": self.fold_count,
            "K": self.K,
            "dims": dict(self.dims),
            "cge": self.cge,
            "max_length": self.max_length,
            "caption_lengths": dict(self.caption_lengths),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SplitManifest":
        try:
            entries = tuple((item["image_id"], tuple(item["caption_ids"]))
                            for item in data["images"])
            return cls(
                split=data["split"],
                entries=entries,
                fold_count=int(data["fold_count"]),
                K=int(data["K"]),
                dims={k: int(v) for k, v in data["dims"].items()},
                cge=bool(data["cge"]),
                max_length=int(data["max_length"]),
                caption_lengths={k: int(v) for k, v in data["caption_lengths"].items()},
            )
        except KeyError as exc:
            raise DatasetError(f"manifest missing field {exc}") from exc


@dataclass(frozen=True)
class SplitData:
    """All features of one split, loaded and validated."""

    manifest: SplitManifest
    regions: np.ndarray                 # [n_images, K, dI]
    clip_global: np.ndarray | None      # [n_images, dIc]
    tokens: np.ndarray                  # [n_captions, L, dT]
    lengths: np.ndarray                 # [n_captions] int64

    @property
    def n_images(self) -> int:
        return self.regions.shape[0]

    @property
    def n_captions(self) -> int:
        return self.tokens.shape[0]

    def region_set(self, i: int) -> RegionFeatureSet:
        image_id = self.manifest.entries[i][0]
        clip = None if self.clip_global is None else self.clip_global[i]
        return RegionFeatureSet(image_id=image_id, regions=self.regions[i], clip_global=clip)

    def token_set(self, j: int) -> TokenFeatureSet:
        image_index, caption_id = self._caption_owner(j)
        return TokenFeatureSet(
            caption_id=caption_id,
            image_id=self.manifest.entries[image_index][0],
            tokens=self.tokens[j],
            length=int(self.lengths[j]),
        )

    def _caption_owner(self, j: int) -> tuple[int, str]:
        i, count = 0, 0
        for idx, (_, caps) in enumerate(self.manifest.entries):
            if j < count + len(caps):
                return idx, caps[j - count]
            count += len(caps)
        raise IndexError(j)

    def pairs(self) -> Iterator[tuple[RegionFeatureSet, TokenFeatureSet]]:
        """Aligned (image, caption) pairs in manifest order."""
        j = 0
        for i, (_, caps) in enumerate(self.manifest.entries):
            for _ in caps:
                yield self.region_set(i), self.token_set(j)
                j += 1

    def pair_index(self) -> np.ndarray:
        """[n_captions, 2] array of (image_index, caption_index) pairs."""
        rows = []
        j = 0
        for i, (_, caps) in enumerate(self.manifest.entries):
            for _ in caps:
                rows.append((i, j))
                j += 1
        return np.asarray(rows, dtype=np.int64)


def save_split(root: str | Path,
               manifest: SplitManifest,
               regions: np.ndarray,
               clip_global: np.ndarray | None,
               tokens: np.ndarray,
               lengths: Sequence[int]) -> Path:
    """Write one split to disk. Arrays are written as-is (bit-exact)."""
    split_dir = Path(root) / manifest.split
    split_dir.mkdir(parents=True, exist_ok=True)
    np.save(split_dir / REGIONS_NAME, regions)
    if clip_global is not None:
        np.save(split_dir / CLIP_NAME, clip_global)
    np.save(split_dir / TOKENS_NAME, tokens)
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(lengths) != tokens.shape[0]:
        raise DatasetError("lengths do not match token array")
    with open(split_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest.to_json(), fh, sort_keys=True, indent=1)
    return split_dir


def load_split(root: str | Path, split: str) -> SplitData:
    """Load and validate one split; any inconsistency is fatal."""
    split_dir = Path(root) / split
    manifest_path = split_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = SplitManifest.from_json(json.load(fh))
    manifest.validate()
    if manifest.split != split:
        raise DatasetError(f"manifest at {split_dir} names split `{manifest.split}`")

    regions_path = split_dir / REGIONS_NAME
    tokens_path = split_dir / TOKENS_NAME
    for p in (regions_path, tokens_path):
        if not p.exists():
            raise DatasetError(f"missing feature file: {p}")
    regions = np.load(regions_path)
    tokens = np.load(tokens_path)

    clip_global = None
    clip_path = split_dir / CLIP_NAME
    if manifest.cge:
        if not clip_path.exists():
            raise DatasetError(
                f"manifest declares clip support but {clip_path} is missing")
        clip_global = np.load(clip_path)

    if regions.shape[0] < manifest.n_images:
        missing = manifest.entries[regions.shape[0]][0]
        raise DatasetError(
            f"{regions_path}: no features for image {missing} "
            f"({regions.shape[0]} rows, manifest has {manifest.n_images})")
    if regions.shape[0] > manifest.n_images:
        raise DatasetError(
            f"{regions_path}: {regions.shape[0]} images, manifest has {manifest.n_images}")
    if regions.ndim != 3 or regions.shape[1] != manifest.K:
        raise DatasetError(f"{regions_path}: expected [n, {manifest.K}, dI], got {regions.shape}")
    if regions.shape[2] != manifest.dims["dI"]:
        raise DatasetError(
            f"{regions_path}: region dim {regions.shape[2]} != manifest dI {manifest.dims['dI']}")
    if tokens.shape[0] < manifest.n_captions:
        missing = manifest.caption_ids()[tokens.shape[0]]
        raise DatasetError(
            f"{tokens_path}: no features for caption {missing} "
            f"({tokens.shape[0]} rows, manifest has {manifest.n_captions})")
    if tokens.shape[0] > manifest.n_captions:
        raise DatasetError(
            f"{tokens_path}: {tokens.shape[0]} captions, manifest has {manifest.n_captions}")
    if tokens.ndim != 3 or tokens.shape[2] != manifest.dims["dT"]:
        raise DatasetError(
            f"{tokens_path}: token dim {tokens.shape[2:]} != manifest dT {manifest.dims['dT']}")
    if clip_global is not None:
        if clip_global.shape != (manifest.n_images, manifest.dims["dIc"]):
            raise DatasetError(
                f"{clip_path}: shape {clip_global.shape} != "
                f"({manifest.n_images}, {manifest.dims['dIc']})")

    lengths = np.asarray([manifest.caption_lengths[c] for c in manifest.caption_ids()],
                         dtype=np.int64)
    data = SplitData(manifest=manifest, regions=regions, clip_global=clip_global,
                     tokens=tokens, lengths=lengths)
    _validate_features(data)
    return data


def _validate_features(data: SplitData) -> None:
    m = data.manifest
    bad = np.where(~np.isfinite(data.regions).all(axis=(1, 2)))[0]
    if bad.size:
        raise DatasetError(f"non-finite region feature for image {m.entries[bad[0]][0]}")
    if data.clip_global is not None:
        bad = np.where(~np.isfinite(data.clip_global).all(axis=1))[0]
        if bad.size:
            raise DatasetError(f"non-finite clip feature for image {m.entries[bad[0]][0]}")
    cap_ids = m.caption_ids()
    bad = np.where(~np.isfinite(data.tokens).all(axis=(1, 2)))[0]
    if bad.size:
        raise DatasetError(f"non-finite token feature for caption {cap_ids[bad[0]]}")
    if (data.lengths < 1).any() or (data.lengths > m.max_length).any():
        j = int(np.argmax((data.lengths < 1) | (data.lengths > m.max_length)))
        raise DatasetError(f"caption {cap_ids[j]}: invalid length {int(data.lengths[j])}")
    if data.tokens.shape[1] < int(data.lengths.max()):
        raise DatasetError("token buffer shorter than the longest caption")


def load_dataset(root: str | Path, split: str
                 ) -> Iterator[tuple[RegionFeatureSet, TokenFeatureSet]]:
    """Aligned (RegionFeatureSet, TokenFeatureSet) pairs in manifest order."""
    return load_split(root, split).pairs()


@dataclass
class Batch:
    """One mini-batch; image i and caption i are a positive pair."""

    regions: torch.Tensor               # [B, K, dI]
    clip_global: torch.Tensor | None    # [B, dIc]
    tokens: torch.Tensor                # [B, L_batch, dT]
    lengths: torch.Tensor               # [B] int64
    mask: torch.Tensor                  # [B, L_batch] bool
    image_ids: list[str]
    caption_ids: list[str]

    @property
    def size(self) -> int:
        return self.regions.shape[0]


def iter_batches(data: SplitData,
                 batch_size: int,
                 shuffle: bool = False,
                 seed: int = 0,
                 epoch: int = 0,
                 drop_last: bool = False,
                 dtype: torch.dtype = torch.float32) -> Iterator[Batch]:
    """Yield batches over all pairs of a split.

    The pair order is a pure function of (seed, epoch): prefetching or
    resuming never changes the sequence. Token buffers are trimmed to the
    longest caption in the batch (embeddings are padding-invariant).
    """
    pairs = data.pair_index()
    n = len(pairs)
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
        pairs = pairs[rng.permutation(n)]
    image_ids = data.manifest.image_ids()
    caption_ids = data.manifest.caption_ids()
    for start in range(0, n, batch_size):
        sel = pairs[start:start + batch_size]
        if drop_last and len(sel) < batch_size:
            return
        img_idx, cap_idx = sel[:, 0], sel[:, 1]
        lengths = data.lengths[cap_idx]
        l_batch = int(lengths.max())
        tokens = torch.from_numpy(np.ascontiguousarray(
            data.tokens[cap_idx, :l_batch])).to(dtype)
        lengths_t = torch.from_numpy(lengths)
        mask = torch.arange(l_batch).unsqueeze(0) < lengths_t.unsqueeze(1)
        clip = None
        if data.clip_global is not None:
            clip = torch.from_numpy(np.ascontiguousarray(data.clip_global[img_idx])).to(dtype)
        yield Batch(
            regions=torch.from_numpy(np.ascontiguousarray(data.regions[img_idx])).to(dtype),
            clip_global=clip,
            tokens=tokens,
            lengths=lengths_t,
            mask=mask,
            image_ids=[image_ids[i] for i in img_idx],
            caption_ids=[caption_ids[j] for j in cap_idx],
        )


def prefetch_batches(batches: Iterator[Batch], depth: int = 2) -> Iterator[Batch]:
    """Run the batch iterator in a background thread, preserving order."""
    if depth <= 0:
        yield from batches
        return
    buf: queue_mod.Queue = queue_mod.Queue(maxsize=depth)
    sentinel = object()

    def worker() -> None:
        try:
            for b in batches:
                buf.put(b)
            buf.put(sentinel)
        except BaseException as exc:  # propagate loader errors to the consumer
            buf.put(exc)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = buf.get()
        if item is sentinel:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()


def make_synthetic_corpus(root: str | Path,
                          n_images: int = 64,
                          K: int = 36,
                          d_i: int = 64,
                          d_t: int = 48,
                          d_ic: int = 32,
                          d_latent: int = 16,
                          seed: int = 0,
                          val_images: int = 8,
                          test_images: int = 25,
                          max_length: int = 12,
                          region_noise: float = 0.3,
                          caption_noise: float = 0.1,
                          fold_count: int = 5,
                          dtype: str = "float32",
                          with_clip: bool = True) -> Path:
    """Write a paired synthetic dataset whose matched pairs share a latent factor.

    Regions, clip vectors, and tokens of one image/caption family are random
    linear lifts of a common latent, plus noise, so the signal is learnable at
    desk scale. Generation is reproducible per seed (byte-identical reruns).
    Latent factors are saved per split for probe-style diagnostics.
    """
    for name, value in (("n_images", n_images), ("K", K), ("d_i", d_i),
                        ("d_t", d_t), ("d_ic", d_ic), ("d_latent", d_latent),
                        ("max_length", max_length)):
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")
    if dtype not in ("float32", "float64"):
        raise ValueError("dtype must be float32 or float64")
    np_dtype = np.float32 if dtype == "float32" else np.float64
    root = Path(root)

    mix_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    # corpus-level mixing matrices shared across splits
    lift_regions = mix_rng.standard_normal((d_latent, d_i)) / np.sqrt(d_latent)
    lift_tokens = mix_rng.standard_normal((d_latent, d_t)) / np.sqrt(d_latent)
    lift_clip = mix_rng.standard_normal((d_latent, d_ic)) / np.sqrt(d_latent)

    splits = (("train", n_images), ("val", val_images), ("test", test_images))
    for split_key, (split, count) in enumerate(splits, start=1):
        if count < 1:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(split_key,)))
        z_img = rng.standard_normal((count, d_latent))

        regions = z_img[:, None, :] + region_noise * rng.standard_normal(
            (count, K, d_latent))
        regions = (regions @ lift_regions).astype(np_dtype)

        clip = None
        if with_clip:
            clip = ((z_img + 0.1 * rng.standard_normal((count, d_latent)))
                    @ lift_clip).astype(np_dtype)

        n_caps = count * CAPTIONS_PER_IMAGE
        z_cap = (np.repeat(z_img, CAPTIONS_PER_IMAGE, axis=0)
                 + caption_noise * rng.standard_normal((n_caps, d_latent)))
        lengths = rng.integers(min(4, max_length), max_length + 1, size=n_caps)
        tokens = np.zeros((n_caps, max_length, d_t), dtype=np_dtype)
        for j in range(n_caps):
            l = int(lengths[j])
            word_latents = z_cap[j][None, :] + region_noise * rng.standard_normal(
                (l, d_latent))
            tokens[j, :l] = (word_latents @ lift_tokens).astype(np_dtype)

        entries = []
        caption_lengths = {}
        for i in range(count):
            image_id = f"{split}_img_{i:05d}"
            caps = tuple(f"{image_id}_cap{c}" for c in range(CAPTIONS_PER_IMAGE))
            entries.append((image_id, caps))
            for c, cap_id in enumerate(caps):
                caption_lengths[cap_id] = int(lengths[i * CAPTIONS_PER_IMAGE + c])

        dims = {"dI": d_i, "dT": d_t}
        if with_clip:
            dims["dIc"] = d_ic
        manifest = SplitManifest(
            split=split,
            entries=tuple(entries),
            fold_count=fold_count,
            K=K,
            dims=dims,
            cge=with_clip,
            max_length=max_length,
            caption_lengths=caption_lengths,
        )
        split_dir = save_split(root, manifest, regions, clip, tokens, lengths)
        np.savez(split_dir / LATENTS_NAME,
                 image_latents=z_img.astype(np.float64),
                 caption_latents=z_cap.astype(np.float64))
    return root
