"""Training loop: both encoder pairs, queues, unified objective, checkpoints.

Every step follows a fixed order: query forward, key forward (no gradients),
losses against the *current* queue snapshots, optimizer step on query
parameters, momentum update of the key encoders, and only then enqueueing of
this batch's key outputs. Key parameters are never touched by the optimizer.

The best model is selected by validation rsum after each epoch (ties keep the
earlier epoch). Checkpoints carry every parameter group, the optimizer state,
both queues, counters, RNG state, and a config hash, so an interrupted run
resumes bit-exactly in deterministic mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .config import (ConfigError, RunConfig, config_hash, config_to_dict,
                     dump_config)
from .evaluator import RetrievalMetrics, evaluate_protocol, extract_embeddings
from .feature_store import (Batch, DatasetError, SplitData, iter_batches,
                            load_split, prefetch_batches)
from .momentum_contrast import DynamicQueue, EncoderPair
from .objectives import queue_hal_loss, mini_hal_loss, total_loss, triplet_ranking_loss
from .text_encoder import TextEncoder
from .visual_encoder import ImageEncoder

DTYPES = {"float32": torch.float32, "float64": torch.float64}

CHECKPOINT_VERSION = 1

Hook = Callable[[str, dict], None]


def setup_runtime(cfg: RunConfig) -> torch.dtype:
    """Seed torch and apply determinism knobs; returns the run dtype."""
    torch.manual_seed(cfg.data.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return DTYPES[cfg.precision]


def build_image_encoder(cfg: RunConfig) -> ImageEncoder:
    d = cfg.data.dims
    return ImageEncoder(
        region_dim=d.dI,
        joint_dim=d.dJ,
        enhancement=cfg.model.enhancement,
        clip_dim=d.dIc if cfg.model.enhancement == "cge" else None,
        pool_d_t=cfg.model.pool.d_t,
        pool_hidden=cfg.model.pool.h,
        n_max=cfg.model.pool.n_max_img,
    )


def build_text_encoder(cfg: RunConfig) -> TextEncoder:
    d = cfg.data.dims
    return TextEncoder(
        token_dim=d.dT,
        joint_dim=d.dJ,
        pool_d_t=cfg.model.pool.d_t,
        pool_hidden=cfg.model.pool.h,
        n_max=cfg.model.pool.n_max_txt,
    )


def _param_groups(modules: list[torch.nn.Module], weight_decay: float):
    """Decay weight matrices only; biases and norm scales stay undecayed."""
    decay, no_decay = [], []
    for module in modules:
        for p in module.parameters():
            if not p.requires_grad:
                continue
            (decay if p.dim() >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass
class TrainState:
    image_pair: EncoderPair
    text_pair: EncoderPair
    visual_queue: DynamicQueue | None
    text_queue: DynamicQueue | None
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0


def build_state(cfg: RunConfig) -> TrainState:
    dtype = setup_runtime(cfg)
    image_pair = EncoderPair.from_factory(
        lambda: build_image_encoder(cfg).to(dtype), cfg.moco.m)
    text_pair = EncoderPair.from_factory(
        lambda: build_text_encoder(cfg).to(dtype), cfg.moco.m)
    visual_queue = text_queue = None
    if cfg.moco.enabled:
        visual_queue = DynamicQueue(cfg.moco.queue_size, cfg.data.dims.dJ, dtype=dtype)
        text_queue = DynamicQueue(cfg.moco.queue_size, cfg.data.dims.dJ, dtype=dtype)
    optimizer = torch.optim.AdamW(
        _param_groups([image_pair.query, text_pair.query], cfg.train.weight_decay),
        lr=cfg.train.lr)
    return TrainState(image_pair=image_pair, text_pair=text_pair,
                      visual_queue=visual_queue, text_queue=text_queue, optimizer=optimizer)


def lr_for_epoch(cfg: RunConfig, epoch: int) -> float:
    """Base rate, dropped once by the decay factor for the final epochs."""
    t = cfg.train
    if t.epochs > 0 and epoch >= t.epochs - t.lr_decay_last_epochs:
        return t.lr / t.lr_decay_factor
    return t.lr


def _apply_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _empty_queue_like(emb: torch.Tensor) -> torch.Tensor:
    return torch.zeros(0, emb.shape[1], dtype=emb.dtype, device=emb.device)


def train_step(state: TrainState, batch: Batch, cfg: RunConfig,
               hook: Hook | None = None) -> dict[str, float]:
    """One optimization step; returns the loss components as floats."""

    def fire(event: str, **payload) -> None:
        if hook is not None:
            hook(event, payload)

    state.image_pair.train(True)
    state.text_pair.train(True)

    v_query = state.image_pair.query(batch.regions, batch.clip_global)
    w_query = state.text_pair.query(batch.tokens, batch.lengths)
    fire("query_forward", step=state.step)

    v_key = state.image_pair.key_forward(batch.regions, batch.clip_global)
    w_key = state.text_pair.key_forward(batch.tokens, batch.lengths)
    fire("key_forward", step=state.step)

    if cfg.loss.triplet_baseline:
        mini = triplet_ranking_loss(v_query, w_query, cfg.loss.triplet_margin)
    else:
        mini = mini_hal_loss(v_query, w_query, cfg.loss)
    visual_snap = state.visual_queue.snapshot() if state.visual_queue is not None else _empty_queue_like(v_query)
    text_snap = state.text_queue.snapshot() if state.text_queue is not None else _empty_queue_like(w_query)
    dq = queue_hal_loss(v_query, w_query, v_key, w_key, visual_snap, text_snap, cfg.loss)
    loss = total_loss(mini, dq, cfg.loss)
    loss_val, mini_val, dq_val = (float(t.detach()) for t in (loss, mini, dq))
    fire("loss", step=state.step, loss=loss_val)

    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: "
            f"total={loss_val} mini={mini_val} dq={dq_val}; "
            f"batch images {batch.image_ids[:4]}..., captions {batch.caption_ids[:4]}...")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.train.grad_clip > 0:
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
    state.optimizer.step()
    fire("optim_step", step=state.step)

    state.image_pair.momentum_update()
    state.text_pair.momentum_update()
    fire("momentum_update", step=state.step)

    if state.visual_queue is not None:
        state.visual_queue.enqueue(v_key)
        state.text_queue.enqueue(w_key)
    fire("enqueue", step=state.step)

    state.step += 1
    return {"loss": loss_val, "loss_mini": mini_val, "loss_dq": dq_val}


def check_data_matches_config(cfg: RunConfig, data: SplitData) -> None:
    """Fatal on any disagreement between manifest and run config."""
    m = data.manifest
    d = cfg.data
    if m.K != d.K:
        raise DatasetError(f"split {m.split}: K={m.K} but config data.K={d.K}")
    if m.dims["dI"] != d.dims.dI:
        raise DatasetError(
            f"split {m.split}: dI={m.dims['dI']} but config data.dims.dI={d.dims.dI}")
    if m.dims["dT"] != d.dims.dT:
        raise DatasetError(
            f"split {m.split}: dT={m.dims['dT']} but config data.dims.dT={d.dims.dT}")
    if m.max_length > d.max_length:
        raise DatasetError(
            f"split {m.split}: captions up to {m.max_length} tokens exceed "
            f"data.max_length={d.max_length}")
    if cfg.model.enhancement == "cge":
        if not m.cge:
            raise DatasetError(
                f"split {m.split}: cge enhancement configured but the dataset "
                "declares no clip features")
        if m.dims.get("dIc") != d.dims.dIc:
            raise DatasetError(
                f"split {m.split}: dIc={m.dims.get('dIc')} but config "
                f"data.dims.dIc={d.dims.dIc}")


def evaluate_encoders(image_encoder: torch.nn.Module,
                      text_encoder: torch.nn.Module,
                      data: SplitData,
                      cfg: RunConfig,
                      protocol: str = "full",
                      batch_size: int = 128) -> RetrievalMetrics:
    """Retrieval metrics of the given (query) encoders on one split."""
    dtype = DTYPES[cfg.precision]
    img_emb, cap_emb = extract_embeddings(image_encoder, text_encoder, data,
                                          dtype=dtype, batch_size=batch_size)
    return evaluate_protocol(img_emb, cap_emb,
                             data.manifest.image_to_caption_indices(),
                             protocol=protocol,
                             fold_count=data.manifest.fold_count)


def save_checkpoint(path: str | Path, state: TrainState, cfg: RunConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "epoch": state.epoch,
        "step": state.step,
        "image_query": state.image_pair.query.state_dict(),
        "image_key": state.image_pair.key.state_dict(),
        "text_query": state.text_pair.query.state_dict(),
        "text_key": state.text_pair.key.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "visual_queue": None if state.visual_queue is None else state.visual_queue.state_dict(),
        "text_queue": None if state.text_queue is None else state.text_queue.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    payload.update(extra or {})
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def load_query_encoders(payload: dict, cfg: RunConfig
                        ) -> tuple[ImageEncoder, TextEncoder]:
    """Inference-side encoders from a checkpoint (query encoders only)."""
    dtype = DTYPES[cfg.precision]
    img = build_image_encoder(cfg).to(dtype)
    txt = build_text_encoder(cfg).to(dtype)
    img.load_state_dict(payload["image_query"])
    txt.load_state_dict(payload["text_query"])
    img.eval()
    txt.eval()
    return img, txt


def restore_state(payload: dict, cfg: RunConfig, force: bool = False) -> TrainState:
    """Rebuild a TrainState from a checkpoint payload under `cfg`."""
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    if payload["config_hash"] != config_hash(cfg) and not force:
        raise ConfigError(
            "checkpoint config hash does not match the resolved config; "
            "pass force=True (--force) to resume anyway")
    state = build_state(cfg)
    state.image_pair.query.load_state_dict(payload["image_query"])
    state.image_pair.key.load_state_dict(payload["image_key"])
    state.text_pair.query.load_state_dict(payload["text_query"])
    state.text_pair.key.load_state_dict(payload["text_key"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.visual_queue is not None and payload["visual_queue"] is not None:
        state.visual_queue.load_state_dict(payload["visual_queue"])
        state.text_queue.load_state_dict(payload["text_queue"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return state


@dataclass
class RunResult:
    best_checkpoint: Path
    last_checkpoint: Path
    best_epoch: int
    best_rsum: float
    history: list[dict] = field(default_factory=list)


def run(cfg: RunConfig, resume: str | Path | None = None,
        force_resume: bool = False, hook: Hook | None = None) -> RunResult:
    """Full training run; returns the checkpoint with the best validation rsum."""
    if not cfg.data.root:
        raise ConfigError("data.root is required for training")
    out_dir = cfg.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")

    dtype = setup_runtime(cfg)
    train_data = load_split(cfg.data.root, "train")
    val_data = load_split(cfg.data.root, "val")
    check_data_matches_config(cfg, train_data)
    check_data_matches_config(cfg, val_data)

    best_rsum = -math.inf
    best_epoch = -1
    if resume is not None:
        payload = load_checkpoint(resume)
        state = restore_state(payload, cfg, force=force_resume)
        best_rsum = payload.get("best_rsum", -math.inf)
        best_epoch = payload.get("best_epoch", -1)
    else:
        state = build_state(cfg)

    log_path = out_dir / "epochs.jsonl"
    log_mode = "a" if resume is not None else "w"
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"
    history: list[dict] = []

    def _extra() -> dict:
        return {"best_rsum": best_rsum, "best_epoch": best_epoch}

    if cfg.train.epochs == 0:
        metrics = evaluate_encoders(state.image_pair.query, state.text_pair.query,
                                    val_data, cfg)
        best_rsum, best_epoch = metrics.rsum, 0
        save_checkpoint(best_path, state, cfg, _extra())
        save_checkpoint(last_path, state, cfg, _extra())
        record = {"epoch": -1, "lr": cfg.train.lr, "val": metrics.as_dict()}
        with open(log_path, log_mode) as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return RunResult(best_path, last_path, best_epoch, best_rsum, [record])

    with open(log_path, log_mode) as log:
        for epoch in range(state.epoch, cfg.train.epochs):
            lr = lr_for_epoch(cfg, epoch)
            _apply_lr(state.optimizer, lr)
            sums = {"loss": 0.0, "loss_mini": 0.0, "loss_dq": 0.0}
            n_steps = 0
            batches = iter_batches(train_data, cfg.train.batch_size, shuffle=True,
                                   seed=cfg.data.seed, epoch=epoch,
                                   drop_last=True, dtype=dtype)
            if cfg.train.prefetch > 0:
                batches = prefetch_batches(batches, cfg.train.prefetch)
            for batch in batches:
                stats = train_step(state, batch, cfg, hook=hook)
                for key in sums:
                    sums[key] += stats[key]
                n_steps += 1
            state.epoch = epoch + 1

            metrics = evaluate_encoders(state.image_pair.query, state.text_pair.query,
                                        val_data, cfg)
            if metrics.rsum > best_rsum:
                best_rsum, best_epoch = metrics.rsum, epoch
                save_checkpoint(best_path, state, cfg, _extra())
            record = {
                "epoch": epoch,
                "lr": lr,
                "steps": n_steps,
                "loss": sums["loss"] / max(n_steps, 1),
                "loss_mini": sums["loss_mini"] / max(n_steps, 1),
                "loss_dq": sums["loss_dq"] / max(n_steps, 1),
                "val": metrics.as_dict(),
            }
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()

            last_epoch = epoch == cfg.train.epochs - 1
            if last_epoch or (epoch + 1) % max(cfg.train.checkpoint_every, 1) == 0:
                save_checkpoint(last_path, state, cfg, _extra())

    # resuming a finished run (or into a fresh out_dir) may leave either file
    # unwritten in this directory
    if not last_path.exists():
        save_checkpoint(last_path, state, cfg, _extra())
    if not best_path.exists():
        save_checkpoint(best_path, state, cfg, _extra())
    return RunResult(best_path, last_path, best_epoch, best_rsum, history)
