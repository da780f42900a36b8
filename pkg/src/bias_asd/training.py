"""Training: learning-rate schedule, augmentations, batching, Adam loop and inference helpers."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .audio import align_mfcc_to_video, compute_mfcc
from .config import ModelConfig, TrainConfig
from .datamodel import ClipSample, crop_and_resize, mask_face_region
from .errors import TrainingError, ValidationError
from .evaluation import ScoredFrame, average_precision
from .fusion import BIASModel, total_loss

log = logging.getLogger(__name__)


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    """``base_lr * lr_decay ** epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    cfg = cfg or TrainConfig()
    return cfg.base_lr * cfg.lr_decay ** epoch


# --------------------------------------------------------------------------- sample preparation


def clip_crops(clip: ClipSample, size: int = 112, mask_face: bool = False, start=0, stop=None):
    """Face and body crops ``(T, 3, size, size)`` for frames ``start:stop`` of a clip."""
    idx = range(start, clip.num_frames if stop is None else stop)
    face = np.stack([crop_and_resize(clip.frames[i], clip.face_boxes[i], size) for i in idx])
    body = []
    for i in idx:
        crop = crop_and_resize(clip.frames[i], clip.body_boxes[i], size)
        if mask_face:
            crop = mask_face_region(crop, clip.face_boxes[i].relative_to(clip.body_boxes[i]))
        body.append(crop)
    return face, np.stack(body)


def clip_mfcc(waveform, sample_rate, fps, T, start=0) -> np.ndarray:
    """Aligned ``(T, 4, 13)`` MFCC blocks for video frames ``start .. start+T``."""
    mfcc = compute_mfcc(waveform, sample_rate)
    full = align_mfcc_to_video(mfcc, fps, start + T)
    return full[start:].astype(np.float32)


def augment_visual(crops, rng: np.random.Generator, cfg: TrainConfig | None = None,
                   enabled: bool = True):
    """Random flip / rotation / area crop, drawn once and applied to every frame of the clip.

    ``crops`` is ``(T, 3, H, W)``; the output has the same shape.
    """
    cfg = cfg or TrainConfig()
    if not enabled:
        return crops
    flip = bool(cfg.flip and rng.random() < 0.5)
    angle = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    scale = math.sqrt(rng.uniform(*cfg.crop_area))
    max_shift = 1.0 - scale
    tx, ty = rng.uniform(-max_shift, max_shift, size=2)
    return apply_affine(crops, flip, angle, scale, tx, ty)


def apply_affine(crops, flip=False, angle=0.0, scale=1.0, tx=0.0, ty=0.0):
    x = torch.as_tensor(np.asarray(crops, dtype=np.float32))
    if flip:
        x = torch.flip(x, dims=(-1,))
    if angle == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        return x.numpy()
    c, s = math.cos(angle), math.sin(angle)
    theta = torch.tensor([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]], dtype=torch.float32)
    grid = F.affine_grid(theta.expand(x.shape[0], 2, 3), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.clamp(0.0, 1.0).numpy()


def negative_audio_swap(waveforms, rng: np.random.Generator, p: float = 0.5, mode: str = "mix"):
    """Mix (or replace) each selected clip's audio with another batch member's audio.

    Returns ``(new_waveforms, partners)`` where ``partners[i]`` is the donor
    index or None. Mixing is ``(own + other) / sqrt(2)``; the donor is
    trimmed or zero-padded to the recipient's length. Labels are untouched.
    """
    waves = [np.asarray(w, dtype=np.float32) for w in waveforms]
    n = len(waves)
    partners = [None] * n
    if n < 2 or p <= 0:
        return waves, partners
    out = list(waves)
    for i in range(n):
        if rng.random() >= p:
            continue
        j = int(rng.integers(0, n - 1))
        j = j + 1 if j >= i else j
        partners[i] = j
        other = np.zeros_like(waves[i])
        m = min(len(other), len(waves[j]))
        other[:m] = waves[j][:m]
        out[i] = other if mode == "replace" else ((waves[i] + other) / np.sqrt(2.0)).astype(np.float32)
    return out, partners


@dataclass
class Batch:
    face: torch.Tensor
    body: torch.Tensor
    mfcc: torch.Tensor
    labels: torch.Tensor
    clip_ids: list


def make_batch(clips, rng=None, cfg: TrainConfig | None = None, train: bool = False,
               crop_size: int = 112, mask_face: bool = False) -> Batch:
    """Assemble a batch; with ``train`` a random window, augmentation and negative audio are applied.

    All clips of a batch must yield the same window length.
    """
    cfg = cfg or TrainConfig()
    windows = []
    for clip in clips:
        T = clip.num_frames
        if train and T > cfg.clip_len:
            start = int(rng.integers(0, T - cfg.clip_len + 1))
            windows.append((start, start + cfg.clip_len))
        else:
            windows.append((0, min(T, cfg.clip_len) if train else T))
    waves = [c.waveform for c in clips]
    if train and cfg.negative_audio:
        waves, _ = negative_audio_swap(waves, rng, cfg.negative_p, cfg.negative_mode)
    faces, bodies, mfccs, labels = [], [], [], []
    for clip, wave, (a, b) in zip(clips, waves, windows):
        face, body = clip_crops(clip, crop_size, mask_face, a, b)
        if train and cfg.augment:
            face = augment_visual(face, rng, cfg)
            body = augment_visual(body, rng, cfg)
        faces.append(face)
        bodies.append(body)
        mfccs.append(clip_mfcc(wave, clip.sample_rate, clip.fps, b - a, a))
        labels.append(np.asarray(clip.labels[a:b]))
    if len({len(x) for x in labels}) != 1:
        raise ValidationError("clips in one batch must have equal window lengths")
    return Batch(
        face=torch.from_numpy(np.stack(faces)),
        body=torch.from_numpy(np.stack(bodies)),
        mfcc=torch.from_numpy(np.stack(mfccs)),
        labels=torch.from_numpy(np.stack(labels).astype(np.int64)),
        clip_ids=[c.clip_id for c in clips],
    )


# --------------------------------------------------------------------------- inference


def _eval_batches(model, clips, zero=(), mask_face=False, batch_size=8, aux=False):
    """Yield ``(clip indices, batch, output)`` with clips grouped by length."""
    groups = {}
    for i, clip in enumerate(clips):
        groups.setdefault(clip.num_frames, []).append(i)
    for _, members in sorted(groups.items()):
        for k in range(0, len(members), batch_size):
            chunk = members[k:k + batch_size]
            batch = make_batch([clips[i] for i in chunk], crop_size=model.cfg.crop_size, mask_face=mask_face)
            yield chunk, batch, model(batch.face, batch.body, batch.mfcc, zero=zero, aux=aux)


@torch.no_grad()
def predict(model: BIASModel, clips, zero=(), mask_face: bool = False, batch_size: int = 8) -> list:
    """Per-clip arrays of speaking probabilities (inference path: fused head only)."""
    model.eval()
    scores = [None] * len(clips)
    for chunk, _, res in _eval_batches(model, clips, zero, mask_face, batch_size):
        for i, s in zip(chunk, res.scores.numpy()):
            scores[i] = s.astype(np.float64)
    return scores


@torch.no_grad()
def validate(model: BIASModel, clips, cfg: TrainConfig | None = None, batch_size: int = 8):
    """Validation ``(mAP, loss)`` in one pass; mAP is NaN when no frame is positive.

    The loss is the full training objective (fused plus auxiliary heads),
    averaged over frames, without augmentation or negative audio.
    """
    cfg = cfg or TrainConfig()
    model.eval()
    scores = [None] * len(clips)
    total, frames = 0.0, 0
    for chunk, batch, res in _eval_batches(model, clips, batch_size=batch_size, aux=True):
        loss = total_loss(res.logits, res.aux_logits, batch.labels, cfg.fused_weight, cfg.aux_weights,
                          cfg.class_weights)
        total += loss.item() * batch.labels.numel()
        frames += batch.labels.numel()
        for i, s in zip(chunk, res.scores.numpy()):
            scores[i] = s.astype(np.float64)
    if not any(np.asarray(c.labels).any() for c in clips):
        log.warning("validation split has no speaking frames; mAP undefined")
        return float("nan"), total / frames
    return average_precision(scored_frames(clips, scores)), total / frames


def scored_frames(clips, scores) -> list:
    frames = []
    for clip, s in zip(clips, scores):
        for ts, score, y in zip(clip.timestamps(), s, clip.labels):
            frames.append(ScoredFrame((clip.clip_id, clip.entity_id, ts), float(score), int(y)))
    return frames


def evaluate_map(model, clips, zero=(), mask_face=False) -> float:
    return average_precision(scored_frames(clips, predict(model, clips, zero, mask_face)))


# --------------------------------------------------------------------------- training loop


def split_clips(clips, val_fraction: float, seed: int):
    """Deterministic train/validation split of a clip list."""
    order = np.random.default_rng([seed, 2**20]).permutation(len(clips))
    n_val = int(math.ceil(val_fraction * len(clips))) if val_fraction > 0 else 0
    if len(clips) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(clips) - 1)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [clips[i] for i in train], [clips[i] for i in val]


@dataclass
class TrainResult:
    model: BIASModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)


def train(clips, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None,
          out_dir=None, progress=None) -> TrainResult:
    """Train a fresh model with Adam and the per-epoch decayed learning rate.

    Each epoch logs the learning rate, mean training loss, validation mAP and
    validation loss. The returned model carries the weights of the epoch with
    the lowest validation loss. With ``out_dir`` the log, split and
    checkpoints are written there.
    """
    from .checkpoint import save_checkpoint
    from .plotting import plot_training_curves

    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or TrainConfig()
    if not clips:
        raise ValidationError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = BIASModel(model_cfg)
    train_clips, val_clips = split_clips(clips, cfg.val_fraction, cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        split = {"train": [c.clip_id for c in train_clips], "val": [c.clip_id for c in val_clips]}
        (out / "split.json").write_text(json.dumps(split, indent=1) + "\n")

    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(0, cfg), betas=(0.9, 0.999), eps=1e-8)
    history, best, best_state = [], -math.inf, None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_clips))
        model.train()
        t0, losses = time.perf_counter(), []
        for b, k in enumerate(range(0, len(order), cfg.batch_size)):
            batch = make_batch([train_clips[i] for i in order[k:k + cfg.batch_size]], rng, cfg,
                               train=True, crop_size=model_cfg.crop_size)
            res = model(batch.face, batch.body, batch.mfcc)
            loss = total_loss(res.logits, res.aux_logits, batch.labels, cfg.fused_weight,
                              cfg.aux_weights, cfg.class_weights)
            if not torch.isfinite(loss):
                _dump_nan(out, epoch, b, batch)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} ({batch.clip_ids})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_map, val_loss = validate(model, val_clips, cfg) if val_clips else (float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_map": val_map,
            "val_loss": val_loss,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info("epoch %d lr=%.3g loss=%.4f val_mAP=%.4f val_loss=%.4f (%.1fs)", epoch, lr,
                 row["train_loss"], val_map, val_loss, row["seconds"])
        if progress:
            progress(row)
        score = _selection_key(val_loss, row["train_loss"])
        if score > best:
            best, best_state, best_epoch = score, copy.deepcopy(model.state_dict()), epoch
        if out:
            _write_log(out / "train_log.csv", history)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = -1
    model.eval()
    result = TrainResult(model, history, best_epoch, [c.clip_id for c in train_clips],
                         [c.clip_id for c in val_clips])
    if out:
        save_checkpoint(out / "model.ckpt", model, cfg)
        if history:
            plot_training_curves(history, out / "train_curves.png")
    return result


def _selection_key(val_loss, train_loss):
    """Higher is better: the lowest validation loss, or training loss without a validation split.

    Validation mAP saturates at 1.0 on easy data, so it cannot rank late epochs.
    """
    return -val_loss if math.isfinite(val_loss) else -train_loss


def _write_log(path, history):
    keys = ["epoch", "lr", "train_loss", "val_map", "val_loss", "seconds"]
    lines = [",".join(keys)] + [",".join(repr(float(r[k])) if k != "epoch" else str(r[k]) for k in keys)
                                for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def _dump_nan(out, epoch, batch_id, batch):
    if not out:
        return
    info = {
        "epoch": epoch,
        "batch": batch_id,
        "clip_ids": batch.clip_ids,
        "face_finite": bool(torch.isfinite(batch.face).all()),
        "body_finite": bool(torch.isfinite(batch.body).all()),
        "mfcc_finite": bool(torch.isfinite(batch.mfcc).all()),
    }
    (Path(out) / "nan_dump.json").write_text(json.dumps(info, indent=1) + "\n")
