"""Pretraining, detection training, evaluation and prediction loops."""
from __future__ import annotations

import copy
import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import FrameStore, VideoRecord, sample_training_clip, scan_dataset, segment_for_eval
from .encoder import MaskedAutoencoder, sample_mask
from .graph import AUDetector
from .objectives import (AUPredictions, ConfusionCounts, asymmetric_au_loss, binarize, confusion_accumulate,
                         metric_report)

log = logging.getLogger(__name__)


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def cosine_lr_factor(step, warmup_steps, total_steps, min_ratio=0.0):
    """Multiplier on the peak lr: linear warmup, then cosine decay reaching ``min_ratio`` at the last step."""
    if step < warmup_steps:
        return (step + 1) / (warmup_steps + 1)
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress))


def build_optimizer(model, opt_cfg):
    params = [p for p in model.parameters() if p.requires_grad]
    decay = [p for p in params if p.dim() >= 2]
    no_decay = [p for p in params if p.dim() < 2]
    optimizer = torch.optim.AdamW(
        [{"params": decay, "weight_decay": opt_cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=opt_cfg.lr, betas=opt_cfg.betas)
    sched = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: cosine_lr_factor(s, opt_cfg.warmup_steps, opt_cfg.steps, opt_cfg.min_lr_ratio))
    return optimizer, sched


def _load_records(root):
    records = scan_dataset(root)
    if not records:
        raise ValueError(f"dataset {root} contains no videos")
    return records


# --------------------------------------------------------------------------- pretraining


def collect_images(records, store):
    return np.concatenate([store.video(r) for r in records])


def pretrain_mae(cfg: RunConfig, images: np.ndarray, log_every=10):
    """Optimise the masked reconstruction loss on ``images`` (``(K, C, H, W)``).

    Returns the model and a history dict with per-step losses plus the masked
    MSE on all images under a fixed mask, before and after training.
    """
    if len(images) == 0:
        raise ValueError("no images to pretrain on")
    rng = seed_everything(cfg.seed)
    model = MaskedAutoencoder(cfg.encoder, with_decoder=True)
    images = torch.from_numpy(np.asarray(images, dtype=np.float32))
    m = cfg.encoder.num_patches
    probe_mask = sample_mask(m, cfg.mask_ratio, cfg.seed + 1, num_frames=len(images))

    def probe():
        model.eval()
        with torch.no_grad():
            return float(model(images, probe_mask)[0])

    history = {"loss": [], "initial_probe": probe()}
    if cfg.optimizer.steps > 0:
        optimizer, sched = build_optimizer(model, cfg.optimizer)
        model.train()
        for step in range(cfg.optimizer.steps):
            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            mask = sample_mask(m, cfg.mask_ratio, int(rng.integers(2**31)), num_frames=len(idx))
            loss, _ = model(images[idx], mask)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            sched.step()
            history["loss"].append(loss.item())
            if step % log_every == 0 or step == cfg.optimizer.steps - 1:
                log.info("pretrain step %d loss %.5f lr %.2e", step, history["loss"][-1], sched.get_last_lr()[0])
    history["final_probe"] = probe()
    return model, history


def cmd_pretrain(cfg: RunConfig, out_dir):
    cfg.validate()
    records = _load_records(cfg.dataset)
    images = collect_images(records, FrameStore())
    model, history = pretrain_mae(cfg, images)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"initial_masked_mse": history["initial_probe"], "final_masked_mse": history["final_probe"]}
    save_checkpoint(out / "mae.ckpt", model.state_dict(), kind="mae", config=cfg.to_dict(),
                    step=cfg.optimizer.steps, metrics=metrics)
    log.info("pretrain masked MSE %.5f -> %.5f", metrics["initial_masked_mse"], metrics["final_masked_mse"])
    return model, history


# --------------------------------------------------------------------------- detection


def build_detector(cfg: RunConfig, encoder_state=None):
    model = AUDetector(cfg.encoder, cfg.stgl if cfg.use_stgl else None, num_aus=cfg.num_aus)
    if encoder_state is not None:
        missing, unexpected = model.encoder.load_state_dict(encoder_state, strict=False)
        if missing:
            raise ValueError(f"encoder checkpoint lacks {missing}")
    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    return model


def encoder_state_from(path):
    _, state = load_checkpoint(path, kind="mae")
    skip = ("decoder_", "mask_token")
    return {k: v for k, v in state.items() if not k.startswith(skip)}


def _clip_batch(records, rng, batch_size, store, length):
    frames, labels, valid = [], [], []
    for _ in range(batch_size):
        rec = records[int(rng.integers(len(records)))]
        seq, lab, _ = sample_training_clip(rec, rng, length, store)
        frames.append(seq.frames)
        labels.append(lab)
        valid.append(seq.valid_mask)
    return (torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(labels)),
            torch.from_numpy(np.stack(valid)))


@torch.no_grad()
def predict_scores(model, record: VideoRecord, store=None, length=16, batch_segments=8):
    """Scores ``(F, N)`` for every real frame of ``record``, in frame order."""
    model.eval()
    segments = segment_for_eval(record, length, store)
    out = []
    for i in range(0, len(segments), batch_segments):
        chunk = segments[i: i + batch_segments]
        frames = torch.from_numpy(np.stack([s.frames for s, _ in chunk]))
        valid = torch.from_numpy(np.stack([s.valid_mask for s, _ in chunk]))
        scores = model(frames, valid).numpy()
        out.extend(sc[: spec.num_real] for sc, (_, spec) in zip(scores, chunk))
    return np.concatenate(out).astype(np.float64)


def evaluate(model, records, threshold=0.5, store=None, length=16):
    """Stream per-video confusion counts over evaluation segments."""
    counts = ConfusionCounts.zeros(model.num_aus)
    for rec in records:
        if not rec.labeled:
            raise ValueError(f"video {rec.video_id} has no labels; use predict instead")
        scores = predict_scores(model, rec, store, length)
        counts = confusion_accumulate(AUPredictions(scores, rec.labels), threshold, counts)
    return counts


def train_detector(cfg: RunConfig, records, val_records=None, encoder_state=None, out_dir=None, store=None):
    """Optimise the asymmetric AU loss end to end.

    Validation F1 is checked every ``cfg.eval_every`` steps and at the end; the
    best-scoring weights are kept alongside the final ones.
    """
    rng = seed_everything(cfg.seed)
    store = store or FrameStore()
    val_records = val_records if val_records is not None else records
    model = build_detector(cfg, encoder_state)
    optimizer, sched = build_optimizer(model, cfg.optimizer)
    history = {"loss": [], "val_f1": []}
    best = (-1.0, None, -1)
    steps = cfg.optimizer.steps
    for step in range(steps):
        model.train()
        frames, labels, valid = _clip_batch(records, rng, cfg.batch_size, store, cfg.clip_length)
        scores = model(frames, valid)
        loss = asymmetric_au_loss(scores, labels, valid)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        sched.step()
        history["loss"].append(loss.item())
        if (step + 1) % cfg.eval_every == 0 or step == steps - 1:
            _, f1 = evaluate(model, val_records, cfg.threshold, store, cfg.clip_length).f1()
            history["val_f1"].append((step + 1, f1))
            log.info("step %d loss %.5f val avg F1 %.4f", step + 1, history["loss"][-1], f1)
            if f1 > best[0]:
                best = (f1, copy.deepcopy(model.state_dict()), step + 1)

    _, train_f1 = evaluate(model, records, cfg.threshold, store, cfg.clip_length).f1()
    history["final_train_f1"] = train_f1
    log.info("final training avg F1 %.6f", train_f1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "last.ckpt", model.state_dict(), kind="detector", config=cfg.to_dict(),
                        step=steps, metrics={"train_avg_f1": train_f1})
        if best[1] is not None:
            save_checkpoint(out / "best.ckpt", best[1], kind="detector", config=cfg.to_dict(),
                            step=best[2], metrics={"val_avg_f1": best[0]})
    return model, history


def cmd_train(cfg: RunConfig, out_dir, init=None):
    cfg.validate()
    records = _load_records(cfg.dataset)
    val = _load_records(cfg.val_dataset) if cfg.val_dataset else None
    enc_state = encoder_state_from(init) if init else None
    return train_detector(cfg, records, val, enc_state, out_dir)


def load_detector(path):
    manifest, state = load_checkpoint(path, kind="detector")
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_detector(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, manifest


def cmd_eval(checkpoint, dataset, threshold=None):
    model, cfg, _ = load_detector(checkpoint)
    threshold = cfg.threshold if threshold is None else threshold
    records = _load_records(dataset)
    unlabeled = [r.video_id for r in records if not r.labeled]
    if unlabeled:
        raise ValueError(f"videos without labels.csv: {unlabeled}; run `predict` for unlabeled data")
    counts = evaluate(model, records, threshold, FrameStore(cache=False), cfg.clip_length)
    return metric_report(counts, cfg.au_names)


def write_predictions(path, record: VideoRecord, binary, au_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", *au_names])
        for fid, row in zip(record.frame_ids, binary):
            w.writerow([fid, *(int(v) for v in row)])


def cmd_predict(checkpoint, dataset, out_dir, threshold=None):
    """One ``<video_id>.csv`` per video with binarised predictions for every real frame."""
    model, cfg, _ = load_detector(checkpoint)
    threshold = cfg.threshold if threshold is None else threshold
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = FrameStore(cache=False)
    written = []
    for rec in _load_records(dataset):
        binary = binarize(predict_scores(model, rec, store, cfg.clip_length), threshold)
        path = out / f"{rec.video_id}.csv"
        write_predictions(path, rec, binary, cfg.au_names)
        written.append(path)
    return written
