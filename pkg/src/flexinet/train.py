"""Deterministic training loop: augmentation, optional distillation,
optional quantization-aware phase, SGD with cosine learning-rate decay.

Reproducibility contract: a fixed seed and config yield bit-identical
final weights. All randomness flows through numpy Generators seeded from
(seed, epoch, clip-or-batch index) tuples, so per-clip augmentation
could be parallelized without changing results.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .augment import AdirConfig, FmsConfig, adir, freq_mask, freq_mixstyle, time_roll
from .data import UNSEEN_DEVICES
from .distill import KdConfig, kd_loss, label_cross_entropy
from .features import MelConfig, Waveform, log_mel, read_wav
from .model import NULL_QUANT, FlexiNet
from .quantize import QuantRuntime
from .tensor import Tape, backward


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 256
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class AugmentPolicy:
    fms: Optional[FmsConfig] = None
    adir: Optional[AdirConfig] = None
    roll_max_shift: int = 6  # feature frames (~10% of 64)
    mask_max_width: int = 32


@dataclass
class QatSchedule:
    enabled: bool = False
    start_fraction: float = 0.75  # fake-quant from this fraction of training
    freeze_fraction: float = 0.90  # observers freeze from this fraction


@dataclass
class KdBundle:
    fused: dict  # clip_id -> (10,) fused teacher logits
    cfg: KdConfig


@dataclass
class TrainResult:
    model: FlexiNet
    history: list
    quant_runtime: Optional[QuantRuntime]


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(total, 1)))


def load_training_set(records, mel_cfg: MelConfig = MelConfig()):
    """Preload waveforms and their un-augmented feature maps."""
    waveforms = {}
    base_feats = {}
    for r in records:
        w = read_wav(r.path)
        waveforms[r.clip_id] = w
        base_feats[r.clip_id] = log_mel(w, mel_cfg)
    return waveforms, base_feats


class SgdMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and name.endswith(".w"):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g
            p.data += v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _clip_features(record, index, epoch, seed, waveforms, base_feats,
                   policy: AugmentPolicy, mel_cfg: MelConfig) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, index])
    feats = None
    if policy.adir is not None and policy.adir.prob > 0:
        w = waveforms[record.clip_id]
        w_aug = adir(w, policy.adir, rng)
        if w_aug is not w:
            feats = log_mel(w_aug, mel_cfg)
    if feats is None:
        feats = base_feats[record.clip_id]
    if policy.roll_max_shift > 0:
        feats = time_roll(feats, policy.roll_max_shift, rng, axis=-1)
    if policy.mask_max_width > 0:
        feats = freq_mask(feats, policy.mask_max_width, rng)
    return feats


def train_model(model: FlexiNet, records, cfg: TrainConfig,
                policy: AugmentPolicy = AugmentPolicy(),
                kd: Optional[KdBundle] = None,
                qat: Optional[QatSchedule] = None,
                mel_cfg: MelConfig = MelConfig(),
                metrics_path=None,
                eval_hook=None) -> TrainResult:
    """Train in place and return the model, history, and QAT runtime.

    ``eval_hook(model, epoch)``, when given, is called after each epoch
    and its result merged into that epoch's metrics row.
    """
    if not records:
        raise ValueError("no training records")
    for r in records:
        if r.device in UNSEEN_DEVICES:
            raise AssertionError(
                f"batch assembly: test-only device {r.device} in training set "
                f"(clip {r.clip_id})")

    waveforms, base_feats = load_training_set(records, mel_cfg)
    labels_all = np.array([r.label_index for r in records])
    fused_all = None
    if kd is not None:
        missing = [r.clip_id for r in records if r.clip_id not in kd.fused]
        if missing:
            raise ValueError(f"teacher logits missing for training clips: {missing[:5]}")
        fused_all = np.stack([kd.fused[r.clip_id] for r in records])

    opt = SgdMomentum(model.params(), cfg.lr, cfg.momentum, cfg.weight_decay)
    runtime = None
    history = []
    metrics_file = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.time()
            opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            progress = epoch / max(cfg.epochs - 1, 1)
            if qat is not None and qat.enabled:
                if runtime is None and epoch >= qat.start_fraction * cfg.epochs:
                    runtime = QuantRuntime(mode="qat")
                if runtime is not None and epoch >= qat.freeze_fraction * cfg.epochs:
                    runtime.frozen = True

            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
            epoch_loss = 0.0
            n_batches = 0
            for bstart in range(0, len(records), cfg.batch_size):
                idx = order[bstart : bstart + cfg.batch_size]
                batch = np.concatenate([
                    _clip_features(records[i], int(i), epoch, cfg.seed,
                                   waveforms, base_feats, policy, mel_cfg)
                    for i in idx
                ], axis=0)
                if policy.fms is not None and policy.fms.prob > 0:
                    fms_rng = np.random.default_rng([cfg.seed, epoch, 1_000_003, n_batches])
                    batch = freq_mixstyle(batch, policy.fms, fms_rng)
                labels = labels_all[idx]

                opt.zero_grad()
                with Tape() as tape:
                    logits = model.forward(batch, training=True,
                                           quant=runtime if runtime else NULL_QUANT)
                    if kd is not None:
                        lam = kd.cfg.lambda_at(progress)
                        loss = kd_loss(logits, labels, fused_all[idx], kd.cfg,
                                       lambda_override=lam)
                    else:
                        loss = label_cross_entropy(logits, labels)
                backward(tape, loss)
                opt.step()
                epoch_loss += loss.item()
                n_batches += 1

            row = {"epoch": epoch, "loss": epoch_loss / max(n_batches, 1),
                   "lr": opt.lr, "seconds": round(time.time() - t0, 3)}
            if kd is not None:
                row["lambda_kd"] = kd.cfg.lambda_at(progress)
            if qat is not None and qat.enabled:
                row["qat_active"] = runtime is not None
            if eval_hook is not None:
                row.update(eval_hook(model, epoch))
            history.append(row)
            if metrics_file:
                metrics_file.write(json.dumps(row) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()
    return TrainResult(model, history, runtime)
