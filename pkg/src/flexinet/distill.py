"""Teacher-logit ingestion, fusion, and the blended distillation loss.

Teachers are consumed as files of per-clip logits (K teachers x 10
classes); nothing here runs a teacher network. Fusion combines teachers
as h[i] = sum_k alpha[k] * logits[k][i] + beta[i]; the fitting routine
minimizes validation cross-entropy by full-batch gradient descent from
the uniform-average starting point, so it can never end up worse than
uniform averaging on its fitting split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_CLASSES = 10

TEXT_MAGIC = "#flexinet-logits v1"


@dataclass
class TeacherLogits:
    teacher_ids: list
    class_names: list
    logits: dict  # clip_id -> ndarray (K, C)

    def __post_init__(self):
        k = len(self.teacher_ids)
        c = len(self.class_names)
        for clip_id, arr in self.logits.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (k, c):
                raise ValueError(
                    f"clip {clip_id!r}: logits shape {arr.shape} != ({k}, {c})"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"clip {clip_id!r}: non-finite teacher logits")
            self.logits[clip_id] = arr

    @property
    def num_teachers(self):
        return len(self.teacher_ids)

    def stack(self, clip_ids) -> np.ndarray:
        """Logits for the given clips as one (T, K, C) array."""
        missing = [c for c in clip_ids if c not in self.logits]
        if missing:
            raise KeyError(f"teacher logits missing for clips: {missing[:5]}"
                           + ("..." if len(missing) > 5 else ""))
        return np.stack([self.logits[c] for c in clip_ids], axis=0)


@dataclass
class FusionParams:
    alpha: np.ndarray  # (K,)
    beta: np.ndarray  # (C,)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("fusion parameters must be finite")

    @classmethod
    def uniform(cls, k, c=NUM_CLASSES):
        return cls(np.full(k, 1.0 / k), np.zeros(c))

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}, f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(np.asarray(d["alpha"]), np.asarray(d["beta"]))


# ---------------------------------------------------------------------------
# file formats


def write_logits_text(path, tl: TeacherLogits):
    """Newline-delimited records: clip_id then K*C floats, teacher-major."""
    with open(path, "w") as f:
        f.write(TEXT_MAGIC + "\n")
        f.write("#teachers: " + ",".join(tl.teacher_ids) + "\n")
        f.write("#classes: " + ",".join(tl.class_names) + "\n")
        for clip_id, arr in tl.logits.items():
            vals = " ".join(repr(float(v)) for v in arr.reshape(-1))
            f.write(f"{clip_id} {vals}\n")


def read_logits_text(path) -> TeacherLogits:
    teachers = classes = None
    logits = {}
    with open(path) as f:
        first = f.readline().strip()
        if first != TEXT_MAGIC:
            raise ValueError(f"{path}: not a teacher-logits file (bad header {first!r})")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#teachers:"):
                teachers = [t.strip() for t in line.split(":", 1)[1].split(",")]
                continue
            if line.startswith("#classes:"):
                classes = [c.strip() for c in line.split(":", 1)[1].split(",")]
                continue
            if line.startswith("#"):
                continue
            if teachers is None or classes is None:
                raise ValueError(f"{path}:{lineno}: record before header declarations")
            parts = line.split()
            clip_id = parts[0]
            expected = len(teachers) * len(classes)
            if len(parts) - 1 != expected:
                raise ValueError(
                    f"{path}:{lineno}: expected {expected} values, got {len(parts) - 1}"
                )
            arr = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            logits[clip_id] = arr.reshape(len(teachers), len(classes))
    if teachers is None or classes is None:
        raise ValueError(f"{path}: missing #teachers/#classes declarations")
    return TeacherLogits(teachers, classes, logits)


def write_logits_json(path, tl: TeacherLogits):
    doc = {
        "format": "flexinet-logits",
        "version": 1,
        "teachers": tl.teacher_ids,
        "classes": tl.class_names,
        "logits": {cid: arr.tolist() for cid, arr in tl.logits.items()},
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def read_logits_json(path) -> TeacherLogits:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "flexinet-logits":
        raise ValueError(f"{path}: not a teacher-logits JSON document")
    return TeacherLogits(doc["teachers"], doc["classes"],
                         {cid: np.asarray(v) for cid, v in doc["logits"].items()})


def read_logits(path) -> TeacherLogits:
    """Dispatch on extension: .json for the interchange variant, text otherwise."""
    if str(path).endswith(".json"):
        return read_logits_json(path)
    return read_logits_text(path)


# ---------------------------------------------------------------------------
# fusion


def fuse(logits: np.ndarray, params: FusionParams) -> np.ndarray:
    """h[i] = sum_k alpha[k] * logits[k, i] + beta[i].

    Accepts (K, C) for one clip or (T, K, C) for a batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = params.alpha.shape[0]
    if logits.shape[-2] != k:
        raise ValueError(
            f"fuse: {logits.shape[-2]} teachers in logits but alpha has {k}"
        )
    if logits.shape[-1] != params.beta.shape[0]:
        raise ValueError(
            f"fuse: {logits.shape[-1]} classes in logits but beta has {params.beta.shape[0]}"
        )
    return np.tensordot(logits, params.alpha, axes=([-2], [0])) + params.beta


def _softmax(h):
    e = np.exp(h - h.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fusion_cross_entropy(stacked: np.ndarray, labels: np.ndarray,
                         params: FusionParams) -> float:
    """Mean CE of softmax(fuse(.)) against integer labels."""
    h = fuse(stacked, params)
    logp = h - h.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_fusion(stacked: np.ndarray, labels: np.ndarray, lr=0.05, iters=2000,
               fit_beta=True) -> FusionParams:
    """Fit (alpha, beta) by full-batch gradient descent on mean CE.

    stacked: (T, K, C) held-out teacher logits, labels: (T,) ints. The
    objective is convex; starting from the uniform average and keeping
    the best-seen iterate guarantees the result is never worse than the
    uniform baseline on this split.
    """
    stacked = np.asarray(stacked, dtype=np.float64)
    labels = np.asarray(labels)
    t, k, c = stacked.shape
    if len(labels) != t:
        raise ValueError(f"{t} clips but {len(labels)} labels")
    if np.unique(labels).size < 2:
        raise ValueError("fit_fusion needs at least two distinct labels")
    onehot = np.zeros((t, c))
    onehot[np.arange(t), labels] = 1.0

    alpha = np.full(k, 1.0 / k)
    beta = np.zeros(c)
    best = FusionParams(alpha.copy(), beta.copy())
    best_ce = fusion_cross_entropy(stacked, labels, best)
    for _ in range(iters):
        h = np.tensordot(stacked, alpha, axes=([1], [0])) + beta
        p = _softmax(h)
        g = (p - onehot) / t  # (T, C)
        d_alpha = np.einsum("tc,tkc->k", g, stacked)
        alpha = alpha - lr * d_alpha
        if fit_beta:
            beta = beta - lr * g.sum(axis=0)
        ce = fusion_cross_entropy(stacked, labels, FusionParams(alpha, beta))
        if ce < best_ce:
            best_ce = ce
            best = FusionParams(alpha.copy(), beta.copy())
    return best


# ---------------------------------------------------------------------------
# distillation loss


@dataclass
class KdConfig:
    lambda_kd: float = 0.5
    temperature: float = 2.0
    schedule: Optional[tuple] = None  # (start, end) linear over training

    def __post_init__(self):
        if not 0.0 <= self.lambda_kd <= 1.0:
            raise ValueError(f"lambda_kd must be in [0, 1], got {self.lambda_kd}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.schedule is not None:
            s, e = self.schedule
            if not (0.0 <= s <= 1.0 and 0.0 <= e <= 1.0):
                raise ValueError(f"schedule endpoints must be in [0, 1], got {self.schedule}")

    def lambda_at(self, progress: float) -> float:
        """Weight at a training progress fraction in [0, 1]."""
        if self.schedule is None:
            return self.lambda_kd
        s, e = self.schedule
        return s + (e - s) * min(max(progress, 0.0), 1.0)


def label_cross_entropy(student_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean CE of softmax(student) against one-hot labels."""
    n, c = student_logits.shape
    onehot = np.zeros((n, c), dtype=student_logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    ls = T.log_softmax(student_logits, axis=1)
    picked = T.mul(ls, Tensor(onehot, dtype=student_logits.data.dtype))
    return T.mul_scalar(T.tsum(picked), -1.0 / n)


def kd_loss(student_logits: Tensor, labels: np.ndarray,
            fused_teacher_logits: np.ndarray, cfg: KdConfig,
            lambda_override: Optional[float] = None) -> Tensor:
    """Blended loss: lambda * label CE + (1 - lambda) * distillation CE.

    The distillation term is temperature-scaled cross-entropy between the
    teacher and student distributions, multiplied by T^2 so gradient
    magnitudes stay comparable across temperatures. The endpoint weights
    short-circuit, so lambda = 1 runs the identical op sequence to a
    hard-label-only loss.
    """
    lam = cfg.lambda_kd if lambda_override is None else lambda_override
    loss_label = label_cross_entropy(student_logits, labels)
    if lam == 1.0:
        return loss_label

    temp = cfg.temperature
    n = student_logits.shape[0]
    teacher = np.asarray(fused_teacher_logits, dtype=np.float64) / temp
    q = _softmax(teacher).astype(student_logits.data.dtype)
    ls_t = T.log_softmax(T.mul_scalar(student_logits, 1.0 / temp), axis=1)
    crossed = T.mul(ls_t, Tensor(q))
    loss_kd = T.mul_scalar(T.tsum(crossed), -(temp * temp) / n)
    if lam == 0.0:
        return loss_kd
    return T.add(T.mul_scalar(loss_label, lam), T.mul_scalar(loss_kd, 1.0 - lam))


# ---------------------------------------------------------------------------
# synthetic teachers (test support; real teachers are external)


def synthetic_teacher_logits(labels: np.ndarray, margins, noises, seed=0,
                             class_bias=None, num_classes=NUM_CLASSES) -> np.ndarray:
    """Generate (T, K, C) teacher logits with per-teacher quality knobs.

    Teacher k emits margin_k on the true class plus Gaussian noise of
    scale noise_k everywhere, plus an optional per-class bias row.
    """
    if len(margins) != len(noises):
        raise ValueError("margins and noises must have equal length")
    rng = np.random.default_rng(seed)
    t = len(labels)
    k = len(margins)
    out = np.zeros((t, k, num_classes))
    for ki, (m, s) in enumerate(zip(margins, noises)):
        onehot = np.zeros((t, num_classes))
        onehot[np.arange(t), labels] = m
        noise = rng.standard_normal((t, num_classes)) * s
        bias = np.zeros(num_classes) if class_bias is None else np.asarray(class_bias[ki])
        out[:, ki, :] = onehot + noise + bias
    return out
