"""Corpus handling: metadata ingestion, synthetic multi-device generation,
evaluation reports, and clip-energy analysis.

The synthetic corpus is a desk-scale stand-in for a real multi-device
recording campaign: ten acoustically separable scene classes (parametric
tone/noise mixtures) recorded through nine simulated device chains.
Devices S4-S6 use held-out colorations (stronger tilt, reverb, noise) and
appear only in the test split, so cross-device generalization is a real,
measurable effect.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal as sps

from .augment import clip_energy
from .features import CANONICAL_RATE, Waveform, read_wav, write_wav

SCENES = ("airport", "bus", "metro", "metro_station", "park", "public_square",
          "shopping_mall", "street_pedestrian", "street_traffic", "tram")
DEVICES = ("A", "B", "C", "S1", "S2", "S3", "S4", "S5", "S6")
SEEN_DEVICES = ("A", "B", "C", "S1", "S2", "S3")
UNSEEN_DEVICES = ("S4", "S5", "S6")
SPLITS = ("train", "test", "unused")

TAU22_TRAIN_COUNT = 139620
TAU22_TEST_COUNT = 29680


@dataclass
class ClipRecord:
    clip_id: str
    path: Optional[Path]
    scene_label: str
    device: str
    city: str = ""
    split: str = "unused"

    def __post_init__(self):
        if self.scene_label not in SCENES:
            raise ValueError(f"unknown scene label {self.scene_label!r}")
        if self.device not in DEVICES:
            raise ValueError(f"unknown device token {self.device!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and self.device in UNSEEN_DEVICES:
            raise ValueError(
                f"device {self.device} is test-only and cannot appear in the train split"
            )

    @property
    def label_index(self) -> int:
        return SCENES.index(self.scene_label)


def _device_from_filename(filename: str) -> str:
    stem = Path(filename).stem
    token = stem.split("-")[-1].upper()
    return token


def load_tau_metadata(meta_csv, default_split="unused") -> list:
    """Parse a metadata table (tab- or comma-separated) into clip records.

    Expected columns: ``filename`` and ``scene_label`` (or ``scene``);
    device is read from a ``device``/``source_label`` column when present,
    else derived from the filename suffix. ``identifier``/``city`` and
    ``split`` columns are picked up when present.
    """
    meta_csv = Path(meta_csv)
    records = []
    with open(meta_csv) as f:
        header_line = f.readline()
        if not header_line.strip():
            warnings.warn(f"{meta_csv}: empty metadata file")
            return records
        delim = "\t" if "\t" in header_line else ","
        cols = [c.strip() for c in header_line.rstrip("\n").split(delim)]
        idx = {name: i for i, name in enumerate(cols)}
        if "filename" not in idx:
            raise ValueError(f"{meta_csv}:1: missing required column 'filename'")
        scene_col = "scene_label" if "scene_label" in idx else "scene"
        if scene_col not in idx:
            raise ValueError(f"{meta_csv}:1: missing required column 'scene_label'")
        device_col = next((c for c in ("device", "source_label") if c in idx), None)
        city_col = next((c for c in ("city", "identifier") if c in idx), None)
        split_col = "split" if "split" in idx else None

        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delim)
            if len(parts) < len(cols):
                raise ValueError(
                    f"{meta_csv}:{lineno}: expected {len(cols)} fields, got {len(parts)}"
                )
            filename = parts[idx["filename"]].strip()
            scene = parts[idx[scene_col]].strip()
            device = (parts[idx[device_col]].strip().upper() if device_col
                      else _device_from_filename(filename))
            city = ""
            if city_col:
                city = parts[idx[city_col]].strip().split("-")[0]
            split = parts[idx[split_col]].strip() if split_col else default_split
            try:
                rec = ClipRecord(
                    clip_id=Path(filename).stem,
                    path=meta_csv.parent / filename,
                    scene_label=scene,
                    device=device,
                    city=city,
                    split=split,
                )
            except ValueError as e:
                raise ValueError(f"{meta_csv}:{lineno}: {e}") from None
            records.append(rec)
    if not records:
        warnings.warn(f"{meta_csv}: no records parsed")
    return records


def split_counts(records) -> dict:
    out = {s: 0 for s in SPLITS}
    for r in records:
        out[r.split] += 1
    return out


def check_official_counts(records) -> str:
    """Report split counts; flag deviations when a full corpus is claimed."""
    counts = split_counts(records)
    msg = (f"train={counts['train']} test={counts['test']} "
           f"unused={counts['unused']}")
    if counts["train"] + counts["test"] + counts["unused"] >= TAU22_TRAIN_COUNT:
        ok = (counts["train"] == TAU22_TRAIN_COUNT
              and counts["test"] == TAU22_TEST_COUNT)
        msg += " [full corpus: counts match]" if ok else (
            f" [full corpus expected train={TAU22_TRAIN_COUNT} test={TAU22_TEST_COUNT}]")
    return msg


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    train_clips_per_cell: int = 4  # per (scene, seen device)
    test_clips_per_cell: int = 2  # per (scene, any device)
    seed: int = 7
    sample_rate: int = CANONICAL_RATE
    duration: float = 1.0


# per-device coloration: gain, band limits, spectral tilt, noise floor,
# and (for unseen devices) a reverb impulse response seed
_DEVICE_PROFILES = {
    "A":  dict(gain=1.00, hp=50,  lp=11000, tilt=0.00,  noise=0.0010, ir=None),
    "B":  dict(gain=0.80, hp=70,  lp=9000,  tilt=-0.20, noise=0.0030, ir=None),
    "C":  dict(gain=1.20, hp=90,  lp=8000,  tilt=0.20,  noise=0.0020, ir=None),
    "S1": dict(gain=0.70, hp=130, lp=6500,  tilt=-0.35, noise=0.0040, ir=None),
    "S2": dict(gain=1.10, hp=80,  lp=7500,  tilt=0.30,  noise=0.0030, ir=None),
    "S3": dict(gain=0.90, hp=110, lp=7000,  tilt=-0.15, noise=0.0050, ir=None),
    "S4": dict(gain=0.55, hp=240, lp=4800,  tilt=-0.60, noise=0.0110, ir=41),
    "S5": dict(gain=1.45, hp=190, lp=5600,  tilt=0.55,  noise=0.0090, ir=42),
    "S6": dict(gain=0.60, hp=280, lp=5000,  tilt=-0.50, noise=0.0130, ir=43),
}


def _scene_params(scene_idx: int):
    f1 = 280.0 * (scene_idx + 1)
    f2 = f1 * 1.9 + 300.0
    band = (150.0 + 380.0 * scene_idx, 150.0 + 380.0 * scene_idx + 600.0)
    return f1, f2, band


def _device_ir(ir_seed: int, sr: int) -> np.ndarray:
    rng = np.random.default_rng(ir_seed)
    n = 1200
    t = np.arange(n)
    ir = rng.standard_normal(n) * np.exp(-t / 260.0)
    ir[0] = 2.2
    return ir / np.max(np.abs(ir))


def synth_clip(scene_idx: int, device: str, rng: np.random.Generator,
               sample_rate=CANONICAL_RATE, duration=1.0) -> Waveform:
    """One synthetic clip: class tone/noise signature through a device chain."""
    n = int(round(sample_rate * duration))
    t = np.arange(n) / sample_rate
    f1, f2, band = _scene_params(scene_idx)

    jitter = lambda: 1.0 + rng.uniform(-0.02, 0.02)
    x = rng.uniform(0.18, 0.30) * np.sin(2 * np.pi * f1 * jitter() * t + rng.uniform(0, 2 * np.pi))
    x += rng.uniform(0.12, 0.22) * np.sin(2 * np.pi * f2 * jitter() * t + rng.uniform(0, 2 * np.pi))
    noise = rng.standard_normal(n)
    b, a = sps.butter(2, band, btype="bandpass", fs=sample_rate)
    x += rng.uniform(0.10, 0.18) * sps.lfilter(b, a, noise)
    x += 0.004 * rng.standard_normal(n)  # ambience floor

    prof = _DEVICE_PROFILES[device]
    b, a = sps.butter(2, [prof["hp"], prof["lp"]], btype="bandpass", fs=sample_rate)
    y = sps.lfilter(b, a, x)
    y = y + prof["tilt"] * np.concatenate([[0.0], y[:-1]])  # first-order tilt
    if prof["ir"] is not None:
        ir = _device_ir(prof["ir"], sample_rate)
        y = sps.fftconvolve(y, ir)[:n]
    y = prof["gain"] * y
    y = y + prof["noise"] * rng.standard_normal(n)

    peak = np.max(np.abs(y))
    if peak > 0.99:
        y = y * (0.99 / peak)
    return Waveform(y.astype(np.float32), sample_rate)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir) -> list:
    """Write the corpus (WAVs + meta.csv) and return its clip records."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s_idx, scene in enumerate(SCENES):
        for d_idx, device in enumerate(DEVICES):
            cells = []
            if device in SEEN_DEVICES:
                cells += [("train", i) for i in range(spec.train_clips_per_cell)]
            cells += [("test", i) for i in range(spec.test_clips_per_cell)]
            for split, i in cells:
                tag = 0 if split == "train" else 1
                rng = np.random.default_rng([spec.seed, s_idx, d_idx, tag, i])
                w = synth_clip(s_idx, device, rng, spec.sample_rate, spec.duration)
                city = f"city{(s_idx + i) % 3}"
                clip_id = f"{scene}-{city}-{split}{i}-{device.lower()}"
                path = audio_dir / f"{clip_id}.wav"
                write_wav(path, w)
                records.append(ClipRecord(clip_id, path, scene, device, city, split))
    with open(out_dir / "meta.csv", "w") as f:
        f.write("filename\tscene_label\tdevice\tcity\tsplit\n")
        for r in records:
            f.write(f"audio/{r.clip_id}.wav\t{r.scene_label}\t{r.device}\t{r.city}\t{r.split}\n")
    return records


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_device: dict
    per_scene: dict
    macro_acc: float
    confusion: np.ndarray  # (10, 10) rows = true scene, cols = predicted
    device_counts: dict
    n_clips: int

    def to_dict(self) -> dict:
        return {
            "per_device_accuracy": self.per_device,
            "per_scene_accuracy": self.per_scene,
            "macro_accuracy": self.macro_acc,
            "confusion_matrix": self.confusion.tolist(),
            "device_counts": self.device_counts,
            "n_clips": self.n_clips,
            "scenes": list(SCENES),
            "devices": [d for d in DEVICES if d in self.per_device],
        }

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def device_row(self) -> tuple:
        """Header and value row in the device-table layout (A..S6, ACC)."""
        devices = [d for d in DEVICES if d in self.per_device]
        header = devices + ["ACC"]
        values = [self.per_device[d] for d in devices] + [self.macro_acc]
        return header, values

    def text_table(self) -> str:
        header, values = self.device_row()
        lines = ["device accuracy (%)",
                 "  ".join(f"{h:>6}" for h in header),
                 "  ".join(f"{100 * v:6.2f}" for v in values),
                 "", "scene accuracy (%)"]
        for scene in SCENES:
            if scene in self.per_scene:
                lines.append(f"  {scene:<20} {100 * self.per_scene[scene]:6.2f}")
        return "\n".join(lines)

    def save_csv(self, path):
        header, values = self.device_row()
        with open(path, "w") as f:
            f.write(",".join(header) + "\n")
            f.write(",".join(f"{100 * v:.4f}" for v in values) + "\n")


def evaluate(model, records, feats: np.ndarray) -> EvalReport:
    """Per-device/per-scene accuracy and confusion for aligned features.

    ``feats`` must be an (N, 1, F, T) array aligned with ``records``;
    ``model`` exposes ``predict``. Macro accuracy is the unweighted mean
    over the device columns present.
    """
    if len(records) == 0:
        raise ValueError("evaluate: empty record set")
    if feats.shape[0] != len(records):
        raise ValueError(f"{len(records)} records but {feats.shape[0]} feature maps")
    logits = model.predict(feats)
    pred = logits.argmax(axis=1)
    true = np.array([r.label_index for r in records])

    confusion = np.zeros((len(SCENES), len(SCENES)), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)

    per_device = {}
    device_counts = {}
    for d in DEVICES:
        mask = np.array([r.device == d for r in records])
        if mask.any():
            per_device[d] = float((pred[mask] == true[mask]).mean())
            device_counts[d] = int(mask.sum())
    per_scene = {}
    for si, scene in enumerate(SCENES):
        mask = true == si
        if mask.any():
            per_scene[scene] = float((pred[mask] == si).mean())
    macro = float(np.mean(list(per_device.values())))
    return EvalReport(per_device, per_scene, macro, confusion,
                      device_counts, len(records))


# ---------------------------------------------------------------------------
# clip-energy analysis


@dataclass
class EnergyHistogram:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    n_clips: int

    def to_dict(self):
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist(),
                "mean_energy": self.mean, "n_clips": self.n_clips}


def energy_histogram(records, bins=50, waveforms=None) -> EnergyHistogram:
    """Histogram of per-clip energies; the mean doubles as a threshold aid."""
    if waveforms is None:
        waveforms = (read_wav(r.path) for r in records)
    energies = np.array([clip_energy(w) for w in waveforms])
    if energies.size == 0:
        raise ValueError("energy_histogram: no clips")
    counts, edges = np.histogram(energies, bins=bins)
    return EnergyHistogram(counts, edges, float(energies.mean()), len(energies))
