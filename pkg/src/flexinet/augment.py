"""Training-time augmentation: frequency MixStyle, energy-gated impulse
response convolution, time rolling, frequency masking.

All functions are pure given an explicit numpy Generator, so per-clip
parallelism only needs per-clip generators (seeded from the global seed
and clip index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .features import Waveform, resample_linear


@dataclass
class FmsConfig:
    prob: float = 0.4
    mix_alpha: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must be in [0, 1], got {self.prob}")
        if self.mix_alpha <= 0:
            raise ValueError(f"mix_alpha must be positive, got {self.mix_alpha}")


@dataclass
class AdirConfig:
    prob: float = 0.6
    energy_threshold: float = 323.0
    dir_bank: list = field(default_factory=list)  # impulse responses (ndarrays)

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must be in [0, 1], got {self.prob}")
        if self.energy_threshold < 0:
            raise ValueError(f"energy_threshold must be >= 0, got {self.energy_threshold}")
        if self.prob > 0 and not self.dir_bank:
            raise ValueError("dir_bank must be non-empty when prob > 0")


_STAT_EPS = 1e-6


def freq_mixstyle(batch: np.ndarray, cfg: FmsConfig, rng: np.random.Generator,
                  gamma=None) -> np.ndarray:
    """Mix per-frequency-bin feature statistics between random batch partners.

    Each sample is normalized per bin (statistics over channels and time),
    then denormalized with statistics convexly mixed with a random
    partner's. Applied to the whole batch with probability cfg.prob; the
    untriggered path returns the input unchanged. ``gamma`` overrides the
    per-sample Beta draw (used by tests).
    """
    if batch.ndim != 4:
        raise ValueError(f"freq_mixstyle expects N x C x F x T, got {batch.shape}")
    if rng.random() >= cfg.prob:
        return batch
    n = batch.shape[0]
    if n < 2:
        warnings.warn("freq_mixstyle triggered on a batch of one: passing through")
        return batch
    if gamma is None:
        gamma = rng.beta(cfg.mix_alpha, cfg.mix_alpha, size=n)
    g = np.broadcast_to(np.asarray(gamma, dtype=batch.dtype).reshape(-1, 1, 1, 1),
                        (n, 1, 1, 1))
    perm = rng.permutation(n)

    mean = batch.mean(axis=(1, 3), keepdims=True)  # N x 1 x F x 1
    std = np.sqrt(batch.var(axis=(1, 3), keepdims=True) + _STAT_EPS)
    normalized = (batch - mean) / std
    mixed_mean = g * mean + (1.0 - g) * mean[perm]
    mixed_std = g * std + (1.0 - g) * std[perm]
    return (normalized * mixed_std + mixed_mean).astype(batch.dtype)


def clip_energy(w) -> float:
    """Sum of squared samples (float64 accumulation)."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w)
    if samples.size == 0:
        raise ValueError("clip_energy: empty waveform")
    return float(np.sum(samples.astype(np.float64) ** 2))


def adir(w: Waveform, cfg: AdirConfig, rng: np.random.Generator) -> Waveform:
    """Energy-gated device-impulse-response convolution.

    Quiet clips (energy <= threshold) always pass through bit-identically,
    whatever the probability draw. Triggered clips are convolved with a
    uniformly chosen impulse response, truncated to the original length
    and renormalized to the original peak amplitude.
    """
    if cfg.prob == 0.0 or rng.random() >= cfg.prob:
        return w
    if clip_energy(w) <= cfg.energy_threshold:
        return w
    h = cfg.dir_bank[int(rng.integers(len(cfg.dir_bank)))]
    full = sps.fftconvolve(w.samples.astype(np.float64), np.asarray(h, dtype=np.float64))
    out = full[: len(w.samples)]
    peak_in = float(np.max(np.abs(w.samples)))
    peak_out = float(np.max(np.abs(out)))
    if peak_out > 0:
        out = out * (peak_in / peak_out)
    return Waveform(out.astype(np.float32), w.sample_rate)


def load_dir_bank(paths, sample_rate=32000) -> list:
    """Load impulse responses from WAV files, resampling once at load."""
    from .features import read_wav

    bank = []
    for p in paths:
        wf = read_wav(p)
        if wf.sample_rate != sample_rate:
            wf = resample_linear(wf, sample_rate)
        bank.append(wf.samples)
    return bank


def synthetic_dir_bank(n=8, sample_rate=32000, seed=1234, length=1600) -> list:
    """Generate a test bank of impulse responses.

    Each entry is exponentially decaying white noise shaped by a distinct
    band-pass, with a direct-path spike so convolution keeps the dry
    signal audible. Stands in for a measured microphone IR collection.
    """
    bank = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        t = np.arange(length)
        decay = np.exp(-t / (length / (4.0 + i)))
        noise = rng.standard_normal(length) * decay
        lo = 100.0 * (i + 1)
        hi = min(lo + 2000.0 + 700.0 * i, sample_rate / 2 - 100)
        b, a = sps.butter(2, [lo, hi], btype="bandpass", fs=sample_rate)
        shaped = sps.lfilter(b, a, noise)
        shaped[0] += np.max(np.abs(shaped)) * (1.5 + 0.25 * i)  # direct path
        shaped /= np.max(np.abs(shaped))
        bank.append(shaped.astype(np.float32))
    return bank


def time_roll(x: np.ndarray, max_shift: int, rng: np.random.Generator,
              axis: int = -1) -> np.ndarray:
    """Circular shift along the time axis by Uniform[-max_shift, max_shift]."""
    if max_shift >= x.shape[axis]:
        raise ValueError(
            f"max_shift {max_shift} must be smaller than axis length {x.shape[axis]}"
        )
    shift = int(rng.integers(-max_shift, max_shift + 1))
    if shift == 0:
        return x
    return np.roll(x, shift, axis=axis)


def freq_mask(x: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """Replace one contiguous band of frequency bins with the map mean.

    Band width ~ Uniform[0, max_width]; all other bins are untouched.
    """
    if x.ndim != 4:
        raise ValueError(f"freq_mask expects N x C x F x T, got {x.shape}")
    f = x.shape[2]
    if max_width > f:
        raise ValueError(f"max_width {max_width} exceeds frequency bins {f}")
    width = int(rng.integers(0, max_width + 1))
    if width == 0:
        return x
    start = int(rng.integers(0, f - width + 1))
    out = x.copy()
    out[:, :, start : start + width, :] = x.mean(dtype=np.float64)
    return out
