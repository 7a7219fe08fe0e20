"""Waveform ingestion and the log-mel feature frontend.

The canonical pipeline: 1 s clips at 32 kHz -> 2048-point STFT with a
periodic Hann window, centered reflection padding and hop 500 -> 256
triangular HTK-mel filters (0..16 kHz) on the power spectrum -> natural
log with floor 1e-5 -> trim the final frame, leaving a 1x1x256x64
feature map. A hop of 500 is the unique round hop that yields 64 frames
after a single-frame trim; the last frame (not the first) is dropped to
keep alignment with the clip onset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile


CANONICAL_RATE = 32000
CANONICAL_SAMPLES = 32000


@dataclass
class Waveform:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 256
    n_fft: int = 2048
    hop: int = 500
    sample_rate: int = CANONICAL_RATE
    fmin: float = 0.0
    fmax: float = 16000.0
    log_floor: float = 1e-5
    n_frames: int = 64


def read_wav(path) -> Waveform:
    """Read a PCM or float WAV; stereo is downmixed by channel averaging."""
    rate, data = wavfile.read(path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float32) - 128.0) / 128.0
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform):
    """Write 16-bit PCM."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate, np.round(clipped * 32767.0).astype(np.int16))


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling fallback for non-canonical rates."""
    if w.sample_rate == target_rate:
        return w
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    t_in = np.arange(len(w.samples)) / w.sample_rate
    t_out = np.arange(n_out) / target_rate
    return Waveform(np.interp(t_out, t_in, w.samples).astype(np.float32), target_rate)


def ensure_canonical(w: Waveform) -> Waveform:
    """Coerce a waveform to exactly 1 s at 32 kHz, warning on adjustment."""
    if w.sample_rate != CANONICAL_RATE:
        warnings.warn(
            f"resampling {w.sample_rate} Hz -> {CANONICAL_RATE} Hz (linear interpolation)"
        )
        w = resample_linear(w, CANONICAL_RATE)
    n = len(w.samples)
    if n == CANONICAL_SAMPLES:
        return w
    if n > CANONICAL_SAMPLES:
        warnings.warn(f"cropping clip of {n} samples to {CANONICAL_SAMPLES}")
        return Waveform(w.samples[:CANONICAL_SAMPLES], CANONICAL_RATE)
    warnings.warn(f"zero-padding clip of {n} samples to {CANONICAL_SAMPLES}")
    padded = np.zeros(CANONICAL_SAMPLES, dtype=np.float32)
    padded[:n] = w.samples
    return Waveform(padded, CANONICAL_RATE)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (standard for STFT analysis)."""
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    """Frames produced by centered framing before the final-frame trim."""
    return n_samples // cfg.hop + 1


def stft(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Complex spectrogram, shape (n_fft//2 + 1, frames), centered framing."""
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("stft: empty waveform")
    half = cfg.n_fft // 2
    if len(x) < 2:
        raise ValueError("stft: waveform too short for reflection padding")
    xp = np.pad(x, (half, half), mode="reflect")
    n_frames = (len(xp) - cfg.n_fft) // cfg.hop + 1
    if n_frames < 1:
        raise ValueError(
            f"stft: {len(x)} samples too short for n_fft={cfg.n_fft}, hop={cfg.hop}"
        )
    starts = np.arange(n_frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.n_fft)[None, :]
    frames = xp[idx] * hann_window(cfg.n_fft)[None, :]
    return np.fft.rfft(frames, axis=1).T  # bins x frames


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangle peak frequencies in Hz, strictly increasing by construction."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, n_fft//2 + 1)."""
    if not (0 <= cfg.fmin < cfg.fmax <= cfg.sample_rate / 2):
        raise ValueError(
            f"invalid band edges fmin={cfg.fmin}, fmax={cfg.fmax} "
            f"for sample rate {cfg.sample_rate}"
        )
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for i in range(cfg.n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def log_mel(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel feature map for one clip, shape (1, 1, n_mels, n_frames)."""
    w = ensure_canonical(w)
    spec = stft(w, cfg)
    power = (spec.real**2 + spec.imag**2)
    mel_power = mel_filterbank(cfg) @ power
    feats = np.log(mel_power + cfg.log_floor)
    feats = feats[:, : cfg.n_frames]  # drop the trailing frame
    if feats.shape[1] != cfg.n_frames:
        raise ValueError(
            f"expected {cfg.n_frames} frames, got {feats.shape[1]}; "
            "clip length or hop is inconsistent with the canonical pipeline"
        )
    return feats.astype(np.float32)[None, None, :, :]
