"""Waveform-level signal processing.

Log-mel features, SNR-controlled mixing, babble synthesis, SpecAugment and
16-bit PCM WAV input/output. Every function is pure: randomness comes in
through an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import (
    NUM_MELS,
    SAMPLE_RATE,
    check_random_state,
    check_waveform,
    power,
)


@dataclass(frozen=True)
class MelConfig:
    window_ms: float = 25.0
    stride_ms: float = 10.0
    num_mels: int = NUM_MELS
    fft_size: int = 512
    mel_low: float = 125.0
    mel_high: float = 7500.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def stride_samples(self) -> int:
        return int(round(self.sample_rate * self.stride_ms / 1000))

    def validate(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size is smaller than the analysis window")
        if not 0 <= self.mel_low < self.mel_high <= self.sample_rate / 2:
            raise ValueError("mel range must satisfy 0 <= low < high <= nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        return self


@dataclass(frozen=True)
class SpecAugmentConfig:
    num_freq_masks: int = 2
    max_freq_width: int = 27
    num_time_masks: int = 2
    max_time_ratio: float = 0.05


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Center frequency in Hz of each triangular mel filter."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.num_mels + 2)
    )
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-style filterbank of shape ``(fft_size // 2 + 1, num_mels)``."""
    cfg.validate()
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.num_mels + 2)
    )
    bins = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling)).T


def num_frames(num_samples: int, cfg: MelConfig = MelConfig()) -> int:
    if num_samples < cfg.window_samples:
        return 0
    return (num_samples - cfg.window_samples) // cfg.stride_samples + 1


def compute_logmel(wave, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel filterbank energies, ``T x num_mels`` at 100 Hz.

    Frames lie fully inside the signal (no padding), so
    ``T = (N - window) // stride + 1``.
    """
    cfg.validate()
    wave = check_waveform(wave)
    win, hop = cfg.window_samples, cfg.stride_samples
    if wave.size < win:
        raise ValueError("utterance too short")
    frames = np.lib.stride_tricks.sliding_window_view(wave, win)[::hop]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    spectrum = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    energy = (spectrum.real**2 + spectrum.imag**2) @ mel_filterbank(cfg)
    return np.log(np.maximum(energy, cfg.log_floor))


def noise_scale(clean_power: float, noise_power: float, snr_db: float) -> float:
    """Gain that brings ``noise_power`` to ``snr_db`` below ``clean_power``."""
    if np.isposinf(snr_db):
        return 0.0
    return float(np.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def fit_noise_length(noise, length: int, rng) -> np.ndarray:
    """Tile or crop ``noise`` circularly to ``length`` samples from a random offset."""
    rng = check_random_state(rng)
    offset = int(rng.integers(len(noise)))
    return np.resize(np.roll(noise, -offset), length)


def mix_at_snr(clean, noise, snr_db: float, rng, return_noise: bool = False):
    """Add ``noise`` to ``clean`` at the requested SNR in dB.

    The mixture is peak-normalized only when a sample would leave [-1, 1],
    so the realized SNR is exact in the common case. ``snr_db=inf`` returns
    the clean signal unchanged.
    """
    clean = check_waveform(clean, "clean")
    noise = check_waveform(noise, "noise")
    p_clean, p_noise = power(clean), power(noise)
    if p_noise <= 0:
        raise ValueError("silent noise source")
    if p_clean <= 0:
        raise ValueError("silent utterance")
    segment = fit_noise_length(noise, clean.size, rng)
    scaled = noise_scale(p_clean, power(segment), snr_db) * segment
    mixed = clean + scaled
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        mixed = mixed / peak
    if return_noise:
        return mixed, scaled
    return mixed


def make_babble(utterances, k: int, rng, length: int | None = None) -> np.ndarray:
    """Sum ``k`` randomly chosen utterances at random circular offsets.

    The result is rescaled to unit RMS. ``length`` defaults to the longest
    chosen utterance; shorter ones wrap around.
    """
    rng = check_random_state(rng)
    if k < 2:
        raise ValueError("babble needs at least two utterances")
    if len(utterances) < k:
        raise ValueError(f"pool of {len(utterances)} utterances is smaller than k={k}")
    chosen = [check_waveform(utterances[i]) for i in rng.choice(len(utterances), k, replace=False)]
    if length is None:
        length = max(u.size for u in chosen)
    babble = np.zeros(length)
    for u in chosen:
        babble += np.resize(np.roll(u, -int(rng.integers(u.size))), length)
    rms = np.sqrt(power(babble))
    if rms == 0:
        raise ValueError("babble sources cancel to silence")
    return babble / rms


def spectral_flatness(wave, cfg: MelConfig = MelConfig()) -> float:
    """Geometric over arithmetic mean of the average power spectrum."""
    wave = check_waveform(wave)
    win, hop = cfg.window_samples, cfg.stride_samples
    frames = np.lib.stride_tricks.sliding_window_view(wave, win)[::hop]
    spec = np.mean(np.abs(np.fft.rfft(frames * np.hanning(win), n=cfg.fft_size)) ** 2, axis=0)
    spec = np.maximum(spec, 1e-20)
    return float(np.exp(np.mean(np.log(spec))) / np.mean(spec))


def spec_augment(feat, cfg: SpecAugmentConfig = SpecAugmentConfig(), rng=None) -> np.ndarray:
    """Frequency and time masking filled with the utterance mean.

    Widths are drawn uniformly from ``[0, max]``; with zero masks the input
    is returned as an identical copy.
    """
    feat = np.asarray(feat)
    if feat.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feat.shape}")
    out = np.array(feat, copy=True)
    if cfg.num_freq_masks == 0 and cfg.num_time_masks == 0:
        return out
    rng = check_random_state(rng)
    T, D = out.shape
    fill = feat.mean() if feat.size else 0.0
    for _ in range(cfg.num_freq_masks):
        width = int(rng.integers(0, min(cfg.max_freq_width, D) + 1))
        start = int(rng.integers(0, D - width + 1))
        out[:, start : start + width] = fill
    max_width = int(np.floor(cfg.max_time_ratio * T))
    for _ in range(cfg.num_time_masks):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, T - width + 1))
        out[start : start + width, :] = fill
    return out


def read_wav(path) -> np.ndarray:
    """Read mono 16 kHz 16-bit PCM into float64 samples in [-1, 1)."""
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2 or f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected mono 16-bit PCM at {SAMPLE_RATE} Hz")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples) -> None:
    samples = check_waveform(samples, allow_empty=True)
    if samples.size and np.max(np.abs(samples)) > 1.0:
        raise ValueError("samples outside [-1, 1]; normalize before writing")
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
