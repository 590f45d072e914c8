"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numbers

import numpy as np

SAMPLE_RATE = 16000
FRAME_RATE = 100
NUM_MELS = 80


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`.

    Generators pass through untouched; integers and sequences of integers
    seed a fresh PCG64 stream.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed or Generator is required")
    if isinstance(seed, (numbers.Integral, list, tuple, np.ndarray)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {type(seed).__name__}")


def check_waveform(wave, name="waveform", allow_empty=False):
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {wave.shape}")
    if not allow_empty and wave.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(wave)):
        raise ValueError(f"{name} contains non-finite samples")
    return wave


def check_features(feat, num_mels=NUM_MELS, name="features"):
    feat = np.asarray(feat)
    if feat.ndim != 2 or feat.shape[1] != num_mels:
        raise ValueError(f"{name} must be T x {num_mels}, got shape {feat.shape}")
    if not np.all(np.isfinite(feat)):
        raise ValueError(f"{name} contains non-finite values")
    return feat


def check_video(video, height=None, width=None, name="video"):
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ValueError(f"{name} must be T x H x W x 3, got shape {video.shape}")
    if height is not None and (video.shape[1], video.shape[2]) != (height, width):
        raise ValueError(
            f"{name} resolution {video.shape[1]}x{video.shape[2]} does not match "
            f"configured {height}x{width}"
        )
    return video


def power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0
