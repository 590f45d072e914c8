"""Feature normalization, named random substreams and padded batch assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import dsp

# named substreams; every random draw is keyed by (seed, stream, step[, item])
STREAM_DATA = 0
STREAM_MASK = 1
STREAM_DROPOUT = 2
STREAM_NOISE = 3
STREAM_SPECAUG = 4
STREAM_EVAL = 5
STREAM_INIT = 6


def substream(seed: int, stream: int, *keys) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *map(int, keys)])


@dataclass
class FeatureNormalizer:
    """Frozen per-dimension log-mel statistics shared by every experiment."""

    mean: np.ndarray
    std: np.ndarray
    mel: dsp.MelConfig = dsp.MelConfig()

    @classmethod
    def fit(cls, waves, mel: dsp.MelConfig = dsp.MelConfig()) -> "FeatureNormalizer":
        feats = np.concatenate([dsp.compute_logmel(w, mel) for w in waves])
        return cls(feats.mean(axis=0), np.maximum(feats.std(axis=0), 1e-5), mel)

    def raw(self, wave) -> np.ndarray:
        return dsp.compute_logmel(wave, self.mel)

    def normalize(self, logmel) -> np.ndarray:
        return ((logmel - self.mean) / self.std).astype(np.float32)

    def __call__(self, wave) -> np.ndarray:
        return self.normalize(self.raw(wave))

    def stacked_stats(self, stack: int = 4):
        return np.tile(self.mean, stack), np.tile(self.std, stack)

    def tensors(self) -> dict:
        return {"features/mean": self.mean, "features/std": self.std}

    @classmethod
    def from_tensors(cls, tensors: dict) -> "FeatureNormalizer":
        return cls(np.asarray(tensors["features/mean"]), np.asarray(tensors["features/std"]))


def pad_stack(arrays, dtype=torch.float32):
    """Zero-pad a list of arrays along axis 0; returns ``(batch, lengths)``."""
    lengths = torch.tensor([a.shape[0] for a in arrays], dtype=torch.long)
    T = int(lengths.max()) if len(arrays) else 0
    out = np.zeros((len(arrays), T) + arrays[0].shape[1:], dtype=np.float64)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return torch.as_tensor(out, dtype=dtype), lengths


def pad_labels(label_lists):
    lengths = torch.tensor([len(l) for l in label_lists], dtype=torch.long)
    U = int(lengths.max()) if len(label_lists) else 0
    out = torch.zeros(len(label_lists), U, dtype=torch.long)
    for i, l in enumerate(label_lists):
        out[i, : len(l)] = torch.as_tensor(l, dtype=torch.long)
    return out, lengths


def bucketed_batches(num_items: int, lengths, batch_size: int, rng, bucket_factor: int = 4):
    """Shuffle, sort inside windows of ``bucket_factor`` batches by length, shuffle batches."""
    order = rng.permutation(num_items)
    batches = []
    window = batch_size * bucket_factor
    for start in range(0, num_items, window):
        chunk = order[start : start + window]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]
