"""Random-projection quantizer targets and span masking for masked pre-training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_random_state

STACK = 4
MASK_PROB = 0.01
MASK_SPAN = 40
AUDIO_FILL_STD = 0.1


@dataclass(frozen=True, eq=False)
class RandomQuantizer:
    """Frozen projection and unit-norm codebook, reproducible from ``seed``.

    ``mean`` and ``std`` are per-dimension statistics of the stacked input,
    applied before projection. They default to the identity transform.
    """

    projection: np.ndarray
    codebook: np.ndarray
    seed: int
    mean: np.ndarray | None = field(default=None)
    std: np.ndarray | None = field(default=None)

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def code_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    def with_stats(self, mean, std) -> "RandomQuantizer":
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != (self.input_dim,) or std.shape != (self.input_dim,):
            raise ValueError(f"normalization stats must have shape ({self.input_dim},)")
        if np.any(std <= 0):
            raise ValueError("normalization std must be positive")
        return RandomQuantizer(self.projection, self.codebook, self.seed, mean, std)

    def normalize(self, stacked):
        stacked = np.asarray(stacked, dtype=np.float64)
        if self.mean is None:
            return stacked
        return (stacked - self.mean) / self.std


def _philox(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), stream]))


def init_quantizer(seed: int, input_dim: int = 320, code_dim: int = 16, codebook_size: int = 8192):
    """Draw the projection and codebook from counter-based streams keyed by ``seed``."""
    if min(input_dim, code_dim, codebook_size) <= 0:
        raise ValueError("quantizer dimensions must be positive")
    projection = _philox(seed, 0).standard_normal((input_dim, code_dim))
    codebook = _philox(seed, 1).standard_normal((codebook_size, code_dim))
    codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
    return RandomQuantizer(projection, codebook, int(seed))


def stack_frames(feat, stack: int = STACK) -> np.ndarray:
    """Concatenate each run of ``stack`` consecutive frames; the remainder is dropped."""
    feat = np.asarray(feat)
    T, D = feat.shape
    n = T // stack
    return feat[: n * stack].reshape(n, stack * D)


def project(q: RandomQuantizer, stacked) -> np.ndarray:
    """L2-normalized projections; zero vectors stay zero."""
    stacked = np.atleast_2d(np.asarray(stacked, dtype=np.float64))
    if stacked.shape[1] != q.input_dim:
        raise ValueError(f"stacked rows have dim {stacked.shape[1]}, quantizer expects {q.input_dim}")
    v = q.normalize(stacked) @ q.projection
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def quantize(q: RandomQuantizer, stacked) -> np.ndarray:
    """Nearest codebook row by cosine similarity; ties go to the lowest index.

    A zero projection is equidistant from every unit-norm row, so it maps to
    label 0.
    """
    if np.size(stacked) == 0:
        return np.zeros(0, dtype=np.int64)
    sims = project(q, stacked) @ q.codebook.T
    return np.argmax(sims, axis=1).astype(np.int64)


@dataclass(frozen=True)
class MaskSpec:
    spans: tuple  # of (start, length) at 100 Hz
    num_frames: int

    @property
    def frame_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_frames, dtype=bool)
        for start, length in self.spans:
            mask[start : start + length] = True
        return mask


def sample_mask(T: int, p: float = MASK_PROB, span: int = MASK_SPAN, rng=None) -> MaskSpec:
    """Each frame independently starts a span of ``span`` frames with probability ``p``."""
    if T < 1:
        raise ValueError("cannot mask an empty sequence")
    rng = check_random_state(rng)
    starts = np.flatnonzero(rng.random(T) < p)
    return MaskSpec(tuple((int(s), int(min(span, T - s))) for s in starts), int(T))


def apply_audio_mask(feat, mask: MaskSpec, rng, std: float = AUDIO_FILL_STD) -> np.ndarray:
    """Replace masked frames with Gaussian noise; other frames are copied untouched."""
    feat = np.asarray(feat)
    if mask.num_frames != feat.shape[0]:
        raise ValueError(f"mask covers {mask.num_frames} frames, features have {feat.shape[0]}")
    out = np.array(feat, copy=True)
    m = mask.frame_mask
    if m.any():
        rng = check_random_state(rng)
        out[m] = rng.normal(0.0, std, size=(int(m.sum()), feat.shape[1]))
    return out


def mask_at_target_rate(mask: MaskSpec, stack: int = STACK) -> np.ndarray:
    """A target position counts only when all of its ``stack`` source frames are masked."""
    n = mask.num_frames // stack
    return mask.frame_mask[: n * stack].reshape(n, stack).all(axis=1)


def apply_video_mask(video, target_mask, rng) -> np.ndarray:
    """Swap every masked frame for a uniformly drawn frame of the same clip.

    The draw may hit any frame, masked or not; a one-frame clip is left as is.
    """
    video = np.asarray(video)
    target_mask = np.asarray(target_mask, dtype=bool)
    if video.shape[0] != target_mask.shape[0]:
        raise ValueError(f"video has {video.shape[0]} frames, mask has {target_mask.shape[0]}")
    out = np.array(video, copy=True)
    idx = np.flatnonzero(target_mask)
    if idx.size:
        rng = check_random_state(rng)
        out[idx] = video[rng.integers(0, video.shape[0], size=idx.size)]
    return out


@dataclass
class TargetSequence:
    labels: np.ndarray
    target_mask: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.target_mask = np.asarray(self.target_mask, dtype=bool)
        if self.labels.shape != self.target_mask.shape:
            raise ValueError("labels and target_mask lengths differ")


def make_targets(q: RandomQuantizer, clean_feat, mask: MaskSpec) -> TargetSequence:
    """Targets come from the clean features; masking only touches the model input."""
    return TargetSequence(quantize(q, stack_frames(clean_feat)), mask_at_target_rate(mask))


def mlm_loss(logits, labels, target_mask):
    """Mean cross-entropy over target positions.

    ``logits`` is ``(..., M, K)`` and ``labels``/``target_mask`` are ``(..., M)``.
    Returns ``(loss, empty)``; ``empty`` is True when nothing was masked, in
    which case the loss is a zero that still carries a graph. The softmax
    runs in float64 so uniform logits give exactly ``ln K``.
    """
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    target_mask = torch.as_tensor(target_mask, dtype=torch.bool)
    if logits.shape[:-1] != labels.shape or labels.shape != target_mask.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)}, labels {tuple(labels.shape)}, "
            f"mask {tuple(target_mask.shape)}"
        )
    if not bool(target_mask.any()):
        return logits.sum() * 0.0, True
    nll = F.cross_entropy(logits[target_mask].double(), labels[target_mask], reduction="mean")
    return nll, False
