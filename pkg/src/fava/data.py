"""Synthetic paired audio/video corpus, the FVT1 tensor container and manifests.

Each symbol sounds like a fixed two-tone chord for 100 ms and looks like a
mouth ellipse with its own width and aperture. Audio and video share one
symbol timeline, so the picture alone identifies the transcript.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from ._validation import SAMPLE_RATE
from .rnnt import DESK_SYMBOLS

SPLITS = ("pretrain", "train", "dev", "test")
VIDEO_RATE = 25
MAX_DURATION_S = 15.0
CHORD_AMPLITUDE = 0.3
NOISE_DIR = "noise"
EVAL_BABBLE = "babble_eval.wav"

_MAGIC = b"FVT1"
_DTYPES = {0: np.uint8, 1: np.float32, 2: np.float64, 3: np.int64, 4: np.int16}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


# ---------------------------------------------------------------------------
# tensor container


def write_tensor(path, tensor) -> None:
    """``FVT1`` | u8 rank | rank x u32 LE dims | u8 dtype tag | row-major payload."""
    arr = np.asarray(tensor)
    if arr.ndim > 4:
        raise ValueError("FVT1 stores tensors of rank <= 4")
    tag = _TAGS.get(np.dtype(arr.dtype.name))
    if tag is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = _MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", tag)
    payload = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[tag]).newbyteorder("<")).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(raw) < 5:
        raise ValueError(f"{path}: truncated header")
    rank = raw[4]
    end = 5 + 4 * rank + 1
    if len(raw) < end:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[5 : 5 + 4 * rank])
    tag = raw[end - 1]
    if tag not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dtype = np.dtype(_DTYPES[tag]).newbyteorder("<")
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - end != expected:
        raise ValueError(f"{path}: payload is {len(raw) - end} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=end).reshape(dims).astype(_DTYPES[tag])


# ---------------------------------------------------------------------------
# corpus description


@dataclass(frozen=True)
class CorpusSpec:
    num_utterances: dict = field(
        default_factory=lambda: {"pretrain": 400, "train": 400, "dev": 48, "test": 120}
    )
    min_symbols: int = 4
    max_symbols: int = 8
    vocab_size: int = 16
    seed: int = 0
    video_height: int = 32
    video_width: int = 32
    symbol_ms: int = 100
    babble_k: int = 30
    babble_seconds: float = 4.0
    # successor probabilities of the bigram grammar; the remainder is uniform
    grammar: tuple = (0.6, 0.3)

    def validate(self):
        if self.vocab_size > len(DESK_SYMBOLS):
            raise ValueError(f"vocab_size is capped at {len(DESK_SYMBOLS)}")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ValueError("need 1 <= min_symbols <= max_symbols")
        if self.max_symbols * self.symbol_ms / 1000 > MAX_DURATION_S:
            raise ValueError(f"utterances would exceed {MAX_DURATION_S} s")
        if any(p < 0 for p in self.grammar) or sum(self.grammar) > 1 or len(self.grammar) >= self.vocab_size:
            raise ValueError("grammar needs fewer than vocab_size non-negative weights summing to <= 1")
        unknown = set(self.num_utterances) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}")
        return self

    @property
    def symbols(self) -> tuple:
        return DESK_SYMBOLS[: self.vocab_size]


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    audio_path: str
    video_path: str
    transcript: str
    duration_s: float
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def chord_frequencies(symbol: int) -> tuple[float, float]:
    """Two tones per symbol, 100 Hz apart across symbols and 1.6 kHz apart within."""
    return 300.0 + 100.0 * symbol, 1900.0 + 100.0 * symbol


def symbol_waveform(symbol: int, symbol_ms: int = 100) -> np.ndarray:
    n = np.arange(SAMPLE_RATE * symbol_ms // 1000) / SAMPLE_RATE
    lo, hi = chord_frequencies(symbol)
    half = CHORD_AMPLITUDE / 2
    return half * np.sin(2 * np.pi * lo * n) + half * np.sin(2 * np.pi * hi * n)


def mouth_shape(symbol: int, height: int, width: int) -> tuple[float, float]:
    """Semi-axes ``(horizontal, vertical)`` in pixels; unique per symbol."""
    w_level, a_level = divmod(symbol, 4)
    return width * (0.15 + 0.07 * w_level), height * (0.05 + 0.06 * a_level)


def render_frame(symbol: int, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2, (width - 1) / 2
    rx, ry = mouth_shape(symbol, height, width)
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[:] = (200, 150, 120)
    frame[inside] = (80, 20, 30)
    return frame


def num_video_frames(duration_s: float) -> int:
    return int(np.floor(duration_s * VIDEO_RATE + 0.5))


def frame_symbols(symbols, symbol_ms: int = 100) -> np.ndarray:
    """Symbol shown in each video frame: the one active at the frame's center time."""
    n_frames = num_video_frames(len(symbols) * symbol_ms / 1000)
    centers_ms = 40 * np.arange(n_frames) + 20
    idx = np.minimum(centers_ms // symbol_ms, len(symbols) - 1)
    return np.asarray(symbols)[idx]


def synthesize(symbols, spec: CorpusSpec):
    """Waveform (float64) and u8 video for a symbol-id sequence."""
    wave = np.concatenate([symbol_waveform(s, spec.symbol_ms) for s in symbols])
    frames = {s: render_frame(s, spec.video_height, spec.video_width) for s in set(symbols)}
    video = np.stack([frames[s] for s in frame_symbols(symbols, spec.symbol_ms)])
    return wave, video


def transition_matrix(spec: CorpusSpec) -> np.ndarray:
    """Row-stochastic bigram matrix: each symbol has a few favored successors.

    Favored successor ``j`` of symbol ``s`` is ``perm[(s + j) % V]`` for one
    seeded permutation, so the matrix is doubly stochastic and the symbol
    marginal stays uniform at every position. Leftover mass is spread
    uniformly so every sequence remains possible.
    """
    V = spec.vocab_size
    perm = np.random.default_rng([spec.seed, len(SPLITS)]).permutation(V)
    P = np.full((V, V), (1.0 - sum(spec.grammar)) / V)
    for s in range(V):
        for j, w in enumerate(spec.grammar):
            P[s, perm[(s + j) % V]] += w
    return P


def sample_symbols(n: int, P: np.ndarray, rng) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(P.shape[0])
    for i in range(1, n):
        out[i] = rng.choice(P.shape[0], p=P[out[i - 1]])
    return out


def _utterance_rng(spec: CorpusSpec, split: str, index: int):
    return np.random.default_rng([spec.seed, SPLITS.index(split), index])


def generate_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write every split plus the noise library under ``out_dir``.

    Returns ``{split: [ManifestRecord, ...]}``. Output bytes depend only on
    ``spec``.
    """
    spec.validate()
    out_dir = Path(out_dir)
    manifests = {}
    waves_by_split = {}
    P = transition_matrix(spec)
    for split in SPLITS:
        records, waves = [], []
        for i in range(spec.num_utterances.get(split, 0)):
            rng = _utterance_rng(spec, split, i)
            n = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
            symbols = sample_symbols(n, P, rng)
            wave, video = synthesize(symbols, spec)
            uid = f"{split}-{i:05d}"
            audio_rel = f"{split}/audio/{uid}.wav"
            video_rel = f"{split}/video/{uid}.fvt"
            dsp.write_wav(out_dir / audio_rel, wave)
            write_tensor(out_dir / video_rel, video)
            records.append(ManifestRecord(
                uid, audio_rel, video_rel, " ".join(spec.symbols[s] for s in symbols),
                round(wave.size / SAMPLE_RATE, 6), split,
            ))
            waves.append(wave)
        write_manifest(out_dir / split / "manifest.txt", records)
        manifests[split] = records
        waves_by_split[split] = waves
    write_noise_library(spec, out_dir, waves_by_split)
    (out_dir / "corpus.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1) + "\n")
    return manifests


def _peak_normalize(x, peak=0.99):
    return x * (peak / np.max(np.abs(x)))


def write_noise_library(spec: CorpusSpec, out_dir, waves_by_split) -> None:
    """Frozen evaluation babble from the train split and training noises from pretrain."""
    noise_dir = Path(out_dir) / NOISE_DIR
    length = int(spec.babble_seconds * SAMPLE_RATE)
    rng = np.random.default_rng([spec.seed, 100])
    train = waves_by_split.get("train", [])
    if len(train) >= spec.babble_k:
        babble = dsp.make_babble(train, spec.babble_k, rng, length=length)
        dsp.write_wav(noise_dir / EVAL_BABBLE, _peak_normalize(babble))
    pool = waves_by_split.get("pretrain", [])
    rng = np.random.default_rng([spec.seed, 101])
    if len(pool) >= spec.babble_k:
        for j in range(4):
            babble = dsp.make_babble(pool, spec.babble_k, rng, length=length)
            dsp.write_wav(noise_dir / f"train_babble_{j}.wav", _peak_normalize(babble))
    dsp.write_wav(noise_dir / "train_white.wav", _peak_normalize(rng.standard_normal(length)))
    dsp.write_wav(noise_dir / "train_music.wav", _peak_normalize(_music(rng, length)))


def _music(rng, length: int) -> np.ndarray:
    """Stand-in for background music: a random sequence of harmonic notes."""
    note = SAMPLE_RATE // 4
    t = np.arange(note) / SAMPLE_RATE
    out = []
    for _ in range(-(-length // note)):
        f0 = 110.0 * 2 ** (rng.integers(0, 36) / 12)
        tone = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 5))
        out.append(tone * np.hanning(note))
    return np.concatenate(out)[:length]


def write_manifest(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    return [
        ManifestRecord(**json.loads(line))
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]


def pixels_to_unit(video) -> np.ndarray:
    """u8 pixels to [-1, 1] as ``x / 127.5 - 1``."""
    return np.asarray(video, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def load_example(rec: ManifestRecord, root="."):
    """``(waveform, video in [-1, 1], transcript)`` for one record."""
    root = Path(root)
    try:
        wave = dsp.read_wav(root / rec.audio_path)
        video = read_tensor(root / rec.video_path)
    except (OSError, ValueError, EOFError) as exc:
        raise ValueError(f"record {rec.id}: {exc}") from exc
    if video.dtype != np.uint8 or video.ndim != 4:
        raise ValueError(f"record {rec.id}: video must be a rank-4 u8 tensor")
    return wave, pixels_to_unit(video), rec.transcript


class Corpus:
    """Manifests of a generated corpus with in-memory caching of decoded examples."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "corpus.json").exists():
            raise FileNotFoundError(f"{self.root} is not a generated corpus")
        fields_ = json.loads((self.root / "corpus.json").read_text())
        if "grammar" in fields_:
            fields_["grammar"] = tuple(fields_["grammar"])
        self.spec = CorpusSpec(**fields_)
        self.manifests = {
            s: read_manifest(self.root / s / "manifest.txt")
            for s in SPLITS
            if (self.root / s / "manifest.txt").exists()
        }
        self._cache = {}

    def records(self, split: str) -> list[ManifestRecord]:
        return self.manifests.get(split, [])

    def load(self, rec: ManifestRecord):
        if rec.id not in self._cache:
            self._cache[rec.id] = load_example(rec, self.root)
        return self._cache[rec.id]

    def noise(self, name: str) -> np.ndarray:
        return dsp.read_wav(self.root / NOISE_DIR / name)

    def training_noises(self) -> dict:
        return {
            p.stem: dsp.read_wav(p) for p in sorted((self.root / NOISE_DIR).glob("train_*.wav"))
        }

    def eval_babble(self) -> np.ndarray:
        return self.noise(EVAL_BABBLE)
