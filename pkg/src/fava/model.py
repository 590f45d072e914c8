"""Audio and video front-ends, additive early fusion and the Conformer encoder."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import NUM_MELS, check_random_state
from .rnnt import Joiner, Predictor

ROOTS = ("audio_frontend", "video_frontend", "encoder", "mlm_head", "predictor", "joiner")
AUDIO_ASR = frozenset({"audio_frontend", "encoder", "predictor", "joiner"})
AV_ASR = AUDIO_ASR | {"video_frontend"}
DECODER = frozenset({"predictor", "joiner"})
HEAD_GAIN = 0.1
# front-end convs feed a ReLU; this bound keeps activation variance from
# shrinking layer by layer (the video stack has ten of them)
RELU_CONV_GAIN = math.sqrt(6.0)


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    conv_kernel: int = 7
    max_rel_pos: int = 16
    audio_channels: tuple = (16, 8)
    video_channels: tuple = (8, 16, 32, 64, 64)
    video_height: int = 32
    video_width: int = 32
    codebook_size: int = 256
    vocab_size: int = 17
    pred_hidden: int = 64
    pred_embed: int = 16
    joiner_hidden: int = 64
    num_mels: int = NUM_MELS

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = cls(
            preset="paper", d_model=512, num_layers=17, num_heads=8, ffn_dim=2048,
            conv_kernel=31, max_rel_pos=64, audio_channels=(128, 32),
            video_channels=(32, 64, 128, 256, 512), video_height=128, video_width=128,
            codebook_size=8192, vocab_size=4096, pred_hidden=1280, pred_embed=128,
            joiner_hidden=640,
        )
        return replace(base, **overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset == "paper":
            return cls.paper(**overrides)
        if preset == "desk":
            return cls.desk(**overrides)
        raise ValueError(f"unknown preset {preset!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("audio_channels", "video_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class ModalityDecision(str, enum.Enum):
    BOTH = "both"
    AUDIO_ONLY = "audio_only"  # video features zeroed
    VIDEO_ONLY = "video_only"  # audio features zeroed

    @property
    def keep_audio(self) -> bool:
        return self is not ModalityDecision.VIDEO_ONLY

    @property
    def keep_video(self) -> bool:
        return self is not ModalityDecision.AUDIO_ONLY


def sample_modality_dropout(rng) -> ModalityDecision:
    """Both kept with probability 0.5; either modality zeroed with probability 0.25."""
    u = check_random_state(rng).random()
    if u < 0.5:
        return ModalityDecision.BOTH
    if u < 0.75:
        return ModalityDecision.AUDIO_ONLY
    return ModalityDecision.VIDEO_ONLY


# ---------------------------------------------------------------------------
# front-ends


def frontend_length(num_frames):
    """Output length of two stride-2 same-padded convolutions: ceil(T / 4)."""
    return (num_frames + 3) // 4


class AudioFrontend(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.audio_channels
        self.conv1 = nn.Conv2d(1, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        freq = math.ceil(math.ceil(cfg.num_mels / 2) / 2)
        self.proj = nn.Linear(c2 * freq, cfg.d_model)

    def forward(self, feats, lengths=None):
        """``(B, T, 80)`` at 100 Hz to ``(B, ceil(T/4), d_model)`` at 25 Hz.

        With ``lengths``, intermediate frames past each utterance's end are
        zeroed so batch padding cannot leak into valid outputs.
        """
        B, T, _ = feats.shape
        if T == 0:
            return feats.new_zeros(B, 0, self.proj.out_features)
        x = F.relu(self.conv1(feats[:, None]))
        if lengths is not None:
            x = _zero_past(x, (torch.as_tensor(lengths) + 1) // 2, dim=2)
        x = F.relu(self.conv2(x))  # B, C, T/4, 20
        x = x.permute(0, 2, 1, 3).flatten(2)
        return self.proj(x)


class VideoFrontend(nn.Module):
    """(2+1)D stack: five (spatial 1x3x3 stride 2, temporal 3x1x1) pairs, then spatial mean."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.height, self.width = cfg.video_height, cfg.video_width
        spatial, temporal = [], []
        c_in = 3
        for c in cfg.video_channels:
            spatial.append(nn.Conv3d(c_in, c, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)))
            temporal.append(nn.Conv3d(c, c, (3, 1, 1), padding=(1, 0, 0)))
            c_in = c
        self.spatial = nn.ModuleList(spatial)
        self.temporal = nn.ModuleList(temporal)

    def forward(self, video, lengths=None):
        """``(B, T, H, W, 3)`` in [-1, 1] to ``(B, T, channels[-1])``."""
        if tuple(video.shape[2:4]) != (self.height, self.width):
            raise ValueError(
                f"video resolution {tuple(video.shape[2:4])} does not match "
                f"({self.height}, {self.width})"
            )
        x = video.permute(0, 4, 1, 2, 3)
        for s, t in zip(self.spatial, self.temporal):
            x = F.relu(s(x))
            if lengths is not None:
                x = _zero_past(x, torch.as_tensor(lengths), dim=2)
            x = F.relu(t(x))
        return x.mean(dim=(3, 4)).transpose(1, 2)


def _zero_past(x, lengths, dim: int):
    """Zero entries of ``x`` whose index along ``dim`` is at or past ``lengths[b]``."""
    idx = torch.arange(x.shape[dim])
    keep = idx[None, :] < lengths[:, None]
    shape = [x.shape[0]] + [1] * (x.dim() - 1)
    shape[dim] = x.shape[dim]
    return torch.where(keep.reshape(shape), x, torch.zeros_like(x))


def fuse(audio_feats, video_feats, decision: ModalityDecision = ModalityDecision.BOTH):
    """Elementwise sum of single-utterance front-end outputs after the zeroing decision.

    Lengths may differ by one frame (both are truncated to the shorter); a
    larger mismatch is an error.
    """
    if video_feats is None:
        return audio_feats
    decision = ModalityDecision(decision)
    n = _aligned_length(audio_feats.shape[0], video_feats.shape[0])
    a, v = audio_feats[:n], video_feats[:n]
    if not decision.keep_audio:
        a = torch.zeros_like(a)
    if not decision.keep_video:
        v = torch.zeros_like(v)
    return a + v


def _aligned_length(n_audio: int, n_video: int) -> int:
    if abs(n_audio - n_video) > 1:
        raise ValueError(f"audio has {n_audio} frames but video has {n_video}")
    if n_audio != n_video:
        warnings.warn(
            f"truncating modality streams of {n_audio} and {n_video} frames to the shorter",
            RuntimeWarning,
            stacklevel=3,
        )
    return min(n_audio, n_video)


# ---------------------------------------------------------------------------
# Conformer


class FeedForward(nn.Module):
    def __init__(self, d, ffn):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.lin1 = nn.Linear(d, ffn)
        self.lin2 = nn.Linear(ffn, d)

    def forward(self, x):
        return self.lin2(F.silu(self.lin1(self.norm(x))))


class SelfAttention(nn.Module):
    """Multi-head self-attention with a learned, clipped relative-position bias per head."""

    def __init__(self, d, heads, max_rel):
        super().__init__()
        self.heads, self.max_rel = heads, max_rel
        self.norm = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_rel + 1))

    def forward(self, x, valid):
        B, T, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm(x)).view(B, T, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        pos = torch.arange(T)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_rel, self.max_rel) + self.max_rel
        scores = scores + self.rel_bias[:, rel][None]
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, T, d))


class ConvModule(nn.Module):
    def __init__(self, d, kernel):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.pointwise1 = nn.Linear(d, 2 * d)
        self.depthwise = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.conv_norm = nn.LayerNorm(d)
        self.pointwise2 = nn.Linear(d, d)

    def forward(self, x, valid):
        y = F.glu(self.pointwise1(self.norm(x)), dim=-1)
        y = torch.where(valid[..., None], y, torch.zeros_like(y))
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        return self.pointwise2(F.silu(self.conv_norm(y)))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ff1 = FeedForward(d, cfg.ffn_dim)
        self.attn = SelfAttention(d, cfg.num_heads, cfg.max_rel_pos)
        self.conv = ConvModule(d, cfg.conv_kernel)
        self.ff2 = FeedForward(d, cfg.ffn_dim)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, valid):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x, valid)
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_layers))

    def forward(self, x, lengths=None):
        """Positions at or past ``lengths`` never influence valid outputs."""
        B, T, _ = x.shape
        if lengths is None:
            lengths = torch.full((B,), T)
        valid = torch.arange(T)[None, :] < torch.as_tensor(lengths)[:, None]
        for block in self.blocks:
            x = block(x, valid)
        return x


# ---------------------------------------------------------------------------
# full model


def _root_seed(seed: int, root: str) -> int:
    return int(np.random.SeedSequence([int(seed), ROOTS.index(root)]).generate_state(1)[0])


def _init_module(module: nn.Module, generator: torch.Generator, gain: float = 1.0):
    """Fan-in scaled uniform weights, zero biases, unit/zero layer norms.

    2-D and 3-D convolutions exist only in the ReLU front-ends and get
    ``RELU_CONV_GAIN`` on top of ``gain``.
    """
    for sub in module.modules():
        if isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
        elif isinstance(sub, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            fan_in = sub.weight[0].numel()
            bound = gain / math.sqrt(fan_in)
            if isinstance(sub, (nn.Conv2d, nn.Conv3d)):
                bound *= RELU_CONV_GAIN
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, nn.Embedding):
            with torch.no_grad():
                sub.weight.uniform_(-1.0, 1.0, generator=generator)
        elif isinstance(sub, Predictor):
            with torch.no_grad():
                for w_ih, w_hh, b in zip(sub.w_ih, sub.w_hh, sub.bias):
                    bound = 1.0 / math.sqrt(w_ih.shape[1] + w_hh.shape[1])
                    w_ih.uniform_(-bound, bound, generator=generator)
                    w_hh.uniform_(-bound, bound, generator=generator)
                    b.zero_()
        elif isinstance(sub, SelfAttention):
            with torch.no_grad():
                sub.rel_bias.zero_()


class MLMHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d_model, cfg.codebook_size)

    def forward(self, x):
        return self.proj(x)


class FavaModel(nn.Module):
    """Parameter tree made of any subset of the six roots.

    Audio-only models have no ``video_frontend`` and skip fusion. A
    ``ModalityDecision`` per utterance zeroes front-end outputs, never raw
    inputs.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), components=AV_ASR, seed: int | None = 0):
        super().__init__()
        components = frozenset(components)
        unknown = components - set(ROOTS)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        self.cfg = cfg
        self.components = components
        builders = {
            "audio_frontend": lambda: AudioFrontend(cfg),
            "video_frontend": lambda: VideoFrontend(cfg),
            "encoder": lambda: Encoder(cfg),
            "mlm_head": lambda: MLMHead(cfg),
            "predictor": lambda: Predictor(cfg.vocab_size, cfg.pred_embed, cfg.pred_hidden),
            "joiner": lambda: Joiner(cfg.d_model, cfg.pred_hidden, cfg.joiner_hidden, cfg.vocab_size),
        }
        for root in ROOTS:
            if root in components:
                self.add_module(root, builders[root]())
        if seed is not None:
            self.reset_roots(components, seed)

    def reset_roots(self, roots, seed: int):
        """Re-draw the given roots; each root has its own stream so subsets match full trees."""
        for root in roots:
            module = getattr(self, root)
            gen = torch.Generator().manual_seed(_root_seed(seed, root))
            _init_module(module, gen, gain=HEAD_GAIN if root == "mlm_head" else 1.0)
            if root == "joiner":
                _init_module(module.out, gen, gain=HEAD_GAIN)
        return self

    @property
    def is_av(self) -> bool:
        return "video_frontend" in self.components

    def tree(self) -> dict:
        """Name-to-tensor mapping (the checkpointed state)."""
        return {k: v for k, v in self.state_dict().items()}

    def encode(self, feats, feat_lengths, video=None, video_lengths=None, decisions=None):
        """Front-ends, fusion and encoder for a padded batch.

        Returns ``(encoded (B, T', d), lengths (B,))``.
        """
        feats = torch.as_tensor(feats)
        feat_lengths = torch.as_tensor(feat_lengths)
        audio = self.audio_frontend(feats, feat_lengths)
        lengths = frontend_length(feat_lengths)
        if self.is_av:
            if video is None:
                raise ValueError("AV model needs video input")
            video = torch.as_tensor(video, dtype=audio.dtype)
            vlen = torch.as_tensor(video_lengths) if video_lengths is not None else torch.full(
                (video.shape[0],), video.shape[1])
            vfeat = self.video_frontend(video, vlen)
            lengths = torch.tensor(
                [_aligned_length(int(a), int(v)) for a, v in zip(lengths, vlen)], dtype=torch.long
            )
            T = int(lengths.max()) if len(lengths) else 0
            audio, vfeat = _pad_time(audio, T), _pad_time(vfeat, T)
            if decisions is not None:
                decisions = [ModalityDecision(d) for d in decisions]
                keep_a = torch.tensor([d.keep_audio for d in decisions])[:, None, None]
                keep_v = torch.tensor([d.keep_video for d in decisions])[:, None, None]
                audio = torch.where(keep_a, audio, torch.zeros_like(audio))
                vfeat = torch.where(keep_v, vfeat, torch.zeros_like(vfeat))
            fused = audio + vfeat
        else:
            fused = audio
        return self.encoder(fused, lengths), lengths

    def mlm_logits(self, encoded):
        return self.mlm_head(encoded)

    def lattice(self, encoded, labels):
        pred, _ = self.predictor(labels)
        return self.joiner.lattice(encoded, pred)


def _pad_time(x, T):
    if x.shape[1] >= T:
        return x[:, :T]
    return F.pad(x, (0, 0, 0, T - x.shape[1]))


def init_params(cfg: ModelConfig, components, seed: int) -> dict:
    """Freshly initialized parameter tree restricted to ``components``."""
    return FavaModel(cfg, components, seed).tree()


def parameter_table(model: nn.Module):
    """``(name, shape, count)`` for every parameter tensor."""
    return [(name, tuple(p.shape), p.numel()) for name, p in model.named_parameters()]


def count_parameters(cfg: ModelConfig, components) -> int:
    """Parameter count without allocating storage."""
    with torch.device("meta"):
        model = FavaModel(cfg, components, seed=None)
    return sum(p.numel() for p in model.parameters())
