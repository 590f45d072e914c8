"""Training orchestration for masked pre-training, transducer fine-tuning and transfer.

Randomness is keyed by ``(seed, stream, step)`` so a resumed run draws the
same masks, noise and batches as an uninterrupted one; the step counter is
the only cursor a checkpoint has to carry.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import bestrq, dsp
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    namespace,
    prefixed,
    read_meta,
    save_checkpoint,
)
from .data import Corpus
from .evaluation import evaluate, select_checkpoint
from .model import (
    AUDIO_ASR,
    AV_ASR,
    DECODER,
    FavaModel,
    ModalityDecision,
    ModelConfig,
    sample_modality_dropout,
)
from .pipeline import (
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_MASK,
    STREAM_NOISE,
    STREAM_SPECAUG,
    FeatureNormalizer,
    bucketed_batches,
    pad_labels,
    pad_stack,
    substream,
)
from .rnnt import Vocabulary, transducer_loss

logger = logging.getLogger(__name__)

PRETRAIN_MODES = ("pretrain_audio", "pretrain_av")
FINETUNE_MODES = ("finetune_av", "finetune_audio", "tfs_audio", "tfs_av", "adapt_audio_to_av")
MODES = PRETRAIN_MODES + FINETUNE_MODES
MODE_COMPONENTS = {
    "pretrain_audio": frozenset({"audio_frontend", "encoder", "mlm_head"}),
    "pretrain_av": frozenset({"audio_frontend", "video_frontend", "encoder", "mlm_head"}),
    "finetune_audio": AUDIO_ASR,
    "tfs_audio": AUDIO_ASR,
    "finetune_av": AV_ASR,
    "tfs_av": AV_ASR,
    "adapt_audio_to_av": AV_ASR,
}
QUANTIZER_SEED = 1234
METRICS = "metrics.jsonl"


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "pretrain_audio"
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    batch_size: int = 16
    steps: int = 1000
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 1.0
    seed: int = 0
    quantizer_seed: int = QUANTIZER_SEED
    mask_prob: float = bestrq.MASK_PROB
    mask_span: int = bestrq.MASK_SPAN
    spec_augment: bool = True
    noise: bool = True
    snr_low: float = -5.0
    snr_high: float = 20.0
    clean_prob: float = 0.2
    modality_dropout: bool = True
    eval_interval: int = 200
    checkpoint_interval: int = 0
    log_interval: int = 10
    eval_seed: int = 0
    dev_limit: int = 0
    max_symbols_per_frame: int = 10

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        comps = self.components
        if self.is_pretrain and ("mlm_head" not in comps or comps & DECODER):
            raise ValueError("pre-training modes need an MLM head and no decoder")
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 1:
            raise ValueError("batch_size >= 1, steps >= 0 and warmup_steps >= 1 are required")
        return self

    @property
    def is_pretrain(self) -> bool:
        return self.mode in PRETRAIN_MODES

    @property
    def components(self) -> frozenset:
        return MODE_COMPONENTS[self.mode]

    @property
    def is_av(self) -> bool:
        return "video_frontend" in self.components

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_preset(self.preset, **self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def learning_rate(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` then inverse square-root decay."""
    if step <= 0:
        return 0.0
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def optimizer_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig,
                   lr: float | None = None) -> OptimizerState:
    """One Adam update in place. Non-finite gradients raise before anything changes."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise DivergenceError(f"divergence: non-finite gradient in {name}")
    state.step += 1
    t = state.step
    if lr is None:
        lr = learning_rate(t, cfg.peak_lr, cfg.warmup_steps)
    b1, b2 = cfg.beta1, cfg.beta2
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / (1 - b1**t)) / ((v / (1 - b2**t)).sqrt() + cfg.eps)
            p.sub_(lr * update)
    return state


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (float(norm) + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return float(norm)


# ---------------------------------------------------------------------------
# checkpoints with model state


def shared_state(corpus: Corpus, cfg: TrainConfig):
    """Normalizer fitted on the clean pre-training split and the seeded quantizer."""
    split = "pretrain" if corpus.records("pretrain") else "train"
    waves = [corpus.load(r)[0] for r in corpus.records(split)]
    normalizer = FeatureNormalizer.fit(waves)
    mcfg = cfg.model_config()
    q = bestrq.init_quantizer(cfg.quantizer_seed, 4 * mcfg.num_mels, 16, mcfg.codebook_size)
    return normalizer, q.with_stats(*normalizer.stacked_stats())


def quantizer_tensors(q: bestrq.RandomQuantizer) -> dict:
    out = {"quantizer/projection": q.projection, "quantizer/codebook": q.codebook}
    if q.mean is not None:
        out.update({"quantizer/mean": q.mean, "quantizer/std": q.std})
    return out


def quantizer_from_tensors(tensors: dict, seed: int) -> bestrq.RandomQuantizer:
    q = bestrq.RandomQuantizer(tensors["quantizer/projection"], tensors["quantizer/codebook"], seed)
    if "quantizer/mean" in tensors:
        q = q.with_stats(tensors["quantizer/mean"], tensors["quantizer/std"])
    return q


def save_training_checkpoint(path, model: FavaModel, opt: OptimizerState | None, cfg: TrainConfig,
                             normalizer: FeatureNormalizer, quantizer, extra: dict | None = None,
                             step: int | None = None):
    """``step`` is the data cursor; it runs ahead of ``opt.step`` by the skipped batches."""
    tensors = prefixed(model.tree(), "params")
    if opt is not None:
        tensors.update(prefixed(opt.m, "opt/m"))
        tensors.update(prefixed(opt.v, "opt/v"))
    tensors.update(normalizer.tensors())
    if quantizer is not None:
        tensors.update(quantizer_tensors(quantizer))
    meta = {
        "step": step if step is not None else (opt.step if opt is not None else 0),
        "opt_step": opt.step if opt is not None else 0,
        "mode": cfg.mode,
        "preset": model.cfg.preset,
        "model_config": model.cfg.to_dict(),
        "components": sorted(model.components),
        "quantizer_seed": quantizer.seed if quantizer is not None else None,
        "train_config": cfg.to_dict(),
    }
    meta.update(extra or {})
    return save_checkpoint(path, tensors, meta)


def load_model(path):
    """``(model, normalizer, quantizer, optimizer_state, meta)`` from a checkpoint directory."""
    tensors, meta = load_checkpoint(path)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    model = FavaModel(mcfg, meta["components"], seed=None)
    params = namespace(tensors, "params")
    missing = set(model.state_dict()) ^ set(params)
    if missing:
        raise CheckpointError(f"checkpoint/model tensor mismatch: {sorted(missing)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    opt = None
    if any(k.startswith("opt/m/") for k in tensors):
        opt = OptimizerState(
            meta.get("opt_step", meta["step"]),
            {k: torch.from_numpy(np.array(v)) for k, v in namespace(tensors, "opt/m").items()},
            {k: torch.from_numpy(np.array(v)) for k, v in namespace(tensors, "opt/v").items()},
        )
    normalizer = FeatureNormalizer.from_tensors(tensors) if "features/mean" in tensors else None
    quantizer = (
        quantizer_from_tensors(tensors, meta.get("quantizer_seed"))
        if "quantizer/projection" in tensors else None
    )
    return model, normalizer, quantizer, opt, meta


def _copy_roots(model: FavaModel, source: dict, roots) -> list:
    """Copy ``roots`` from a flat source tree; returns the tensor names copied."""
    target = model.state_dict()
    bad, copied = [], []
    for name, value in source.items():
        if name.split(".", 1)[0] not in roots:
            continue
        if name not in target or tuple(target[name].shape) != tuple(np.shape(value)):
            bad.append(name)
    if bad:
        raise ValueError(f"shape mismatch for tensors: {', '.join(sorted(bad))}")
    with torch.no_grad():
        for name, value in source.items():
            if name.split(".", 1)[0] in roots:
                target[name].copy_(torch.as_tensor(np.array(value)))
                copied.append(name)
    return copied


def _check_compatible(src_cfg: dict, cfg: ModelConfig):
    if src_cfg["d_model"] != cfg.d_model:
        raise ValueError(f"incompatible d_model: checkpoint {src_cfg['d_model']}, target {cfg.d_model}")


def init_stage2_from_stage1(stage1, cfg: ModelConfig, seed: int, components=AV_ASR) -> FavaModel:
    """Stage-2 model: audio front-end and encoder copied, everything else fresh.

    A stage-1 video front-end (AV pre-training) is carried over as well when
    the target has one; ``mlm_head`` is always dropped.
    """
    tensors, meta = load_checkpoint(stage1) if not isinstance(stage1, tuple) else stage1
    _check_compatible(meta["model_config"], cfg)
    model = FavaModel(cfg, components, seed)
    params = namespace(tensors, "params")
    roots = {"audio_frontend", "encoder"}
    if "video_frontend" in meta["components"] and "video_frontend" in model.components:
        roots.add("video_frontend")
    _copy_roots(model, params, roots)
    return model


def adapt_audio_to_av(audio_ckpt, cfg: ModelConfig, seed: int) -> FavaModel:
    """AV model from an audio-only checkpoint with a fresh video front-end.

    The audio front-end and encoder are always reused; the decoder is reused
    when its shapes match and re-initialized otherwise.
    """
    tensors, meta = load_checkpoint(audio_ckpt) if not isinstance(audio_ckpt, tuple) else audio_ckpt
    _check_compatible(meta["model_config"], cfg)
    src = set(meta["components"])
    if not {"audio_frontend", "encoder"} <= src:
        raise ValueError("source checkpoint lacks audio_frontend/encoder")
    model = FavaModel(cfg, AV_ASR, seed)
    params = namespace(tensors, "params")
    _copy_roots(model, params, {"audio_frontend", "encoder"})
    if DECODER <= src:
        try:
            _copy_roots(model, params, DECODER)
        except ValueError as exc:
            logger.warning("decoder not reused: %s", exc)
            model.reset_roots(DECODER, seed)
    return model


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path | None
    metrics: list
    skipped_steps: int = 0


class MetricsLog:
    """Append-only JSONL log.

    On resume the records up to ``keep_until`` are carried over from
    ``source`` (the log next to the resumed checkpoint), so a run resumed
    into a fresh directory still holds the whole history.
    """

    def __init__(self, path, keep_until: int | None = None, source=None):
        self.path = Path(path)
        self.records = []
        source = Path(source) if source is not None else self.path
        if keep_until is not None and source.exists():
            self.records = [
                rec for rec in map(json.loads, filter(str.strip, source.read_text().splitlines()))
                if rec["step"] <= keep_until
            ]
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))
        self._t0 = time.perf_counter()

    def write(self, **record):
        record["wall_ms"] = int(1000 * (time.perf_counter() - self._t0))
        self.records.append(record)
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _resumed_log(out_dir, start: int, resume) -> MetricsLog:
    if resume is None:
        return MetricsLog(Path(out_dir) / METRICS)
    return MetricsLog(Path(out_dir) / METRICS, keep_until=start, source=Path(resume).parent / METRICS)


def checkpoint_name(step: int) -> str:
    return f"ckpt-{step:06d}"


class _Loop:
    """State shared by the pre-training and fine-tuning loops."""

    def __init__(self, cfg: TrainConfig, corpus: Corpus, out_dir, model, normalizer, quantizer,
                 opt=None, history=None):
        self.cfg, self.corpus = cfg, corpus
        self.out_dir = Path(out_dir)
        self.model, self.normalizer, self.quantizer = model, normalizer, quantizer
        self.params = dict(model.named_parameters())
        self.opt = opt or OptimizerState.zeros_like({k: p.detach() for k, p in self.params.items()})
        self.history = history or []
        self.skipped = 0
        self.records = corpus.records("pretrain" if cfg.is_pretrain else "train")
        if not self.records:
            raise ValueError("training split is empty")
        self._epoch, self._batches = None, None
        self._feat_cache, self._target_cache = {}, {}
        self.vocab = Vocabulary(corpus.spec.symbols)

    def batch_for_step(self, step: int):
        n = math.ceil(len(self.records) / self.cfg.batch_size)
        epoch, idx = divmod(step - 1, n)
        if epoch != self._epoch:
            lengths = [r.duration_s for r in self.records]
            rng = substream(self.cfg.seed, STREAM_DATA, epoch)
            self._batches = bucketed_batches(len(self.records), lengths, self.cfg.batch_size, rng)
            self._epoch = epoch
        return [self.records[i] for i in self._batches[idx]]

    def clean_features(self, rec):
        if rec.id not in self._feat_cache:
            raw = self.normalizer.raw(self.corpus.load(rec)[0])
            self._feat_cache[rec.id] = (raw, self.normalizer.normalize(raw))
        return self._feat_cache[rec.id]

    def targets(self, rec):
        if rec.id not in self._target_cache:
            raw, _ = self.clean_features(rec)
            self._target_cache[rec.id] = bestrq.quantize(self.quantizer, bestrq.stack_frames(raw))
        return self._target_cache[rec.id]

    def update(self, loss) -> float:
        self.model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}
        norm = clip_gradients(grads, self.cfg.grad_clip)
        optimizer_step(self.params, grads, self.opt, self.cfg)
        return norm

    def save(self, step: int, extra=None) -> Path:
        extra = dict(extra or {})
        extra.update(history=self.history, skipped_steps=self.skipped)
        return save_training_checkpoint(
            self.out_dir / checkpoint_name(step), self.model, self.opt, self.cfg,
            self.normalizer, self.quantizer, extra, step,
        )


def _write_config(out_dir: Path, cfg: TrainConfig, extra: dict):
    resolved = dict(cfg.to_dict(), **extra)
    (out_dir / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=1) + "\n")
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def _resume_state(resume):
    model, normalizer, quantizer, opt, meta = load_model(resume)
    if opt is None:
        raise CheckpointError(f"{resume}: no optimizer state to resume from")
    return model, normalizer, quantizer, opt, meta


def run_pretrain(cfg: TrainConfig, corpus: Corpus, out_dir, resume=None) -> TrainResult:
    """Masked prediction of quantized targets; AV mode adds modality dropout and video masking."""
    cfg.validate()
    if not cfg.is_pretrain:
        raise ValueError(f"mode {cfg.mode} is not a pre-training mode")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if resume is not None:
        model, normalizer, quantizer, opt, meta = _resume_state(resume)
        loop = _Loop(cfg, corpus, out_dir, model, normalizer, quantizer, opt)
        loop.skipped = meta.get("skipped_steps", 0)
        start = meta["step"]
    else:
        normalizer, quantizer = shared_state(corpus, cfg)
        model = FavaModel(cfg.model_config(), cfg.components, cfg.seed)
        loop = _Loop(cfg, corpus, out_dir, model, normalizer, quantizer)
        start = 0
    _write_config(out_dir, cfg, {"resume": str(resume) if resume else None})
    log = _resumed_log(out_dir, start, resume)
    ckpt_every = cfg.checkpoint_interval or cfg.eval_interval
    final = None
    model.train()
    for step in range(start + 1, cfg.steps + 1):
        loss, acc, n_targets = _pretrain_step(loop, step)
        if loss is None:
            loop.skipped += 1
            log.write(step=step, skipped=True)
        else:
            loop.update(loss)
            if step % cfg.log_interval == 0 or step == 1 or step == cfg.steps:
                log.write(step=step, loss=float(loss.detach()), masked_acc=acc, targets=n_targets)
        if step % ckpt_every == 0 or step == cfg.steps:
            final = loop.save(step)
    if final is None:
        final = loop.save(start)
    return TrainResult(out_dir, final, None, log.records, loop.skipped)


def _pretrain_step(loop: _Loop, step: int):
    cfg = loop.cfg
    recs = loop.batch_for_step(step)
    mask_rng = substream(cfg.seed, STREAM_MASK, step)
    drop_rng = substream(cfg.seed, STREAM_DROPOUT, step)
    inputs, labels, tmasks, videos, decisions = [], [], [], [], []
    for rec in recs:
        _, feats = loop.clean_features(rec)
        mask = bestrq.sample_mask(feats.shape[0], cfg.mask_prob, cfg.mask_span, mask_rng)
        inputs.append(bestrq.apply_audio_mask(feats, mask, mask_rng))
        tmask = bestrq.mask_at_target_rate(mask)
        labels.append(loop.targets(rec))
        tmasks.append(tmask)
        if cfg.is_av:
            video = loop.corpus.load(rec)[1]
            vmask = np.zeros(video.shape[0], dtype=bool)
            n = min(video.shape[0], tmask.shape[0])
            vmask[:n] = tmask[:n]
            videos.append(bestrq.apply_video_mask(video, vmask, mask_rng))
            decisions.append(
                sample_modality_dropout(drop_rng) if cfg.modality_dropout else ModalityDecision.BOTH
            )
    feats, lengths = pad_stack(inputs)
    kwargs = {}
    if cfg.is_av:
        video, vlen = pad_stack(videos)
        kwargs = dict(video=video, video_lengths=vlen, decisions=decisions)
    enc, enc_len = loop.model.encode(feats, lengths, **kwargs)
    lab, _ = pad_labels(labels)
    tm = np.zeros(lab.shape, dtype=bool)
    for i, m in enumerate(tmasks):
        tm[i, : min(len(m), int(enc_len[i]))] = m[: int(enc_len[i])]
    M = min(lab.shape[1], enc.shape[1])
    lab, tm = lab[:, :M], torch.as_tensor(tm[:, :M])
    logits = loop.model.mlm_logits(enc[:, :M])
    loss, empty = bestrq.mlm_loss(logits, lab, tm)
    if empty:
        return None, None, 0
    with torch.no_grad():
        acc = float((logits.argmax(-1) == lab)[tm].float().mean())
    return loss, acc, int(tm.sum())


def run_finetune(cfg: TrainConfig, corpus: Corpus, out_dir, init=None, resume=None,
                 model: FavaModel | None = None) -> TrainResult:
    """Supervised transducer training with noise, SpecAugment and (AV) modality dropout.

    ``init`` is the checkpoint the mode starts from (stage-1 model for
    ``finetune_*``, audio-only recognizer for ``adapt_audio_to_av``); ``tfs_*``
    modes start fresh. Dev WER under clean and 0 dB babble is measured every
    ``eval_interval`` steps and the best average picks ``best_checkpoint``.
    """
    cfg.validate()
    if cfg.is_pretrain:
        raise ValueError(f"mode {cfg.mode} is not a fine-tuning mode")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    mcfg = cfg.model_config()
    history = []
    if resume is not None:
        model, normalizer, quantizer, opt, meta = _resume_state(resume)
        history = meta.get("history", [])
        start = meta["step"]
    else:
        opt, start = None, 0
        normalizer = quantizer = None
        if init is not None:
            init_state = load_checkpoint(init)
            tensors, meta = init_state
            if "features/mean" in tensors:
                normalizer = FeatureNormalizer.from_tensors(tensors)
            if "quantizer/projection" in tensors:
                quantizer = quantizer_from_tensors(tensors, meta.get("quantizer_seed"))
        if normalizer is None or quantizer is None:
            fit_norm, fit_q = shared_state(corpus, cfg)
            normalizer = normalizer or fit_norm
            quantizer = quantizer or fit_q
        if model is None:
            init_seed = int(substream(cfg.seed, STREAM_INIT).integers(2**31))
            if cfg.mode in ("tfs_audio", "tfs_av"):
                model = FavaModel(mcfg, cfg.components, init_seed)
            elif init is None:
                raise ValueError(f"mode {cfg.mode} needs --init")
            elif cfg.mode == "adapt_audio_to_av":
                model = adapt_audio_to_av(init_state, mcfg, init_seed)
            else:
                model = init_stage2_from_stage1(init_state, mcfg, init_seed, cfg.components)
    loop = _Loop(cfg, corpus, out_dir, model, normalizer, quantizer, opt, history)
    _write_config(out_dir, cfg, {"init": str(init) if init else None,
                                 "resume": str(resume) if resume else None})
    log = _resumed_log(out_dir, start, resume)
    noises = list(corpus.training_noises().values()) if cfg.noise else []
    dev = corpus.records("dev")
    if cfg.dev_limit:
        dev = dev[: cfg.dev_limit]
    babble = corpus.eval_babble() if dev else None
    final = None
    model.train()
    for step in range(start + 1, cfg.steps + 1):
        loss = _finetune_step(loop, step, noises)
        loop.update(loss)
        if step % cfg.log_interval == 0 or step == 1 or step == cfg.steps:
            log.write(step=step, loss=float(loss.detach()))
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            if dev:
                clean = evaluate(model, corpus, dev, "clean", normalizer, cfg.eval_seed,
                                 max_symbols_per_frame=cfg.max_symbols_per_frame)
                noisy = evaluate(model, corpus, dev, "babble_0db", normalizer, cfg.eval_seed,
                                 babble=babble, max_symbols_per_frame=cfg.max_symbols_per_frame)
                loop.history.append({"step": step, "clean": clean.wer, "noisy": noisy.wer})
                log.write(step=step, dev_wer_clean=clean.wer, dev_wer_noisy=noisy.wer)
            final = loop.save(step)
        elif cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            final = loop.save(step)
    if final is None:
        final = loop.save(start)
    best = None
    if loop.history:
        best_step = select_checkpoint([(h["step"], h["clean"], h["noisy"]) for h in loop.history])
        best = out_dir / checkpoint_name(best_step)
        (out_dir / "best.json").write_text(json.dumps({"step": best_step, "path": best.name}) + "\n")
    return TrainResult(out_dir, final, best, log.records, loop.skipped)


def _finetune_step(loop: _Loop, step: int, noises):
    cfg = loop.cfg
    recs = loop.batch_for_step(step)
    noise_rng = substream(cfg.seed, STREAM_NOISE, step)
    spec_rng = substream(cfg.seed, STREAM_SPECAUG, step)
    drop_rng = substream(cfg.seed, STREAM_DROPOUT, step)
    inputs, labels, videos, decisions = [], [], [], []
    for rec in recs:
        wave, video, transcript = loop.corpus.load(rec)
        _, feats = loop.clean_features(rec)
        if noises and noise_rng.random() >= cfg.clean_prob:
            noise = noises[int(noise_rng.integers(len(noises)))]
            snr = cfg.snr_low if cfg.snr_low == cfg.snr_high else noise_rng.uniform(cfg.snr_low, cfg.snr_high)
            feats = loop.normalizer(dsp.mix_at_snr(wave, noise, snr, noise_rng))
        if cfg.spec_augment:
            feats = dsp.spec_augment(feats, dsp.SpecAugmentConfig(), spec_rng)
        inputs.append(feats)
        labels.append(loop.vocab.encode(transcript))
        if cfg.is_av:
            videos.append(video)
            decisions.append(
                sample_modality_dropout(drop_rng) if cfg.modality_dropout else ModalityDecision.BOTH
            )
    feats, lengths = pad_stack(inputs)
    kwargs = {}
    if cfg.is_av:
        video, vlen = pad_stack(videos)
        kwargs = dict(video=video, video_lengths=vlen, decisions=decisions)
    enc, enc_len = loop.model.encode(feats, lengths, **kwargs)
    lab, lab_len = pad_labels(labels)
    lattice = loop.model.lattice(enc, lab)
    return transducer_loss(lattice, lab, enc_len, lab_len)
