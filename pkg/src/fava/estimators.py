"""scikit-learn style wrappers around the feature, quantizer and training APIs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import bestrq, dsp
from ._validation import check_waveform
from .data import Corpus
from .evaluation import evaluate, transcribe
from .pipeline import FeatureNormalizer
from .rnnt import Vocabulary
from .trainer import TrainConfig, load_model, run_finetune, run_pretrain


def _as_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 1:
        return [X]
    return list(X)


class LogMelExtractor(BaseEstimator, TransformerMixin):
    """Waveforms to (optionally normalized) log-mel matrices.

    ``fit`` estimates per-dimension mean and standard deviation; with
    ``normalize=False`` it only validates the input.
    """

    def __init__(self, window_ms=25.0, stride_ms=10.0, num_mels=80, normalize=True):
        self.window_ms = window_ms
        self.stride_ms = stride_ms
        self.num_mels = num_mels
        self.normalize = normalize

    def _mel(self):
        return dsp.MelConfig(window_ms=self.window_ms, stride_ms=self.stride_ms,
                             num_mels=self.num_mels).validate()

    def fit(self, X, y=None):
        waves = [check_waveform(w) for w in _as_list(X)]
        if not waves:
            raise ValueError("no waveforms to fit")
        mel = self._mel()
        if self.normalize:
            self.normalizer_ = FeatureNormalizer.fit(waves, mel)
        else:
            self.normalizer_ = FeatureNormalizer(np.zeros(self.num_mels), np.ones(self.num_mels), mel)
        return self

    def transform(self, X):
        check_is_fitted(self, "normalizer_")
        out = [self.normalizer_.raw(check_waveform(w)) for w in _as_list(X)]
        if self.normalize:
            out = [self.normalizer_.normalize(f) for f in out]
        return out


class RandomProjectionQuantizer(BaseEstimator, TransformerMixin):
    """Frozen random projection and codebook; ``transform`` gives one label per stacked frame.

    Nothing is learned except the standardization statistics of the stacked
    input, which ``fit`` estimates from raw log-mel matrices.
    """

    def __init__(self, seed=1234, code_dim=16, codebook_size=8192, stack=bestrq.STACK):
        self.seed = seed
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        self.stack = stack

    def fit(self, X, y=None):
        stacked = [bestrq.stack_frames(np.asarray(f), self.stack) for f in _as_list(X)]
        stacked = np.concatenate([s for s in stacked if len(s)])
        q = bestrq.init_quantizer(self.seed, stacked.shape[1], self.code_dim, self.codebook_size)
        self.quantizer_ = q.with_stats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-5))
        return self

    def transform(self, X):
        check_is_fitted(self, "quantizer_")
        return [bestrq.quantize(self.quantizer_, bestrq.stack_frames(np.asarray(f), self.stack))
                for f in _as_list(X)]


class AVSpeechRecognizer(BaseEstimator):
    """Two-stage recognizer trained on a generated corpus directory.

    ``fit(corpus_dir)`` runs masked pre-training for ``pretrain_steps`` (skipped
    when zero) and then fine-tunes in ``mode``. ``predict`` decodes manifest
    records of that corpus and ``score`` returns ``1 - WER``.
    """

    def __init__(self, mode="finetune_av", preset="desk", pretrain_steps=1000, finetune_steps=1000,
                 batch_size=16, seed=0, work_dir="fava_runs", init=None):
        self.mode = mode
        self.preset = preset
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.seed = seed
        self.work_dir = work_dir
        self.init = init

    def fit(self, X, y=None):
        corpus = X if isinstance(X, Corpus) else Corpus(X)
        work = Path(self.work_dir)
        init = self.init
        if self.pretrain_steps and init is None and self.mode in ("finetune_av", "finetune_audio"):
            pt = TrainConfig(mode="pretrain_audio", preset=self.preset, steps=self.pretrain_steps,
                             batch_size=self.batch_size, seed=self.seed)
            init = run_pretrain(pt, corpus, work / "pretrain").final_checkpoint
        ft = TrainConfig(mode=self.mode, preset=self.preset, steps=self.finetune_steps,
                         batch_size=self.batch_size, seed=self.seed)
        result = run_finetune(ft, corpus, work / self.mode, init=init)
        self.checkpoint_ = result.best_checkpoint or result.final_checkpoint
        self.model_, self.normalizer_, _, _, _ = load_model(self.checkpoint_)
        self.corpus_ = corpus
        self.vocab_ = Vocabulary(corpus.spec.symbols)
        return self

    def _records(self, X):
        return self.corpus_.records(X) if isinstance(X, str) else list(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        hyps = []
        for rec in self._records(X):
            wave, video, _ = self.corpus_.load(rec)
            ids = transcribe(self.model_, self.normalizer_(wave), video)
            hyps.append(self.vocab_.decode(ids))
        return hyps

    def score(self, X, y=None, condition="clean"):
        check_is_fitted(self, "model_")
        report = evaluate(self.model_, self.corpus_, self._records(X), condition,
                          self.normalizer_, vocab=self.vocab_)
        return 1.0 - report.wer
