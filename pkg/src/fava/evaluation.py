"""Word error rate, clean/babble evaluation and dev-set checkpoint selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .model import FavaModel, ModalityDecision
from .pipeline import STREAM_EVAL, FeatureNormalizer, substream
from .rnnt import Vocabulary, greedy_decode

CONDITIONS = ("clean", "babble_0db")


def edit_distance(ref, hyp) -> tuple[int, int, int]:
    """``(substitutions, deletions, insertions)`` of a minimum-cost alignment.

    Among equal-cost alignments the backtrace prefers a substitution, then
    an insertion, then a deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i, j - 1] + 1,
                d[i - 1, j] + 1,
            )
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return int(s), int(dl), int(ins)


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0
    condition: str = ""
    checkpoint: str = ""

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words <= 0:
            raise ValueError("WER is undefined without reference words")
        return self.errors / self.ref_words

    def add(self, ref, hyp) -> "WerReport":
        s, d, i = edit_distance(ref, hyp)
        self.substitutions += s
        self.deletions += d
        self.insertions += i
        self.ref_words += len(ref)
        return self

    def to_json(self) -> str:
        rec = asdict(self)
        rec["wer_percent"] = round(100.0 * self.wer, 4)
        return json.dumps(rec, sort_keys=True)


def wer(refs, hyps) -> float:
    """Corpus WER: pooled errors over pooled reference words."""
    report = WerReport()
    for r, h in zip(refs, hyps):
        report.add(r.split() if isinstance(r, str) else r, h.split() if isinstance(h, str) else h)
    return report.wer


def condition_waveform(wave, condition: str, babble, seed: int, index: int):
    if condition == "clean":
        return wave
    if condition == "babble_0db":
        if babble is None:
            raise ValueError("babble_0db needs a babble waveform")
        return dsp.mix_at_snr(wave, babble, 0.0, substream(seed, STREAM_EVAL, index))
    raise ValueError(f"unknown condition {condition!r}")


@torch.no_grad()
def transcribe(model: FavaModel, feats, video=None, decision=None, max_symbols_per_frame: int = 10):
    """Greedy hypothesis (label ids) for one utterance."""
    f = torch.as_tensor(feats, dtype=torch.float32)[None]
    kwargs = {}
    if model.is_av:
        v = torch.as_tensor(video, dtype=torch.float32)[None]
        kwargs = dict(video=v, video_lengths=torch.tensor([v.shape[1]]),
                      decisions=[decision or ModalityDecision.BOTH])
    enc, lengths = model.encode(f, torch.tensor([f.shape[1]]), **kwargs)
    return greedy_decode(enc[0, : int(lengths[0])], model.predictor, model.joiner,
                         max_symbols_per_frame)


def evaluate(model: FavaModel, corpus, records, condition: str, normalizer: FeatureNormalizer,
             seed: int = 0, decision=None, babble=None, vocab: Vocabulary = Vocabulary(),
             max_symbols_per_frame: int = 10, dump=None) -> WerReport:
    """Decode ``records`` under ``condition`` and pool the error counts.

    Noise offsets depend only on ``seed`` and the record position, so the
    noisy set is identical for every model.
    """
    if not records:
        raise ValueError("empty manifest")
    if condition == "babble_0db" and babble is None:
        babble = corpus.eval_babble()
    was_training = model.training
    model.eval()
    report = WerReport(condition=condition)
    lines = []
    for idx, rec in enumerate(records):
        wave, video, transcript = corpus.load(rec)
        wave = condition_waveform(wave, condition, babble, seed, idx)
        hyp = vocab.decode(transcribe(model, normalizer(wave), video, decision, max_symbols_per_frame))
        report.add(transcript.split(), hyp.split())
        lines.append(f"{rec.id}\tREF: {transcript}\tHYP: {hyp}")
    if dump is not None:
        Path(dump).write_text("\n".join(lines) + "\n")
    model.train(was_training)
    return report


def select_checkpoint(reports):
    """Pick the candidate with the lowest mean of clean and noisy WER.

    ``reports`` holds ``(checkpoint, clean, noisy)`` triples in step order;
    ties go to the earliest.
    """
    if not reports:
        raise ValueError("no candidates")
    best, best_score = None, None
    for ckpt, clean, noisy in reports:
        c = clean.wer if isinstance(clean, WerReport) else float(clean)
        n = noisy.wer if isinstance(noisy, WerReport) else float(noisy)
        score = (c + n) / 2
        if best_score is None or score < best_score:
            best, best_score = ckpt, score
    return best


def write_hypotheses(path, ids, hyps) -> None:
    """``<utt id> <space-separated symbols>`` per line."""
    Path(path).write_text("".join(f"{u} {h}".rstrip() + "\n" for u, h in zip(ids, hyps)))
