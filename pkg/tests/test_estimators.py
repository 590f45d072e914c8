import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fava import bestrq
from fava.estimators import AVSpeechRecognizer, LogMelExtractor, RandomProjectionQuantizer


def _waves(rng, n=3):
    return [rng.standard_normal(16000 + 800 * i) * 0.1 for i in range(n)]


def test_params_round_trip():
    est = LogMelExtractor(num_mels=40)
    assert clone(est).get_params() == est.get_params()
    q = RandomProjectionQuantizer(seed=7, codebook_size=64)
    assert q.set_params(codebook_size=32).codebook_size == 32
    assert AVSpeechRecognizer(mode="tfs_av").get_params()["mode"] == "tfs_av"


def test_logmel_extractor(rng):
    waves = _waves(rng)
    with pytest.raises(NotFittedError):
        LogMelExtractor().transform(waves)
    feats = LogMelExtractor().fit_transform(waves)
    stacked = np.concatenate(feats)
    assert stacked.shape[1] == 80
    np.testing.assert_allclose(stacked.mean(axis=0), 0, atol=1e-4)
    raw = LogMelExtractor(normalize=False).fit(waves).transform(waves[0])
    assert raw[0].shape == feats[0].shape


def test_quantizer_matches_functional_api(rng):
    feats = LogMelExtractor(normalize=False).fit_transform(_waves(rng))
    est = RandomProjectionQuantizer(seed=3, codebook_size=64).fit(feats)
    labels = est.transform(feats)
    q = bestrq.init_quantizer(3, 320, 16, 64)
    stacked = [bestrq.stack_frames(f, 4) for f in feats]
    allf = np.concatenate(stacked)
    q = q.with_stats(allf.mean(axis=0), np.maximum(allf.std(axis=0), 1e-5))
    for lab, s in zip(labels, stacked):
        assert np.array_equal(lab, bestrq.quantize(q, s))
        assert lab.min() >= 0 and lab.max() < 64


def test_recognizer_fit_predict(tiny_corpus, tmp_path):
    est = AVSpeechRecognizer(mode="finetune_av", pretrain_steps=2, finetune_steps=2, batch_size=4,
                             work_dir=tmp_path)
    est.fit(tiny_corpus)
    hyps = est.predict("dev")
    assert len(hyps) == len(tiny_corpus.records("dev"))
    assert all(isinstance(h, str) for h in hyps)
    assert est.score("dev") <= 1.0
    assert (tmp_path / "pretrain").is_dir()
