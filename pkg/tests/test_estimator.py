import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualcodec.codec import synth_corpus
from dualcodec.dsp import AudioBuffer
from dualcodec.estimator import DualCodecEstimator, check_audio, check_corpus

SMALL = dict(n_layers=2, rvq1_size=16, rest_size=16, latent_dim=8, batch_size=2)


def test_params_and_clone():
    est = DualCodecEstimator(steps=3, **SMALL)
    params = est.get_params()
    assert params["steps"] == 3 and params["latent_dim"] == 8
    est.set_params(seed=4)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert not hasattr(c, "model_")


def test_fit_transform_inverse():
    corpus = synth_corpus(0, 3, 0.5)
    est = DualCodecEstimator(steps=2, **SMALL).fit(corpus)
    assert len(est.loss_history_) == 2 and est.frame_rate_ == 25.0
    tokens = est.transform(corpus)
    assert [t.codes.shape for t in tokens] == [(2, 12)] * 3
    audio = est.inverse_transform(tokens)
    assert all(len(a) == 12 * 960 for a in audio)
    assert np.isfinite(est.score(corpus))
    est.set_params(encode_layers=1)
    assert est.transform(corpus[0])[0].codes.shape == (1, 12)


def test_fit_is_deterministic():
    corpus = synth_corpus(0, 3, 0.5)
    a = DualCodecEstimator(steps=2, **SMALL).fit(corpus).transform(corpus)
    b = DualCodecEstimator(steps=2, **SMALL).fit(corpus).transform(corpus)
    assert a == b


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        DualCodecEstimator().transform(np.zeros(24000))


def test_check_audio():
    assert isinstance(check_audio(np.zeros(10)), AudioBuffer)
    with pytest.raises(ValueError, match="1-D"):
        check_audio(np.zeros((2, 10)))
    with pytest.raises(ValueError, match="NaN"):
        check_audio(np.array([0.0, np.nan]))
    with pytest.raises(ValueError, match="empty"):
        check_audio(np.zeros(0))
    with pytest.raises(ValueError, match="Hz"):
        check_audio(AudioBuffer(np.zeros(10), 16000))


def test_check_corpus():
    assert len(check_corpus(np.zeros((3, 100)))) == 3
    assert len(check_corpus(np.zeros(100))) == 1
    with pytest.raises(ValueError, match="empty"):
        check_corpus([])
