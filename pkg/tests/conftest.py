import numpy as np
import pytest

from asrprobe import audio, features


@pytest.fixture(scope="session")
def fb():
    return features.make_mel()


@pytest.fixture(scope="session")
def stft_cfg():
    return features.StftConfig()


@pytest.fixture(scope="session")
def small_corpus():
    spec = audio.CorpusSpec(
        vocab=["a", "b", "c", "d"], n_speakers=3, utterances_per_speaker=4,
        tokens_per_utterance=3, seed=11,
    )
    return audio.synth_corpus(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
