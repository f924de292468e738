import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dyntrans.emformer import EncoderConfig
from dyntrans.model import ModelConfig, build_det_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=6, aux_classes=6, embed_dim=8, pred_layers=1, pred_dim=8,
                       depths=(4, 3),
                       encoder=EncoderConfig(num_layers=4, model_dim=8, num_heads=2, ffn_dim=12,
                                             segment_frames=2, left_context_frames=3,
                                             right_context_frames=1, dropout_rate=0.0,
                                             input_dim=5, out_dim=8))


@pytest.fixture
def small_model(small_cfg):
    return build_det_model((4, 3), small_cfg, seed=3)


@pytest.fixture
def small_gen():
    from dyntrans.data import GenConfig
    return GenConfig(vocab_size=6, feature_dim=5, tokens_per_utt=(1, 3), frames_per_token=(2, 3))


@pytest.fixture
def small_utts(small_gen):
    from dyntrans.data import gen_corpus
    return gen_corpus(5, 12, small_gen)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines (one per criterion) after the run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
            terminalreporter.write_line(RESULTS[key])
