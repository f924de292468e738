import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyntrans.data import (DatasetFormatError, GenConfig, collapse, gen_corpus, gen_utterance,
                           read_dataset, token_end_frames, write_dataset)
from dyntrans.rng import RngStream


def test_replay_is_bitwise():
    cfg = GenConfig()
    assert gen_utterance(RngStream(4), cfg) == gen_utterance(RngStream(4), cfg)
    assert gen_corpus(2, 5, cfg)[3] == gen_corpus(2, 9, cfg)[3]
    assert gen_utterance(RngStream(4), cfg) != gen_utterance(RngStream(5), cfg)


def test_noiseless_frames_are_prototypes():
    cfg = GenConfig(noise_std=0.0)
    u = gen_utterance(RngStream(0), cfg)
    protos = cfg.prototypes().astype(np.float32)
    assert np.array_equal(u.features, protos[u.alignment])


def test_wake_word_prefix():
    cfg = GenConfig(wake_word=(3, 7))
    for i in range(10):
        u = gen_utterance(RngStream(i), cfg)
        assert u.tokens[:2] == [3, 7]
        assert collapse(u.alignment)[:2] == [3, 7]


@given(st.integers(0, 2**32), st.integers(1, 3))
def test_alignment_collapses_to_transcript(seed, stack):
    cfg = GenConfig(frames_per_token=(3, 5), frame_stack=stack)
    u = gen_utterance(RngStream(seed), cfg)
    assert len(u.alignment) == u.num_frames
    assert collapse(u.alignment) == u.tokens
    assert all(0 <= t < cfg.vocab_size for t in u.tokens)
    assert u.features.shape[1] == cfg.model_input_dim
    ends = token_end_frames(u.alignment)
    assert len(ends) == len(u.tokens) and ends[-1] == u.num_frames - 1


def test_config_errors():
    for kw in ({"noise_std": -1}, {"tokens_per_utt": (4, 2)}, {"frames_per_token": (0, 2)},
               {"wake_word": (3, 3)}, {"wake_word": (99,)}, {"frame_stack": 3}):
        with pytest.raises(ValueError):
            GenConfig(**kw)


def test_roundtrip(tmp_path):
    utts = gen_corpus(7, 100, GenConfig(frame_stack=2))
    p = tmp_path / "d.detd"
    write_dataset(p, utts)
    back = read_dataset(p)
    assert back == utts
    assert write_dataset(tmp_path / "again.detd", back) is None
    assert (tmp_path / "again.detd").read_bytes() == p.read_bytes()


def test_format_errors(tmp_path):
    p = tmp_path / "d.detd"
    write_dataset(p, gen_corpus(0, 3, GenConfig()))
    raw = p.read_bytes()
    empty = tmp_path / "empty.detd"
    write_dataset(empty, [])
    assert read_dataset(empty) == []
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 9) + raw[8:],
        "truncated": raw[:-5],
        "trailing": raw + b"\0",
        "nothing": b"",
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.detd"
        bad.write_bytes(blob)
        with pytest.raises(DatasetFormatError):
            read_dataset(bad)


def test_noiseless_classes_linearly_separable():
    cfg = GenConfig(noise_std=0.0)
    protos = cfg.prototypes()
    W, b = protos, -0.5 * (protos ** 2).sum(1)   # nearest prototype as a linear score
    for u in gen_corpus(1, 30, cfg):
        pred = np.argmax(u.features.astype(np.float64) @ W.T + b, axis=1)
        assert pred.tolist() == u.alignment
