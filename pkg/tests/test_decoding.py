import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyntrans.collaborative import LossConfig
from dyntrans.config import ExperimentConfig
from dyntrans.data import GenConfig, gen_corpus
from dyntrans.decoding import (CostClock, Hypothesis, SwitchPlan, decode_offline, dynamic_switch_decode,
                               greedy_decode, greedy_decode_step, instant_schedule, simulate_burst,
                               stream_decode)
from dyntrans.experiment import evaluate_encoder, init_run, run_training
from dyntrans.flops import flops_count
from dyntrans.model import build_det_model


@pytest.fixture(scope="module")
def model():
    from dyntrans.emformer import EncoderConfig
    from dyntrans.model import ModelConfig
    cfg = ModelConfig(vocab_size=6, aux_classes=6, embed_dim=8, pred_layers=1, pred_dim=8,
                      encoder=EncoderConfig(model_dim=8, num_heads=2, ffn_dim=12, segment_frames=2,
                                            left_context_frames=3, right_context_frames=1,
                                            input_dim=5, out_dim=8))
    m = build_det_model((4, 2), cfg, seed=2)
    # blank-leaning but not blank-only, so decodes emit a few labels
    m.joiner.out.weight.data *= 6.0
    return m


@pytest.fixture(scope="module")
def utts():
    return gen_corpus(9, 8, GenConfig(vocab_size=6, feature_dim=5, tokens_per_utt=(2, 5)))


def test_burst_schedule():
    assert np.array_equal(simulate_burst(4, 0, 10.0), [10, 20, 30, 40])
    assert np.array_equal(simulate_burst(4, 4, 10.0), np.zeros(4))
    s = simulate_burst(40, 30, 10.0)
    assert s[29] == 0 and s[30] == 10.0
    with pytest.raises(ValueError):
        simulate_burst(4, 5)


def test_blank_and_label_dominant(model):
    m = model
    saved = m.joiner.out.weight.data.copy(), m.joiner.out.bias.data.copy()
    try:
        m.joiner.out.weight.data[...] = 0.0
        m.joiner.out.bias.data[...] = 0.0
        m.joiner.out.bias.data[m.blank] = 5.0
        h = np.random.default_rng(0).normal(size=(6, 8))
        assert greedy_decode(h, m.predictor, m.joiner) == ([], [])
        m.joiner.out.bias.data[m.blank] = 0.0
        m.joiner.out.bias.data[3] = 5.0
        emitted, hyp, calls = greedy_decode_step(h[0], Hypothesis.start(m.predictor), m.predictor, m.joiner, 2)
        assert emitted == [3, 3] and calls == 2 and hyp.tokens == [3, 3]
        with pytest.raises(ValueError):
            greedy_decode_step(h[0], hyp, m.predictor, m.joiner, 0)
    finally:
        m.joiner.out.weight.data, m.joiner.out.bias.data = saved


def test_stream_equals_offline(model, utts):
    emitted = 0
    for enc_id in range(2):
        enc = model.encoder(enc_id)
        for u in utts:
            tr = stream_decode(u.features, enc, model.predictor, model.joiner, instant_schedule(u.num_frames))
            tokens, frames = decode_offline(u.features, enc, model.predictor, model.joiner)
            assert tr.tokens == tokens and tr.token_frames == frames
            assert tr.token_frames == sorted(tr.token_frames)
            assert max(np.bincount(tr.token_frames, minlength=1)) <= 4
            emitted += len(tokens)
    assert emitted > 0


def closed_form_macs(T, S, L, R, depth, F, d, f, out, V1):
    """Second, independent count: per frame and per segment, no shared helpers."""
    total = 0
    start = 0
    while start < T:
        n_seg = min(S, T - start)
        n_rc = min(R, T - start - n_seg)
        n = n_seg + n_rc
        keys = min(L, start) + n
        per_layer = 4 * n * d * d + 2 * n * keys * d + 2 * n * d * f
        total += n * F * d + depth * per_layer + n_seg * d * out + n_seg * out * V1
        start += S
    return total


def test_flops_match_trace_and_closed_form(model, utts):
    c = model.ecfg
    for i in range(2):
        enc = model.encoder(i)
        for u in utts[:4]:
            T = u.num_frames
            tr = stream_decode(u.features, enc, model.predictor, model.joiner)
            want = closed_form_macs(T, c.segment_frames, c.left_context_frames, c.right_context_frames,
                                    enc.depth, c.input_dim, c.model_dim, c.ffn_dim, c.out_dim, 7)
            assert tr.total_flops == flops_count(enc, T, 7) == want


def test_burst_segments_run_back_to_back(model, utts):
    u = utts[0]
    T = u.num_frames
    B = T - 3
    tr = stream_decode(u.features, model.encoder(0), model.predictor, model.joiner, simulate_burst(T, B))
    c = model.ecfg
    # segments whose frames and look-ahead all arrived in the burst start as soon as the previous one ends
    in_burst = [i for i, s in enumerate(range(0, T, c.segment_frames))
                if s + c.segment_frames - 1 + c.right_context_frames < B]
    assert len(in_burst) >= 3
    assert tr.segment_start_ms[0] == 0.0
    for i in in_burst[1:]:
        assert tr.segment_start_ms[i] == tr.segment_finish_ms[i - 1]
    rt = stream_decode(u.features, model.encoder(0), model.predictor, model.joiner)
    assert rt.tokens == tr.tokens
    # real time: the first segment waits for its look-ahead frame (0-based frame 2 arrives at 30 ms)
    assert rt.segment_start_ms[0] == 30.0


def test_schedule_errors(model, utts):
    u = utts[0]
    with pytest.raises(ValueError):
        stream_decode(u.features, model.encoder(0), model.predictor, model.joiner, np.zeros(u.num_frames - 1))
    with pytest.raises(ValueError):
        stream_decode(u.features, model.encoder(0), model.predictor, model.joiner,
                      np.arange(u.num_frames)[::-1].astype(float))


def test_switch_degeneracy(model, utts):
    for u in utts:
        T = u.num_frames
        full = stream_decode(u.features, model.encoder(0), model.predictor, model.joiner)
        small = stream_decode(u.features, model.encoder(1), model.predictor, model.joiner)
        k0 = dynamic_switch_decode(u.features, model, SwitchPlan(0, 1, 0))
        kT = dynamic_switch_decode(u.features, model, SwitchPlan(T, 1, 0))
        assert k0.same_decode(full) and kT.same_decode(small)
        assert k0.total_flops == full.total_flops and kT.total_flops == small.total_flops


def test_flops_strictly_decrease_with_switch_time(model, utts):
    for u in utts:
        T = u.num_frames
        ks = sorted(set(list(range(0, T, 2)) + [T]))
        flops = [dynamic_switch_decode(u.features, model, SwitchPlan(k, 1, 0)).total_flops for k in ks]
        assert all(a > b for a, b in zip(flops, flops[1:])), flops


@pytest.mark.parametrize("policy", ["carry_shared", "reset_all"])
def test_output_before_switch_matches_small_encoder(model, utts, policy):
    for u in utts:
        T = u.num_frames
        small = stream_decode(u.features, model.encoder(1), model.predictor, model.joiner)
        for k in range(0, T + 1, 2):
            tr = dynamic_switch_decode(u.features, model, SwitchPlan(k, 1, 0, policy))
            before = [(t, f) for t, f in zip(small.tokens, small.token_frames) if f < k]
            assert [(t, f) for t, f in zip(tr.tokens, tr.token_frames) if f < k] == before
            assert tr.token_frames == sorted(tr.token_frames)
            n_small = -(-k // 2)
            assert tr.segment_encoder == ["enc2"] * n_small + ["enc1"] * (len(tr.segment_encoder) - n_small)


def test_switch_plan_validation(model, utts):
    u = utts[0]
    with pytest.raises(ValueError):
        dynamic_switch_decode(u.features, model, SwitchPlan(1, 1, 0))
    with pytest.raises(ValueError):
        SwitchPlan(2, 1, 0, "bogus")
    p = SwitchPlan.from_ms(57.0, 10.0, 2, 1)
    assert p.switch_frames == 4
    assert p.for_length(3, 2).switch_frames == 3


def test_cost_clock():
    assert CostClock().cost(20_000, 123.0) == 2.0
    assert CostClock("wall").cost(20_000, 0.5) == 500.0
    with pytest.raises(ValueError):
        CostClock("bogus")


def test_overfit_reproduces_training_transcripts():
    cfg = ExperimentConfig.from_dict({
        "model": {"depths": [2]},
        "encoder": {"dropout_rate": 0.0},
        "train": {"lr": 1e-2, "warmup": 20, "freq_masks": 0, "batch": 5},
        "data": {"tokens_per_utt": [2, 4]},
    })
    utts = gen_corpus(1, 5, cfg.data.gen)
    run = init_run(cfg, "collaborative", 0)
    wer = None
    for _ in range(8):
        run_training(run, cfg, utts, LossConfig(0.0, 0.0), data_seed=0, steps=50, log_every=0)
        wer = evaluate_encoder(run.model, run.model.encoder(0), utts).wer
        if wer == 0.0:
            break
    assert wer == 0.0
    for u in utts:
        tr = stream_decode(u.features, run.model.encoder(0), run.model.predictor, run.model.joiner)
        assert tr.tokens == u.tokens
