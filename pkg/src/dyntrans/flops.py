"""Analytic multiply-accumulate counts.

Only matrix products are counted; norms, nonlinearities, softmax and
additions are ignored. All counts are Python ints.
"""

from __future__ import annotations

from typing import Sequence

from .emformer import Encoder, EncoderConfig


def linear_macs(d_in: int, d_out: int, frames: int = 1) -> int:
    return int(frames) * int(d_in) * int(d_out)


def layer_macs(cfg: EncoderConfig, n: int, cached: int) -> int:
    """One layer on ``n`` query rows attending to ``cached + n`` keys."""
    d, f = cfg.model_dim, cfg.ffn_dim
    qkv = 3 * n * d * d
    scores = n * (cached + n) * d
    mix = n * (cached + n) * d
    out = n * d * d
    ffn = 2 * n * d * f
    return qkv + scores + mix + out + ffn


def chunk_macs(cfg: EncoderConfig, n_seg: int, n_rc: int, cached: Sequence[int]) -> int:
    """Encoder cost of one streamed segment.

    ``cached`` holds the left-context length seen by each layer.
    """
    n = n_seg + n_rc
    total = linear_macs(cfg.input_dim, cfg.model_dim, n)
    total += sum(layer_macs(cfg, n, c) for c in cached)
    total += linear_macs(cfg.model_dim, cfg.out_dim, n_seg)
    return total


def segment_plan(T: int, cfg: EncoderConfig) -> list[tuple[int, int, int]]:
    """``(start, n_seg, n_rc)`` for every segment of a ``T``-frame stream."""
    S, R = cfg.segment_frames, cfg.right_context_frames
    out = []
    for start in range(0, T, S):
        end = min(start + S, T)
        out.append((start, end - start, min(end + R, T) - end))
    return out


def encoder_stream_macs(cfg: EncoderConfig, depth: int, T: int) -> int:
    """Encoder cost of streaming ``T`` frames from an empty cache."""
    total = 0
    for start, n_seg, n_rc in segment_plan(T, cfg):
        c = min(cfg.left_context_frames, start)
        total += chunk_macs(cfg, n_seg, n_rc, [c] * depth)
    return total


def joiner_macs(joint_dim: int, num_classes: int) -> int:
    return joint_dim * num_classes


def predictor_step_macs(predictor) -> int:
    """One label step through the LSTM stack and output projection."""
    total = 0
    for cell in predictor.lstms:
        total += 4 * cell.d_hidden * (cell.d_in + cell.d_hidden)
    total += linear_macs(predictor.proj.d_in, predictor.proj.d_out)
    return total


def frame_macs(encoder_cfg: EncoderConfig, num_classes: int) -> int:
    """Per-frame joiner call made by greedy decoding (one blank check)."""
    return joiner_macs(encoder_cfg.out_dim, num_classes)


def flops_count(view: Encoder | EncoderConfig, T: int, num_classes: int, depth: int | None = None) -> int:
    """MACs to stream-encode ``T`` frames plus one joiner call per frame.

    Label-dependent work (predictor steps and the extra joiner call per
    emitted token) is excluded so the count is a pure function of the
    configuration and ``T``.
    """
    if isinstance(view, Encoder):
        cfg, depth = view.cfg, view.depth
    else:
        cfg = view
        if depth is None:
            raise ValueError("depth required when passing a config")
    if T < 0:
        raise ValueError("T must be >= 0")
    return encoder_stream_macs(cfg, depth, T) + T * frame_macs(cfg, num_classes)
