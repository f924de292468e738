"""Transducer loss by forward-backward over the ``T x (U+1)`` lattice.

Node ``(t, u)``: frame ``t`` (0-based) with ``u`` labels emitted. A blank
moves to ``(t+1, u)``, label ``y[u]`` moves to ``(t, u+1)``, and every
alignment ends with a blank emitted from ``(T-1, U)``; there are
``C(T+U-1, U)`` alignments.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_op

NEG_INF = -np.inf


def lattice_log_probs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the class axis.

    The normaliser is summed in sorted order, so relabelling classes leaves
    every log-probability bitwise unchanged.
    """
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.sort(np.exp(z), axis=-1).sum(axis=-1, keepdims=True))
    return z - lse


@dataclass
class RestrictionBand:
    """Band around a reference alignment.

    ``ref_frames[u]`` is the frame (0-based) at which label ``u`` is expected.
    Label ``u`` may be emitted at frames ``ref_frames[u] - b_left`` through
    ``ref_frames[u] + b_right``.
    """
    ref_frames: Sequence[int]
    b_left: float = math.inf
    b_right: float = math.inf

    def __post_init__(self):
        if self.b_left < 0 or self.b_right < 0:
            raise ValueError("band widths must be >= 0")
        if any(b < a for a, b in zip(self.ref_frames, self.ref_frames[1:])):
            raise ValueError("reference alignment must be monotone")


def restriction_mask(band: RestrictionBand | None, T: int, U: int) -> np.ndarray:
    """Boolean ``[T, U+1]``: node ``(t, u)`` is valid iff
    ``ref[u-1] - b_left <= t`` (for ``u >= 1``) and ``t <= ref[u] + b_right``
    (for ``u < U``)."""
    valid = np.ones((T, U + 1), dtype=bool)
    if band is None:
        return valid
    if len(band.ref_frames) != U:
        raise ValueError("reference alignment length must equal U")
    t = np.arange(T)[:, None]
    ref = np.asarray(band.ref_frames, dtype=np.float64)
    lo = np.concatenate([[-np.inf], ref - band.b_left])
    hi = np.concatenate([ref + band.b_right, [np.inf]])
    return (t >= lo[None, :]) & (t <= hi[None, :])


def _check(lp: np.ndarray, targets: Sequence[int], blank: int):
    if lp.ndim != 3:
        raise ValueError("expected [T, U+1, classes] log-probs")
    T, U1, K = lp.shape
    U = len(targets)
    if T == 0 and U > 0:
        raise ValueError("cannot emit labels with zero frames")
    if T < 1:
        raise ValueError("need T >= 1")
    if U1 != U + 1:
        raise ValueError(f"lattice has {U1} label positions, targets imply {U + 1}")
    for y in targets:
        if not 0 <= y < K or y == blank:
            raise ValueError(f"target {y} invalid for {K} classes with blank {blank}")
    return T, U


def forward_variables(lp: np.ndarray, targets: Sequence[int], blank: int, valid: np.ndarray | None = None):
    """Return ``(alpha, beta, log_p)``; invalid nodes carry ``-inf``."""
    T, U = _check(lp, targets, blank)
    alpha, beta, log_p = _batched_fb(lp[None], [list(targets)], [T], blank,
                                     None if valid is None else valid[None])
    return alpha[0, :T], beta[0, :T], float(log_p[0])


def _batched_fb(lp: np.ndarray, targets, frame_lens, blank: int, valid=None):
    """Forward-backward for a padded batch ``lp[B, T_max, U_max+1, K]``.

    The grid gets one extra row holding a virtual end node ``(T_b, U_b)``
    reached by the final blank; its backward variable is 0. Anti-diagonals
    are processed in order, vectorised across the batch.
    """
    B, Tm, U1m, _ = lp.shape
    Um = U1m - 1
    T_b = np.asarray(frame_lens, dtype=np.int64)
    U_b = np.array([len(y) for y in targets], dtype=np.int64)
    lb = np.full((B, Tm + 1, U1m), NEG_INF)
    lb[:, :Tm] = lp[..., blank]
    ly = np.full((B, Tm + 1, U1m), NEG_INF)
    if Um:
        ypad = np.zeros((B, Um), dtype=np.int64)
        for b, y in enumerate(targets):
            ypad[b, :len(y)] = y
        ly[:, :Tm, :Um] = np.take_along_axis(lp[:, :, :Um, :], np.broadcast_to(
            ypad[:, None, :, None], (B, Tm, Um, 1)), axis=3)[..., 0]
    t = np.arange(Tm + 1)[None, :, None]
    u = np.arange(U1m)[None, None, :]
    ok = (t < T_b[:, None, None]) & (u <= U_b[:, None, None])
    if valid is not None:
        vpad = np.zeros((B, Tm + 1, U1m), dtype=bool)
        vpad[:, :valid.shape[1], :valid.shape[2]] = valid
        ok &= vpad
    ok_lab = ok & (u < U_b[:, None, None])
    ly = np.where(ok_lab, ly, NEG_INF)
    lb = np.where(ok, lb, NEG_INF)
    end = (t == T_b[:, None, None]) & (u == U_b[:, None, None])
    node_ok = ok | end

    alpha = np.full((B, Tm + 1, U1m), NEG_INF)
    alpha[:, 0, 0] = np.where(node_ok[:, 0, 0], 0.0, NEG_INF)
    for d in range(1, Tm + 1 + Um):
        us = np.arange(max(0, d - Tm), min(Um, d) + 1)
        ts = d - us
        tp, up = np.maximum(ts - 1, 0), np.maximum(us - 1, 0)
        a = np.where(ts >= 1, alpha[:, tp, us] + lb[:, tp, us], NEG_INF)
        c = np.where(us >= 1, alpha[:, ts, up] + ly[:, ts, up], NEG_INF)
        alpha[:, ts, us] = np.where(node_ok[:, ts, us], np.logaddexp(a, c), NEG_INF)

    beta = np.where(end, 0.0, NEG_INF)
    for d in range(Tm + Um - 1, -1, -1):
        us = np.arange(max(0, d - Tm), min(Um, d) + 1)
        ts = d - us
        keep = ts < Tm
        us, ts = us[keep], ts[keep]
        un = np.minimum(us + 1, Um)
        a = beta[:, ts + 1, us] + lb[:, ts, us]
        c = np.where(us < Um, beta[:, ts, un] + ly[:, ts, us], NEG_INF)
        # the virtual end node sits inside the grid when T_b < T_max; keep its 0
        beta[:, ts, us] = np.where(ok[:, ts, us], np.logaddexp(a, c), beta[:, ts, us])

    log_p = alpha[np.arange(B), T_b, U_b]
    return alpha, beta, log_p


def _batched_grad(lp, targets, frame_lens, blank, valid=None):
    """Losses ``[B]`` and gradients w.r.t. the logits behind ``lp``."""
    alpha, beta, log_p = _batched_fb(lp, targets, frame_lens, blank, valid)
    if not np.all(np.isfinite(log_p)):
        raise ValueError("restriction band excludes every alignment")
    B, Tm, U1m, K = lp.shape
    lpn = log_p[:, None, None]
    a = alpha[:, :Tm]
    arc = np.zeros_like(lp)
    with np.errstate(under="ignore"):
        arc[..., blank] = np.exp(a + lp[..., blank] + beta[:, 1:] - lpn)
        for b, y in enumerate(targets):
            U = len(y)
            if U:
                uu = np.arange(U)
                arc[b, :, uu, y] += np.exp(a[b, :, :U] + lp[b, :, uu, y].T + beta[b, :Tm, 1:U + 1]
                                           - log_p[b]).T
        occupancy = arc.sum(axis=-1, keepdims=True)
        grad = np.exp(lp) * occupancy - arc
    return -log_p, grad


def transducer_forward_backward(logits: np.ndarray, targets: Sequence[int], blank: int,
                                band: RestrictionBand | None = None):
    """Loss ``-log P(Y|X)`` and its gradient w.r.t. the ``[T, U+1, K]`` logits.

    Already-normalised log-probabilities may be passed as logits.
    """
    lp = lattice_log_probs(logits)
    T, U = _check(lp, targets, blank)
    valid = restriction_mask(band, T, U)
    loss, grad = _batched_grad(lp[None], [list(targets)], [T], blank, valid[None])
    return float(loss[0]), grad[0]


def brute_force_loss(logits: np.ndarray, targets: Sequence[int], blank: int,
                     valid: np.ndarray | None = None, max_len: int = 14) -> float:
    """Sum over explicitly enumerated alignments (test oracle)."""
    lp = lattice_log_probs(logits)
    T, U = _check(lp, targets, blank)
    if T + U > max_len:
        raise ValueError(f"T+U={T + U} too large to enumerate")
    total = []
    for label_slots in itertools.combinations(range(T + U - 1), U):
        slots = set(label_slots)
        t = u = 0
        score = 0.0
        ok = True
        for pos in range(T + U - 1):
            if valid is not None and not valid[t, u]:
                ok = False
                break
            if pos in slots:
                score += lp[t, u, targets[u]]
                u += 1
            else:
                score += lp[t, u, blank]
                t += 1
        if not ok or (valid is not None and not valid[t, u]):
            continue
        total.append(score + lp[T - 1, U, blank])
    if not total:
        return math.inf
    return float(-np.logaddexp.reduce(np.array(total)))


def count_alignments(T: int, U: int) -> int:
    return math.comb(T + U - 1, U)


def transducer_loss(logits, targets: Sequence[Sequence[int]], frame_lens: Sequence[int], blank: int,
                    bands: Sequence[RestrictionBand | None] | None = None) -> Tensor:
    """Per-utterance losses ``[B]`` for padded logits ``[B, T, U_max+1, K]``.

    Utterances are independent: results do not depend on batch composition
    beyond padding, which never enters the lattice.
    """
    logits = as_tensor(logits)
    B, Tm, U1m, _ = logits.shape
    targets = [list(y) for y in targets]
    for y in targets:
        if len(y) + 1 > U1m:
            raise ValueError("targets longer than the lattice")
    valid = None
    if bands is not None:
        valid = np.ones((B, Tm, U1m), dtype=bool)
        for b, band in enumerate(bands):
            T, U = int(frame_lens[b]), len(targets[b])
            valid[b, :T, :U + 1] = restriction_mask(band, T, U)
    lp = lattice_log_probs(logits.data)
    losses, grad = _batched_grad(lp, targets, frame_lens, blank, valid)

    def bw(g):
        return (grad * g[:, None, None, None],)

    return make_op(losses, (logits,), bw, "transducer_loss")
