"""Greedy streaming decoding, simulated audio arrival and encoder switching.

Times are in milliseconds. Frame indices in traces are 0-based; arrival
schedules are indexed the same way (``arrival[t]`` is when frame ``t``
becomes available).

Processing time comes from a :class:`CostClock`. The default ``model``
clock charges ``MACs / macs_per_ms`` for every encoder segment, joiner
call and predictor step, which keeps traces deterministic. The ``wall``
clock measures elapsed time instead.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .emformer import Encoder, StreamCache
from .flops import chunk_macs, frame_macs, joiner_macs, predictor_step_macs, segment_plan
from .predictor import Joiner, Predictor, PredictorState
from .tensor import Tensor, no_grad

CACHE_POLICIES = ("carry_shared", "reset_all")


# -- arrival -------------------------------------------------------------------------

def simulate_burst(num_frames: int, burst_frames: int, frame_ms: float = 10.0) -> np.ndarray:
    """Frames ``1..B`` (1-based) arrive at 0; frame ``t > B`` at ``(t - B) * frame_ms``."""
    if not 0 <= burst_frames <= num_frames:
        raise ValueError(f"burst of {burst_frames} frames outside 0..{num_frames}")
    t = np.arange(1, num_frames + 1)
    return np.maximum(t - burst_frames, 0) * float(frame_ms)


def realtime_schedule(num_frames: int, frame_ms: float = 10.0) -> np.ndarray:
    return simulate_burst(num_frames, 0, frame_ms)


def instant_schedule(num_frames: int) -> np.ndarray:
    return np.zeros(num_frames)


def _needed_arrival(arrival: np.ndarray, last: int, frame_ms: float) -> float:
    """Arrival of 0-based frame ``last``; positions past the end are padding
    that trails the final frame at the real-time rate."""
    T = len(arrival)
    if last < T:
        return float(arrival[last])
    return float(arrival[T - 1]) + (last - T + 1) * frame_ms


# -- clock ---------------------------------------------------------------------------

@dataclass
class CostClock:
    kind: str = "model"
    macs_per_ms: float = 1.0e4

    def __post_init__(self):
        if self.kind not in ("model", "wall"):
            raise ValueError("clock kind must be 'model' or 'wall'")
        if self.macs_per_ms <= 0:
            raise ValueError("macs_per_ms must be > 0")

    def cost(self, macs: int, elapsed_s: float) -> float:
        if self.kind == "model":
            return macs / self.macs_per_ms
        return elapsed_s * 1000.0


# -- greedy search -------------------------------------------------------------------

@dataclass
class Hypothesis:
    """Greedy search state: emitted labels plus the predictor output for them."""
    tokens: list[int]
    pred_out: np.ndarray
    pred_state: PredictorState

    @classmethod
    def start(cls, predictor: Predictor) -> "Hypothesis":
        with no_grad():
            out, state = predictor.forward([predictor.vocab.blank_id])
        return cls([], out.data[-1], state)


def greedy_decode_step(h_t, hyp: Hypothesis, predictor: Predictor, joiner: Joiner,
                       max_symbols: int = 4) -> tuple[list[int], Hypothesis, int]:
    """Decode one encoder frame.

    Returns ``(emitted, hyp, joiner_calls)``. Labels are emitted (and the
    predictor advanced) until the blank wins or ``max_symbols`` is reached.
    """
    if max_symbols < 1:
        raise ValueError("max_symbols must be >= 1")
    blank = predictor.vocab.blank_id
    h_t = np.asarray(h_t.data if isinstance(h_t, Tensor) else h_t)
    emitted: list[int] = []
    calls = 0
    with no_grad():
        while len(emitted) < max_symbols:
            logits = joiner(Tensor(h_t), Tensor(hyp.pred_out)).data
            calls += 1
            k = int(np.argmax(logits))
            if k == blank:
                break
            emitted.append(k)
            out, state = predictor.forward([k], hyp.pred_state)
            hyp = Hypothesis(hyp.tokens + [k], out.data[-1], state)
    return emitted, hyp, calls


def greedy_decode(h, predictor: Predictor, joiner: Joiner, max_symbols: int = 4):
    """Offline greedy decode of encoder output ``h`` [T, J]; returns ``(tokens, frames)``."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    hyp = Hypothesis.start(predictor)
    frames = []
    for t in range(h.shape[0]):
        emitted, hyp, _ = greedy_decode_step(h[t], hyp, predictor, joiner, max_symbols)
        frames += [t] * len(emitted)
    return hyp.tokens, frames


# -- traces --------------------------------------------------------------------------

@dataclass
class DecodeTrace:
    utt_id: str
    num_frames: int
    frame_ms: float
    tokens: list[int] = field(default_factory=list)
    token_frames: list[int] = field(default_factory=list)
    token_times_ms: list[float] = field(default_factory=list)
    arrival_ms: list[float] = field(default_factory=list)
    segment_encoder: list[str] = field(default_factory=list)
    segment_flops: list[int] = field(default_factory=list)
    segment_start_ms: list[float] = field(default_factory=list)
    segment_finish_ms: list[float] = field(default_factory=list)
    emission_flops: int = 0
    processing_ms: float = 0.0
    final_emission_ms: float | None = None

    @property
    def total_flops(self) -> int:
        """Encoder segments plus one joiner call per frame."""
        return int(sum(self.segment_flops))

    @property
    def audio_ms(self) -> float:
        return self.num_frames * self.frame_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_flops"] = self.total_flops
        return d

    def same_decode(self, other: "DecodeTrace") -> bool:
        """Equal tokens, frames, times and FLOPs (encoder labels ignored)."""
        a, b = self.to_dict(), other.to_dict()
        a.pop("segment_encoder")
        b.pop("segment_encoder")
        return a == b


@dataclass
class _Stream:
    """Mutable decode context shared by the single and switching decoders."""
    feats: np.ndarray
    arrival: np.ndarray
    trace: DecodeTrace
    predictor: Predictor
    joiner: Joiner
    clock: CostClock
    max_symbols: int
    hyp: Hypothesis = None
    busy_until: float = 0.0

    def run_segment(self, encoder: Encoder, label: str, cache: StreamCache, start: int,
                    n_seg: int, n_rc: int) -> None:
        cfg = encoder.cfg
        end = start + n_seg
        ready = _needed_arrival(self.arrival, end - 1 + cfg.right_context_frames, self.trace.frame_ms)
        now = start_ms = max(ready, self.busy_until)
        enc_macs = chunk_macs(cfg, n_seg, n_rc, cache.lengths(encoder.layers))
        t0 = time.perf_counter()
        h = encoder.forward_stream(self.feats[start:end], self.feats[end:end + n_rc], cache).data
        now += self.clock.cost(enc_macs, time.perf_counter() - t0)
        V1 = self.predictor.vocab.num_classes
        frame_cost = frame_macs(cfg, V1)
        join_cost = joiner_macs(cfg.out_dim, V1)
        pred_cost = predictor_step_macs(self.predictor)
        for i in range(n_seg):
            t1 = time.perf_counter()
            emitted, self.hyp, _ = greedy_decode_step(h[i], self.hyp, self.predictor, self.joiner,
                                                      self.max_symbols)
            elapsed = time.perf_counter() - t1
            if self.clock.kind == "model":
                # token j is chosen by joiner call j+1, after j predictor steps
                rate = self.clock.macs_per_ms
                times = [now + ((j + 1) * join_cost + j * pred_cost) / rate for j in range(len(emitted))]
                now += (frame_cost + len(emitted) * (join_cost + pred_cost)) / rate
            else:
                now += elapsed * 1000.0
                times = [now] * len(emitted)
            self.trace.tokens += emitted
            self.trace.token_frames += [start + i] * len(emitted)
            self.trace.token_times_ms += times
            self.trace.emission_flops += len(emitted) * (join_cost + pred_cost)
        tr = self.trace
        tr.segment_encoder.append(label)
        tr.segment_flops.append(enc_macs + n_seg * frame_cost)
        tr.segment_start_ms.append(start_ms)
        tr.segment_finish_ms.append(now)
        tr.processing_ms += now - start_ms
        tr.final_emission_ms = now
        self.busy_until = now


def _prepare(feats, arrival, frame_ms, utt_id, predictor, joiner, clock, max_symbols) -> _Stream:
    feats = np.asarray(feats, dtype=np.float64)
    T = feats.shape[0]
    if T < 1:
        raise ValueError("empty utterance")
    arrival = np.asarray(arrival, dtype=np.float64)
    if arrival.shape[0] < T:
        raise ValueError(f"arrival schedule covers {arrival.shape[0]} of {T} frames")
    arrival = arrival[:T]
    if np.any(np.diff(arrival) < 0):
        raise ValueError("arrival schedule must be nondecreasing")
    trace = DecodeTrace(utt_id, T, float(frame_ms), arrival_ms=arrival.tolist())
    st = _Stream(feats, arrival, trace, predictor, joiner, clock or CostClock(), max_symbols)
    st.hyp = Hypothesis.start(predictor)
    return st


def stream_decode(feats, encoder: Encoder, predictor: Predictor, joiner: Joiner, arrival=None, *,
                  frame_ms: float | None = None, utt_id: str = "utt", encoder_id: str = "enc",
                  clock: CostClock | None = None, max_symbols: int = 4) -> DecodeTrace:
    """Decode segment by segment as frames arrive.

    A segment is processed once its last look-ahead frame has arrived and
    the previous segment is finished.
    """
    frame_ms = encoder.cfg.frame_ms if frame_ms is None else frame_ms
    feats = np.asarray(feats, dtype=np.float64)
    if arrival is None:
        arrival = realtime_schedule(feats.shape[0], frame_ms)
    st = _prepare(feats, arrival, frame_ms, utt_id, predictor, joiner, clock, max_symbols)
    cache = encoder.new_cache()
    for start, n_seg, n_rc in segment_plan(feats.shape[0], encoder.cfg):
        st.run_segment(encoder, encoder_id, cache, start, n_seg, n_rc)
    return st.trace


@dataclass(frozen=True)
class SwitchPlan:
    """Frames ``[0, K)`` on ``begin_encoder``, the rest on ``rest_encoder``.

    Encoder ids index :meth:`DetModel.encoder` (0 is the full encoder).
    """
    switch_frames: int
    begin_encoder: int
    rest_encoder: int = 0
    cache_policy: str = "carry_shared"

    def __post_init__(self):
        if self.switch_frames < 0:
            raise ValueError("switch time must be >= 0")
        if self.cache_policy not in CACHE_POLICIES:
            raise ValueError(f"cache_policy must be one of {CACHE_POLICIES}")

    @classmethod
    def from_ms(cls, switch_ms: float, frame_ms: float, segment_frames: int, begin: int, rest: int = 0,
                cache_policy: str = "carry_shared") -> "SwitchPlan":
        """Convert a time to frames, snapping down to a segment boundary."""
        frames = int(switch_ms // frame_ms)
        return cls(frames - frames % segment_frames, begin, rest, cache_policy)

    def for_length(self, T: int, segment_frames: int) -> "SwitchPlan":
        """Clamp ``K`` to an utterance of ``T`` frames."""
        return SwitchPlan(min(self.switch_frames, T), self.begin_encoder, self.rest_encoder,
                          self.cache_policy) if self.switch_frames > T else self

    def validate(self, T: int, segment_frames: int) -> None:
        K = self.switch_frames
        if not 0 <= K <= T:
            raise ValueError(f"switch frame {K} outside 0..{T}")
        if K % segment_frames and K != T:
            raise ValueError(f"switch frame {K} is not on a segment boundary (S={segment_frames})")


def dynamic_switch_decode(feats, model, plan: SwitchPlan, arrival=None, *, utt_id: str = "utt",
                          clock: CostClock | None = None, max_symbols: int = 4) -> DecodeTrace:
    """Decode with ``begin_encoder`` up to the switch frame, then ``rest_encoder``.

    The predictor and joiner state carry across the switch. Under
    ``carry_shared`` the left-context cache of every layer object used by
    both encoders is kept; layers only in ``rest_encoder`` start empty.
    ``reset_all`` empties every cache at the switch.
    """
    feats = np.asarray(feats, dtype=np.float64)
    T = feats.shape[0]
    begin, rest = model.encoder(plan.begin_encoder), model.encoder(plan.rest_encoder)
    cfg = begin.cfg
    plan.validate(T, cfg.segment_frames)
    frame_ms = cfg.frame_ms
    if arrival is None:
        arrival = realtime_schedule(T, frame_ms)
    st = _prepare(feats, arrival, frame_ms, utt_id, model.predictor, model.joiner, clock, max_symbols)
    cache = begin.new_cache()
    switched = False
    for start, n_seg, n_rc in segment_plan(T, cfg):
        if start >= plan.switch_frames and not switched:
            switched = True
            if plan.cache_policy == "carry_shared":
                cache.retain(rest.layers)
            else:
                cache = rest.new_cache()
        enc, idx = (rest, plan.rest_encoder) if switched else (begin, plan.begin_encoder)
        st.run_segment(enc, f"enc{idx + 1}", cache, start, n_seg, n_rc)
    return st.trace


def decode_offline(feats, encoder: Encoder, predictor: Predictor, joiner: Joiner, max_symbols: int = 4):
    """Full-sequence (masked) encode followed by greedy search."""
    with no_grad():
        h, _ = encoder.forward(np.asarray(feats, dtype=np.float64))
    return greedy_decode(h.data, predictor, joiner, max_symbols)
