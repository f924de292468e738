"""Block-processing streaming transformer encoder.

Frames are cut into segments of ``S`` frames. A frame in segment
``[start, end]`` sees keys ``start - L .. end + R``. In full-sequence mode
each segment's ``R`` look-ahead frames are duplicated ("hard copies") and
prepended to the sequence; copies and segment frames share one key set, so
stacked layers never widen the receptive field past ``end + R``. At decode
time the keys/values of the last ``L`` frames are cached per layer.

Layer indices in dropout plans are 1-based, everything else is 0-based.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import LayerNorm, Linear, Module, dropout_apply
from .rng import RngStream
from .tensor import Tensor, as_tensor, concat, masked_softmax, no_grad, relu


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    segment_frames: int = 4
    left_context_frames: int = 8
    right_context_frames: int = 1
    dropout_rate: float = 0.1
    frame_ms: float = 10.0
    input_dim: int = 8
    out_dim: int = 32

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.segment_frames < 1:
            raise ValueError("segment_frames must be >= 1")
        if self.left_context_frames < 0 or self.right_context_frames < 0:
            raise ValueError("context sizes must be >= 0")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# -- dropout plans ---------------------------------------------------------------

SCHEMES = ("random", "group", "range_step")


@dataclass(frozen=True)
class DropoutPlan:
    scheme: str
    droppable: tuple[int, ...]
    layer_drop_rate: float = 0.1

    def sample(self, rng: RngStream) -> set[int]:
        """Draw the set of layers (1-based) skipped for one training pass."""
        if not self.droppable or self.layer_drop_rate == 0.0:
            return set()
        if self.scheme == "group":
            return set(self.droppable) if rng.bernoulli(self.layer_drop_rate) else set()
        hits = rng.bernoulli(self.layer_drop_rate, len(self.droppable))
        return {layer for layer, hit in zip(self.droppable, hits) if hit}


_RANGE = re.compile(r"^(\d+)-(\d+):(\d+)$")


def parse_dropout_plan(spec: str, num_layers: int, rate: float = 0.1) -> DropoutPlan:
    """Parse ``random``, ``group:i,j,...``, ``a-b:s`` or ``none``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("layer drop rate must be in [0, 1]")
    spec = spec.strip()
    if spec in ("", "none"):
        return DropoutPlan("range_step", (), rate)
    if spec == "random":
        return DropoutPlan("random", tuple(range(1, num_layers + 1)), rate)
    if spec.startswith("group:"):
        body = spec[len("group:"):]
        try:
            layers = tuple(sorted({int(tok) for tok in body.split(",") if tok.strip()}))
        except ValueError:
            raise ValueError(f"malformed group plan {spec!r}") from None
        if not layers:
            raise ValueError(f"empty group plan {spec!r}")
        _check_range(layers, num_layers, spec)
        return DropoutPlan("group", layers, rate)
    m = _RANGE.match(spec)
    if not m:
        raise ValueError(f"malformed dropout plan {spec!r}")
    a, b, s = (int(g) for g in m.groups())
    if a < 1 or b < a or s < 1:
        raise ValueError(f"malformed dropout plan {spec!r}")
    layers = tuple(range(a, b + 1, s))
    _check_range(layers, num_layers, spec)
    return DropoutPlan("range_step", layers, rate)


def _check_range(layers, num_layers, spec):
    bad = [i for i in layers if i < 1 or i > num_layers]
    if bad:
        raise ValueError(f"plan {spec!r}: layer {bad[0]} outside 1..{num_layers}")


# -- block layout ------------------------------------------------------------------

@dataclass
class BlockLayout:
    """Segment partition, plain attention mask and hard-copy layout for ``T`` frames.

    ``extended_mask`` indexes rows/keys of ``[copies..., frames...]``.
    """
    T: int
    S: int
    L: int
    R: int
    segments: list[tuple[int, int]]
    segment_of: np.ndarray
    mask: np.ndarray
    rc_src: np.ndarray
    rc_seg: np.ndarray
    extended_mask: np.ndarray = field(repr=False)

    @property
    def n_copies(self) -> int:
        return len(self.rc_src)

    def seg_end(self, t: int) -> int:
        return self.segments[self.segment_of[t]][1]


def build_block_mask(T: int, S: int, L: int, R: int) -> BlockLayout:
    if T < 1:
        raise ValueError("T must be >= 1")
    segments = [(s, min(s + S, T) - 1) for s in range(0, T, S)]
    segment_of = np.repeat(np.arange(len(segments)), S)[:T]

    frames = np.arange(T)
    lo = np.array([max(0, segments[i][0] - L) for i in segment_of])
    hi = np.array([min(T - 1, segments[i][1] + R) for i in segment_of])
    mask = (frames[None, :] >= lo[:, None]) & (frames[None, :] <= hi[:, None])

    rc_src, rc_seg = [], []
    for i, (_, end) in enumerate(segments):
        for k in range(end + 1, min(end + R, T - 1) + 1):
            rc_src.append(k)
            rc_seg.append(i)
    rc_src = np.array(rc_src, dtype=np.int64)
    rc_seg = np.array(rc_seg, dtype=np.int64)

    n = len(rc_src)
    row_seg = np.concatenate([rc_seg, segment_of])
    key_is_copy = np.arange(n + T) < n
    key_frame = np.concatenate([rc_src, frames])
    seg_lo = np.array([max(0, s - L) for s, _ in segments])
    seg_hi = np.array([e for _, e in segments])
    lo_r, hi_r = seg_lo[row_seg], seg_hi[row_seg]
    main_ok = (~key_is_copy)[None, :] & (key_frame[None, :] >= lo_r[:, None]) & (key_frame[None, :] <= hi_r[:, None])
    copy_ok = key_is_copy[None, :] & (np.concatenate([rc_seg, np.full(T, -1)])[None, :] == row_seg[:, None])
    return BlockLayout(T, S, L, R, segments, segment_of, mask, rc_src, rc_seg, main_ok | copy_ok)


# -- layers --------------------------------------------------------------------------

def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, n, d = x.shape
    y = x.reshape(tuple(lead) + (n, H, d // H))
    nd = y.ndim
    return y.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, n, dh = x.shape
    nd = x.ndim
    y = x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return y.reshape(tuple(lead) + (n, H * dh))


class EmformerLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg: EncoderConfig, rng: RngStream):
        d, f = cfg.model_dim, cfg.ffn_dim
        self.ln_attn = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn_in = Linear(d, f, rng)
        self.ffn_out = Linear(f, d, rng)
        self.num_heads = cfg.num_heads
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x: Tensor, mask, rng=None, training=False, cache_kv=None):
        """Returns ``(out, (k, v))`` where ``k, v`` are this call's new keys/values.

        ``cache_kv`` (arrays ``[c, d]``) is prepended to the keys and values.
        """
        H = self.num_heads
        y = self.ln_attn(x)
        q, k, v = self.wq(y), self.wk(y), self.wv(y)
        keys, vals = k, v
        if cache_kv is not None and cache_kv[0].shape[0]:
            keys = concat([Tensor(cache_kv[0]), k], axis=-2)
            vals = concat([Tensor(cache_kv[1]), v], axis=-2)
        qh, kh, vh = _split_heads(q, H), _split_heads(keys, H), _split_heads(vals, H)
        dh = qh.shape[-1]
        scores = (qh @ kh.transpose(_swap_last(kh.ndim))) * (1.0 / math.sqrt(dh))
        if mask is not None:
            mask = np.expand_dims(mask, -3)
        probs = masked_softmax(scores, mask)
        ctx = _merge_heads(probs @ vh)
        attn = dropout_apply(self.wo(ctx), self.dropout_rate, rng, training)
        x = x + attn
        z = relu(self.ffn_in(self.ln_ffn(x)))
        z = dropout_apply(z, self.dropout_rate, rng, training)
        z = dropout_apply(self.ffn_out(z), self.dropout_rate, rng, training)
        return x + z, (k, v)


def _swap_last(nd: int) -> tuple[int, ...]:
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


def layer_param_count(model_dim: int, ffn_dim: int) -> int:
    d, f = model_dim, ffn_dim
    return 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)


class EncoderHead(Module):
    def __init__(self, cfg: EncoderConfig, rng: RngStream):
        self.norm = LayerNorm(cfg.model_dim)
        self.proj = Linear(cfg.model_dim, cfg.out_dim, rng)

    def __call__(self, x):
        return self.proj(self.norm(x))


@dataclass
class StreamCache:
    """Per-layer left-context keys/values, keyed by layer object identity.

    Keying by identity lets two encoder views that share layer objects
    share cache entries.
    """
    left_context: int
    model_dim: int
    kv: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    frames_consumed: int = 0

    def get(self, layer) -> tuple[np.ndarray, np.ndarray]:
        empty = np.zeros((0, self.model_dim))
        return self.kv.get(id(layer), (empty, empty))

    def lengths(self, layers) -> list[int]:
        return [self.get(layer)[0].shape[0] for layer in layers]

    def push(self, layer, k: np.ndarray, v: np.ndarray) -> None:
        ck, cv = self.get(layer)
        ck = np.concatenate([ck, k])
        cv = np.concatenate([cv, v])
        if self.left_context == 0:
            ck, cv = ck[:0], cv[:0]
        else:
            ck, cv = ck[-self.left_context:], cv[-self.left_context:]
        self.kv[id(layer)] = (ck, cv)

    def retain(self, layers) -> None:
        keep = {id(layer) for layer in layers}
        self.kv = {k: v for k, v in self.kv.items() if k in keep}


class Encoder(Module):
    """An encoder: input projection, a list of layers and an output head.

    Instances built by :func:`prune_encoder` or by a multi-encoder model share
    layer objects with their parent (a *view*).
    """

    def __init__(self, cfg: EncoderConfig, rng: RngStream | None = None, *,
                 input_proj=None, layers=None, head=None):
        self.cfg = cfg
        if layers is None:
            if rng is None:
                raise ValueError("rng required to initialise a fresh encoder")
            input_proj = Linear(cfg.input_dim, cfg.model_dim, rng)
            layers = [EmformerLayer(cfg, rng) for _ in range(cfg.num_layers)]
            head = EncoderHead(cfg, rng)
        self.input_proj = input_proj
        self.layers = list(layers)
        self.head = head

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layout(self, T: int) -> BlockLayout:
        c = self.cfg
        return build_block_mask(T, c.segment_frames, c.left_context_frames, c.right_context_frames)

    # -- full-sequence path ---------------------------------------------------------
    def embed(self, x, lengths: Sequence[int] | None = None):
        """Project features and lay out hard copies.

        ``x`` is ``[T, F]`` or padded ``[B, T, F]``. Returns
        ``(x_ext, layout, mask)`` with ``x_ext`` of shape ``[..., n_copies + T, d]``.
        """
        x = as_tensor(x)
        T = x.shape[-2]
        lay = self.layout(T)
        proj = self.input_proj(x)
        x_ext = concat([proj[..., lay.rc_src, :], proj], axis=-2) if lay.n_copies else proj
        mask = lay.extended_mask
        if lengths is not None:
            if x.ndim != 3:
                raise ValueError("lengths given for an unbatched input")
            key_frame = np.concatenate([lay.rc_src, np.arange(T)])
            lens = np.asarray(lengths)[:, None]
            key_ok = key_frame[None, :] < lens
            mask = mask[None, :, :] & key_ok[:, None, :]
            empty = ~mask.any(axis=-1)
            mask = mask | (empty[:, :, None] & np.eye(mask.shape[-1], dtype=bool)[None])
        return x_ext, lay, mask

    def run_layers(self, x_ext, mask, layers, rng=None, training=False, skip=frozenset(), collect=False):
        """Apply ``layers`` in order, skipping 0-based positions in ``skip``.

        With ``collect`` also returns the input to every layer position plus
        the final output (``len(layers) + 1`` tensors).
        """
        seen = [x_ext]
        for i, layer in enumerate(layers):
            if i not in skip:
                x_ext, _ = layer(x_ext, mask, rng, training)
            seen.append(x_ext)
        return (x_ext, seen) if collect else x_ext

    def project_out(self, x_ext, lay: BlockLayout) -> Tensor:
        main = x_ext[..., lay.n_copies:, :] if lay.n_copies else x_ext
        return self.head(main)

    def forward(self, x, plan: DropoutPlan | None = None, rng: RngStream | None = None,
                mode: str = "eval", prune: set[int] | frozenset = frozenset(),
                lengths=None) -> tuple[Tensor, list[int]]:
        """Full-sequence masked forward.

        In ``train`` mode the plan's layers are sampled for skipping and
        feature dropout is active. ``prune`` (1-based) skips layers in
        either mode. Returns ``(h, survived)`` with ``survived`` 1-based.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        training = mode == "train"
        if training and rng is None:
            raise ValueError("train mode needs an rng")
        dropped = set(prune)
        if training and plan is not None:
            dropped |= plan.sample(rng)
        skip = frozenset(i - 1 for i in dropped)
        x_ext, lay, mask = self.embed(x, lengths)
        x_ext = self.run_layers(x_ext, mask, self.layers, rng, training, skip)
        survived = [i + 1 for i in range(self.depth) if i not in skip]
        return self.project_out(x_ext, lay), survived

    __call__ = forward

    # -- streaming path --------------------------------------------------------------
    def new_cache(self) -> StreamCache:
        return StreamCache(self.cfg.left_context_frames, self.cfg.model_dim)

    def forward_stream(self, segment, lookahead, cache: StreamCache) -> Tensor:
        """Encode one segment given its look-ahead frames and the running cache.

        Returns outputs for the segment frames only; the cache gains this
        segment's keys/values (trimmed to ``L`` frames per layer).
        """
        if cache.left_context != self.cfg.left_context_frames or cache.model_dim != self.cfg.model_dim:
            raise ValueError("stream cache does not match encoder config")
        seg = np.asarray(segment.data if isinstance(segment, Tensor) else segment, dtype=np.float64)
        la = np.asarray(lookahead.data if isinstance(lookahead, Tensor) else lookahead, dtype=np.float64)
        if seg.shape[0] > self.cfg.segment_frames or la.shape[0] > self.cfg.right_context_frames:
            raise ValueError("segment or look-ahead longer than configured")
        n = seg.shape[0]
        with no_grad():
            x = self.input_proj(Tensor(np.concatenate([seg, la.reshape(-1, seg.shape[1])])))
            for layer in self.layers:
                x, (k, v) = layer(x, None, cache_kv=cache.get(layer))
                cache.push(layer, k.data[:n], v.data[:n])
            out = self.head(x[:n])
        cache.frames_consumed += n
        return out


def encoder_forward_train(encoder: Encoder, x, plan=None, rng=None, mode="train", prune=frozenset()):
    return encoder.forward(x, plan, rng, mode, prune)


def encoder_forward_stream(encoder: Encoder, segment, lookahead, cache: StreamCache):
    return encoder.forward_stream(segment, lookahead, cache), cache


def prune_encoder(encoder: Encoder, plan: DropoutPlan) -> Encoder:
    """View of ``encoder`` with the plan's droppable layers removed."""
    drop = set(plan.droppable)
    if any(i < 1 or i > encoder.depth for i in drop):
        raise ValueError("plan refers to layers outside the encoder")
    kept = [layer for i, layer in enumerate(encoder.layers, start=1) if i not in drop]
    return Encoder(encoder.cfg, input_proj=encoder.input_proj, layers=kept, head=encoder.head)


def stream_full(encoder: Encoder, x: np.ndarray) -> np.ndarray:
    """Encode ``x`` segment by segment through a fresh cache (eval mode)."""
    c = encoder.cfg
    T = x.shape[0]
    cache = encoder.new_cache()
    outs = []
    for start in range(0, T, c.segment_frames):
        end = min(start + c.segment_frames, T)
        la_end = min(end + c.right_context_frames, T)
        outs.append(encoder.forward_stream(x[start:end], x[end:la_end], cache).data)
    return np.concatenate(outs)
