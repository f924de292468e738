"""Synthetic streaming-transduction corpus and the ``DETD`` dataset format.

Each token owns a fixed prototype vector. An utterance is a token sequence
(no immediate repeats, so frame labels collapse back to the transcript);
each token spans a random number of raw frames, each frame being the
prototype plus Gaussian noise.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import RngStream

MAGIC = b"DETD"
VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed, truncated or incompatible dataset file."""


@dataclass
class GenConfig:
    vocab_size: int = 16
    feature_dim: int = 8
    tokens_per_utt: tuple[int, int] = (3, 8)
    frames_per_token: tuple[int, int] = (2, 5)
    noise_std: float = 0.5
    wake_word: tuple[int, ...] = ()
    frame_stack: int = 1
    prototype_seed: int = 1234
    prototype_scale: float = 1.0

    def __post_init__(self):
        self.tokens_per_utt = tuple(self.tokens_per_utt)
        self.frames_per_token = tuple(self.frames_per_token)
        self.wake_word = tuple(self.wake_word)
        lo, hi = self.tokens_per_utt
        flo, fhi = self.frames_per_token
        if lo < 0 or hi < lo or flo < 1 or fhi < flo:
            raise ValueError("empty token or frame range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.frame_stack < 1 or flo < self.frame_stack:
            raise ValueError("frame_stack must be >= 1 and <= the shortest token span")
        if self.vocab_size < 2:
            raise ValueError("need at least two token types")
        if any(not 0 <= t < self.vocab_size for t in self.wake_word):
            raise ValueError("wake word token outside vocabulary")
        if any(a == b for a, b in zip(self.wake_word, self.wake_word[1:])):
            raise ValueError("wake word may not repeat a token back to back")

    @property
    def model_input_dim(self) -> int:
        return self.feature_dim * self.frame_stack

    def prototypes(self) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=self.prototype_seed))
        return self.prototype_scale * rng.normal(size=(self.vocab_size, self.feature_dim))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class Utterance:
    id: str
    features: np.ndarray          # [T, F] float32
    tokens: list[int]
    alignment: list[int]          # per-frame class label, len T

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Utterance) and self.id == other.id
                and self.features.dtype == other.features.dtype
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and list(self.tokens) == list(other.tokens)
                and list(self.alignment) == list(other.alignment))


def collapse(labels: Sequence[int]) -> list[int]:
    """Remove consecutive duplicates."""
    out: list[int] = []
    for c in labels:
        if not out or out[-1] != c:
            out.append(int(c))
    return out


def token_end_frames(alignment: Sequence[int]) -> list[int]:
    """Last frame of every run in ``alignment`` (a reference emission time per token)."""
    a = list(alignment)
    return [t for t in range(len(a)) if t == len(a) - 1 or a[t + 1] != a[t]]


def _sample_tokens(rng: RngStream, cfg: GenConfig) -> list[int]:
    lo, hi = cfg.tokens_per_utt
    n = int(rng.integers(lo, hi + 1))
    draws = rng.integers(0, cfg.vocab_size - 1, n)
    tokens = list(cfg.wake_word)
    for d in draws:
        d = int(d)
        if tokens and d >= tokens[-1]:
            d += 1          # uniform over tokens != previous
        tokens.append(d)
    return tokens


def gen_utterance(rng: RngStream, cfg: GenConfig, utt_id: str = "utt") -> Utterance:
    tokens = _sample_tokens(rng, cfg)
    flo, fhi = cfg.frames_per_token
    spans = rng.integers(flo, fhi + 1, len(tokens)) if tokens else np.zeros(0, dtype=np.int64)
    raw_labels = np.repeat(np.asarray(tokens, dtype=np.int64), spans)
    if raw_labels.size == 0:
        raise ValueError("generated an empty utterance; raise tokens_per_utt")
    protos = cfg.prototypes()
    raw = protos[raw_labels]
    if cfg.noise_std > 0:
        raw = raw + rng.normal(raw.shape, cfg.noise_std)
    feats, labels = stack_frames(raw, raw_labels, cfg.frame_stack)
    return Utterance(utt_id, feats.astype(np.float32), list(tokens), [int(c) for c in labels])


def stack_frames(raw: np.ndarray, labels: np.ndarray, k: int):
    """Concatenate ``k`` consecutive frames; the last group is padded by repetition.

    A stacked frame is labelled by its first raw frame, so any token spanning
    at least ``k`` raw frames survives stacking.
    """
    if k == 1:
        return raw, labels
    T = raw.shape[0]
    n = -(-T // k)
    pad = n * k - T
    if pad:
        raw = np.concatenate([raw, np.repeat(raw[-1:], pad, axis=0)])
    return raw.reshape(n, k * raw.shape[1]), labels[::k]


def gen_corpus(seed: int, n: int, cfg: GenConfig, prefix: str = "utt") -> list[Utterance]:
    """``n`` utterances; utterance ``i`` depends only on ``(seed, i, cfg)``."""
    root = RngStream(seed)
    return [gen_utterance(root.fork(i), cfg, f"{prefix}{i:06d}") for i in range(n)]


# -- DETD container ----------------------------------------------------------------

def write_dataset(path, utterances: Iterable[Utterance]) -> None:
    utts = list(utterances)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(utts))]
    for u in utts:
        name = u.id.encode("utf-8")
        feats = np.ascontiguousarray(u.features, dtype="<f4")
        T, F = feats.shape
        if len(u.alignment) != T:
            raise ValueError(f"{u.id}: alignment length {len(u.alignment)} != {T} frames")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<III", T, F, len(u.tokens)))
        parts.append(feats.tobytes())
        parts.append(np.asarray(u.tokens, dtype="<u4").tobytes())
        parts.append(np.asarray(u.alignment, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError("truncated dataset file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dataset(path) -> list[Utterance]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise DatasetFormatError("bad magic; not a DETD file")
    version, count = r.unpack("<IQ")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported DETD version {version}")
    utts = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            uid = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError("utterance id is not UTF-8") from exc
        T, F, U = r.unpack("<III")
        feats = np.frombuffer(r.take(4 * T * F), dtype="<f4").reshape(T, F).astype(np.float32)
        tokens = np.frombuffer(r.take(4 * U), dtype="<u4").astype(int).tolist()
        align = np.frombuffer(r.take(4 * T), dtype="<u4").astype(int).tolist()
        utts.append(Utterance(uid, feats, tokens, align))
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after last record")
    return utts
