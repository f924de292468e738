"""Word error rate and latency reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .decoding import DecodeTrace
from .flops import chunk_macs, flops_count, linear_macs  # noqa: F401  (re-exported)


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len if self.ref_len else 0.0

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_len + other.ref_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["errors"] = self.errors
        d["wer"] = self.wer
        return dict(sorted(d.items()))


def edit_ops(ref: Sequence, hyp: Sequence) -> list[str]:
    """Minimum-edit alignment as a list of ``'='``, ``'S'``, ``'I'``, ``'D'``.

    Among equal-cost alignments the backtrace (from the end) prefers the
    diagonal, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i, j - 1] + 1, d[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append("=" if ref[i - 1] == hyp[j - 1] else "S")
            i, j = i - 1, j - 1
        elif j and d[i, j] == d[i, j - 1] + 1:
            ops.append("I")
            j -= 1
        else:
            ops.append("D")
            i -= 1
    return ops[::-1]


def wer(ref: Sequence, hyp: Sequence) -> WerReport:
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    ops = edit_ops(list(ref), list(hyp))
    return WerReport(ops.count("S"), ops.count("D"), ops.count("I"), len(ref))


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> WerReport:
    total = WerReport()
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total


# -- latency ------------------------------------------------------------------------

@dataclass
class UttLatency:
    utt_id: str
    rtf: float
    spl_ms: float
    audio_ms: float
    processing_ms: float
    total_flops: int


@dataclass
class LatencyReport:
    per_utt: list[UttLatency] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"count": len(self.per_utt)}
        for key in ("rtf", "spl_ms"):
            vals = np.array([getattr(u, key) for u in self.per_utt])
            out[key] = _stats(vals)
        out["total_flops"] = int(sum(u.total_flops for u in self.per_utt))
        return out

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "per_utt": [asdict(u) for u in self.per_utt]}

    def to_json(self) -> str:
        return to_json(self.to_dict())


def _stats(vals: np.ndarray) -> dict:
    if vals.size == 0:
        return {"mean": None, "p50": None, "p99": None}
    vals = np.sort(vals)   # fixed summation order: aggregates ignore utterance order
    return {"mean": float(vals.mean()), "p50": float(np.percentile(vals, 50)),
            "p99": float(np.percentile(vals, 99))}


def latency_metrics(trace: DecodeTrace) -> UttLatency:
    """RTF and the final-emission latency proxy for one decoded utterance."""
    if trace.final_emission_ms is None or not trace.arrival_ms:
        raise ValueError(f"{trace.utt_id}: trace has no final emission")
    audio = trace.audio_ms
    if audio <= 0:
        raise ValueError("audio duration must be > 0")
    return UttLatency(trace.utt_id, trace.processing_ms / audio,
                      trace.final_emission_ms - trace.arrival_ms[-1], audio,
                      trace.processing_ms, trace.total_flops)


def latency_report(traces: Iterable[DecodeTrace]) -> LatencyReport:
    return LatencyReport([latency_metrics(t) for t in traces])


def to_json(obj) -> str:
    """Stable, diffable JSON."""
    return json.dumps(obj, sort_keys=True, indent=2)
