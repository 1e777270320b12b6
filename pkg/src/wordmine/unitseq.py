"""Discrete-unit speech: segmentation, Needleman-Wunsch search, frame DTW."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import kernels
from .errors import DimensionMismatch, EmptyInput, FormatError, ZeroVector


@dataclass(frozen=True)
class UnitSequence:
    utterance_id: str
    units: tuple[int, ...]
    frame_duration_ms: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        if any(u < 0 for u in self.units):
            raise ValueError(f"{self.utterance_id}: unit ids must be non-negative")
        if self.frame_duration_ms <= 0:
            raise ValueError("frame_duration_ms must be positive")

    def check_vocab(self, vocab_size: int) -> None:
        if self.units and max(self.units) >= vocab_size:
            raise ValueError(f"{self.utterance_id}: unit id >= vocabulary size {vocab_size}")

    def __len__(self):
        return len(self.units)


@dataclass(frozen=True)
class Segment:
    unit: int
    start: int
    end: int

    def __iter__(self):
        return iter((self.unit, self.start, self.end))


@dataclass(frozen=True)
class SegmentedUtterance:
    utterance_id: str
    segments: tuple[Segment, ...]

    def __len__(self):
        return len(self.segments)

    @property
    def symbols(self) -> np.ndarray:
        return np.fromiter((s.unit for s in self.segments), dtype=np.int64, count=len(self.segments))

    @property
    def n_frames(self) -> int:
        return self.segments[-1].end if self.segments else 0

    def expand(self) -> list[int]:
        out: list[int] = []
        for s in self.segments:
            out.extend([s.unit] * (s.end - s.start))
        return out

    def frame_span(self, span: tuple[int, int]) -> tuple[int, int]:
        """Convert a half-open segment-index span to a half-open frame span."""
        a, b = span
        if a == b:
            f = self.segments[a].start if a < len(self.segments) else self.n_frames
            return f, f
        return self.segments[a].start, self.segments[b - 1].end

    def slice(self, span: tuple[int, int], utterance_id: str | None = None) -> "SegmentedUtterance":
        """Sub-utterance covering ``span`` with frames re-based to zero."""
        a, b = span
        if not 0 <= a <= b <= len(self.segments):
            raise IndexError(f"span {span} outside {len(self.segments)} segments")
        picked = self.segments[a:b]
        off = picked[0].start if picked else 0
        segs = tuple(Segment(s.unit, s.start - off, s.end - off) for s in picked)
        return SegmentedUtterance(utterance_id or self.utterance_id, segs)

    @classmethod
    def from_symbols(cls, utterance_id: str, symbols: Iterable[int]) -> "SegmentedUtterance":
        """One single-frame segment per symbol, taken as given (no merging)."""
        segs = tuple(Segment(int(u), k, k + 1) for k, u in enumerate(symbols))
        return cls(utterance_id, segs)


@dataclass(frozen=True)
class ScoringParams:
    match: float = 1.0
    mismatch: float = -1.0
    gap: float = -1.0

    def __post_init__(self):
        if self.gap > 0:
            raise ValueError("gap score must be <= 0 for free-flank alignment")
        if self.mismatch > self.match:
            raise ValueError("mismatch score must not exceed match score")


@dataclass(frozen=True)
class AlignmentResult:
    score: float
    raw_score: float
    target_span: tuple[int, int]
    ops: str = field(repr=False)


@dataclass(frozen=True)
class FrameFeatureSequence:
    utterance_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise EmptyInput(f"{self.utterance_id}: frames must be a non-empty 2-D array")
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def segment_units(seq: UnitSequence) -> SegmentedUtterance:
    """Run-length merge consecutive identical units into segments."""
    units = seq.units
    if not units:
        raise EmptyInput(f"{seq.utterance_id}: empty unit sequence")
    arr = np.asarray(units, dtype=np.int64)
    change = np.flatnonzero(arr[1:] != arr[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [arr.size]))
    segs = tuple(Segment(int(arr[s]), int(s), int(e)) for s, e in zip(starts, ends))
    return SegmentedUtterance(seq.utterance_id, segs)


def _traceback(P, query, target, n, j_end):
    i, j = n, j_end
    ops = []
    while i > 0:
        p = P[i, j]
        if p == kernels.DIAG:
            ops.append("M" if query[i - 1] == target[j - 1] else "S")
            i -= 1
            j -= 1
        elif p == kernels.UP:
            ops.append("D")
            i -= 1
        else:
            ops.append("I")
            j -= 1
    return j, "".join(reversed(ops))


def nw_align(
    query: SegmentedUtterance,
    target: SegmentedUtterance,
    scoring: ScoringParams = ScoringParams(),
) -> AlignmentResult:
    """Align ``query`` to the best-matching span of ``target``.

    Gaps before and after the matched span of the target are free; every query
    segment is consumed. Among equal-scoring end positions the leftmost wins.
    ``ops`` uses ``M``/``S``/``D``/``I`` for match, substitute, query segment
    against a gap, and target segment against a gap.
    """
    if len(query) == 0 or len(target) == 0:
        raise EmptyInput("nw_align needs non-empty query and target")
    q = query.symbols
    t = target.symbols
    D, P = kernels.nw_fill(q, t, scoring.match, scoring.mismatch, scoring.gap)
    n = q.shape[0]
    j_end = int(np.argmax(D[n]))
    raw = float(D[n, j_end])
    j_start, ops = _traceback(P, q, t, n, j_end)
    return AlignmentResult(raw / n, raw, (j_start, j_end), ops)


def score_ops(ops: str, scoring: ScoringParams = ScoringParams()) -> float:
    """Re-score an edit trace; leading/trailing target gaps are outside ``ops``."""
    table = {"M": scoring.match, "S": scoring.mismatch, "D": scoring.gap, "I": scoring.gap}
    return float(sum(table[o] for o in ops))


def _unit_rows(x: np.ndarray, who: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector(f"{who} contains an all-zero frame")
    return x / norms


def cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine distance between rows of ``a`` and rows of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"frame dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    c = 1.0 - _unit_rows(a, "a") @ _unit_rows(b, "b").T
    return np.clip(c, 0.0, 2.0)


def dtw_distance(a: FrameFeatureSequence, b: FrameFeatureSequence) -> float:
    """Path-length normalised DTW with per-frame cosine distance."""
    cost = cosine_cost(a.frames, b.frames)
    D, L, _ = kernels.dtw_fill(cost)
    n, m = cost.shape
    return float(D[n, m] / L[n, m])


def subsequence_dtw(query: FrameFeatureSequence, target: FrameFeatureSequence) -> tuple[float, tuple[int, int]]:
    """Best normalised DTW match of the whole query inside ``target``.

    Returns ``(distance, (start_frame, end_frame))`` with a half-open frame
    span. The end column with the lowest normalised cost wins; ties go left.
    """
    cost = cosine_cost(query.frames, target.frames)
    D, L, B = kernels.subseq_dtw_fill(cost)
    n = cost.shape[0]
    norm = D[n, 1:] / L[n, 1:]
    j = int(np.argmin(norm))
    return float(norm[j]), (int(B[n, j + 1]), j + 1)


# ---------------------------------------------------------------------------
# line-delimited JSON I/O
# ---------------------------------------------------------------------------


def read_unit_sequences(path) -> Iterator[UnitSequence]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield UnitSequence(rec["utterance_id"], tuple(rec["units"]), float(rec.get("frame_duration_ms", 20.0)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad unit record ({exc})") from exc


def write_unit_sequences(path, seqs: Iterable[UnitSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            rec = {"utterance_id": s.utterance_id, "units": list(s.units), "frame_duration_ms": s.frame_duration_ms}
            fh.write(json.dumps(rec) + "\n")


def read_segmented(path) -> list[SegmentedUtterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                segs = tuple(Segment(int(u), int(s), int(e)) for u, s, e in rec["segments"])
                out.append(SegmentedUtterance(rec["utterance_id"], segs))
    return out


def write_segmented(path, utts: Iterable[SegmentedUtterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            rec = {"utterance_id": u.utterance_id, "segments": [list(s) for s in u.segments]}
            fh.write(json.dumps(rec) + "\n")


def group_frames(ids: list[str], matrix: np.ndarray) -> dict[str, FrameFeatureSequence]:
    """Split a stacked frame matrix into per-utterance sequences.

    ``ids[r]`` names the utterance that row ``r`` belongs to; rows of one
    utterance must be contiguous.
    """
    out: dict[str, FrameFeatureSequence] = {}
    if len(ids) != matrix.shape[0]:
        raise FormatError("id sidecar length differs from row count")
    start = 0
    for r in range(1, len(ids) + 1):
        if r == len(ids) or ids[r] != ids[start]:
            uid = ids[start]
            if uid in out:
                raise FormatError(f"frames for {uid!r} are not contiguous")
            out[uid] = FrameFeatureSequence(uid, matrix[start:r])
            start = r
    return out


__all__ = [
    "AlignmentResult",
    "FrameFeatureSequence",
    "ScoringParams",
    "Segment",
    "SegmentedUtterance",
    "UnitSequence",
    "cosine_cost",
    "dtw_distance",
    "group_frames",
    "nw_align",
    "read_segmented",
    "read_unit_sequences",
    "score_ops",
    "segment_units",
    "subsequence_dtw",
    "write_segmented",
    "write_unit_sequences",
]
