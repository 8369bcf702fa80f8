"""Boundary accuracy, latency and word error rate.

Boundary positions are 1-based downsampled frames (40 ms each).  Latencies
ignore computation time: a frame waits for the end of its segment, plus the
30 ms right context of the convolutional frontend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .transformer import CNN_CONTEXT_MS, FRAME_MS

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass
class EditAlignment:
    """Optimal alignment of a hypothesis sequence against a reference.

    ``ops`` lists ``(op, ref_index, hyp_index)`` in order; an index is None
    on the side the operation skips.
    """

    ops: list
    n_ref: int
    n_hyp: int

    def count(self, op: str) -> int:
        return sum(1 for o in self.ops if o[0] == op)

    @property
    def sub(self) -> int:
        return self.count(SUB)

    @property
    def dels(self) -> int:
        return self.count(DEL)

    @property
    def ins(self) -> int:
        return self.count(INS)

    @property
    def matches(self) -> int:
        return self.count(MATCH)

    @property
    def cost(self) -> int:
        return self.sub + self.dels + self.ins


def align_sequences(reference: Sequence, hypothesis: Sequence) -> EditAlignment:
    """Levenshtein alignment.

    Among minimum-cost alignments the one with the most exact matches is
    chosen; remaining ties prefer match, then substitution, deletion and
    insertion while tracing back from the end.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # cost table holds (edits, -matches) compared lexicographically
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    neg_matches = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            options = (
                (cost[i - 1, j - 1] + (0 if same else 1), neg_matches[i - 1, j - 1] - (1 if same else 0)),
                (cost[i - 1, j] + 1, neg_matches[i - 1, j]),
                (cost[i, j - 1] + 1, neg_matches[i, j - 1]),
            )
            cost[i, j], neg_matches[i, j] = min(options)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        here = (cost[i, j], neg_matches[i, j])
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            diag = (cost[i - 1, j - 1] + (0 if same else 1), neg_matches[i - 1, j - 1] - (1 if same else 0))
            if diag == here:
                ops.append((MATCH if same else SUB, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and (cost[i - 1, j] + 1, neg_matches[i - 1, j]) == here:
            ops.append((DEL, i - 1, None))
            i -= 1
            continue
        ops.append((INS, None, j - 1))
        j -= 1
    ops.reverse()
    return EditAlignment(ops, n, m)


def _check_increasing(seq, name: str) -> list[int]:
    seq = [int(s) for s in seq]
    if any(b <= a for a, b in zip(seq, seq[1:])):
        raise ValueError(f"{name} boundaries must be strictly increasing")
    return seq


@dataclass
class BoundaryEval:
    sub: int
    dels: int
    ins: int
    n_ref: int
    n_hyp: int
    alignment: EditAlignment = field(repr=False)

    @property
    def matches(self) -> int:
        return self.n_ref - self.sub - self.dels

    def rates(self) -> dict:
        denom = max(self.n_ref, 1)
        return {"sub": self.sub / denom, "del": self.dels / denom, "ins": self.ins / denom}

    def precision(self) -> float:
        return self.matches / self.n_hyp if self.n_hyp else 0.0

    def recall(self) -> float:
        return self.matches / self.n_ref if self.n_ref else 0.0

    def f1(self) -> float:
        p, r = self.precision(), self.recall()
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            "sub": self.sub,
            "del": self.dels,
            "ins": self.ins,
            "n_ref": self.n_ref,
            "n_hyp": self.n_hyp,
            "rates": self.rates(),
            "ops": [list(o) for o in self.alignment.ops],
        }


def boundary_edit_distance(predicted, reference) -> BoundaryEval:
    pred = _check_increasing(predicted, "predicted")
    ref = _check_increasing(reference, "reference")
    al = align_sequences(ref, pred)
    return BoundaryEval(al.sub, al.dels, al.ins, len(ref), len(pred), al)


def merge_boundary_evals(evals: Sequence[BoundaryEval]) -> dict:
    sub = sum(e.sub for e in evals)
    dels = sum(e.dels for e in evals)
    ins = sum(e.ins for e in evals)
    n_ref = sum(e.n_ref for e in evals)
    n_hyp = sum(e.n_hyp for e in evals)
    matches = n_ref - sub - dels
    precision = matches / n_hyp if n_hyp else 0.0
    recall = matches / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    denom = max(n_ref, 1)
    return {
        "sub": sub, "del": dels, "ins": ins, "n_ref": n_ref, "n_hyp": n_hyp,
        "sub_rate": sub / denom, "del_rate": dels / denom, "ins_rate": ins / denom,
        "precision": precision, "recall": recall, "f1": f1,
    }


# ------------------------------------------------------------------- latency


@dataclass
class LatencyReport:
    values_ms: list
    trace: list = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.values_ms)) if self.values_ms else float("nan")

    def to_dict(self) -> dict:
        out = {"mean_ms": self.mean_ms, "values_ms": list(self.values_ms)}
        if self.values_ms:
            out["percentiles_ms"] = {str(q): percentile(self.values_ms, q) for q in (25, 50, 75, 90)}
        if self.trace:
            out["trace"] = self.trace
        return out


def _delay_ms(frames: int) -> int:
    return int(frames) * FRAME_MS + CNN_CONTEXT_MS


def word_latency(predicted, reference, alignment: BoundaryEval | None = None, final_boundary: int | None = None) -> LatencyReport:
    """Per-word delay between the true end frame and the committed boundary.

    Exact matches and early predictions cost the 30 ms floor.  Late or missed
    boundaries wait for the first predicted boundary at or after the true
    one, falling back to ``final_boundary`` (the forced utterance end).  The
    trace carries a ``None`` slot for each inserted boundary.
    """
    pred = _check_increasing(predicted, "predicted")
    ref = _check_increasing(reference, "reference")
    if alignment is None:
        alignment = boundary_edit_distance(pred, ref)
    commits = sorted(set(pred + ([int(final_boundary)] if final_boundary is not None else [])))

    def wait(r: int) -> int:
        later = [p for p in commits if p >= r]
        return _delay_ms(later[0] - r) if later else _delay_ms(0)

    values, trace = [], []
    for op, ri, hi in alignment.alignment.ops:
        if op == INS:
            trace.append(None)
            continue
        r = ref[ri]
        if op == MATCH or (op == SUB and pred[hi] < r):
            ms = _delay_ms(0)
        else:
            ms = wait(r)
        values.append(ms)
        trace.append(ms)
    return LatencyReport(values, trace)


def frame_latency(boundaries) -> LatencyReport:
    """Look-ahead of every frame i: ``(g_j - i) * 40 + 30`` ms for g_{j-1} < i <= g_j."""
    g = _check_increasing(boundaries, "segmentation")
    if not g or g[0] < 1:
        raise ValueError("segmentation must contain positive boundaries")
    values, prev = [], 0
    for end in g:
        values.extend(_delay_ms(end - i) for i in range(prev + 1, end + 1))
        prev = end
    return LatencyReport(values)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile of ``values`` (q in 0..100)."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def segment_lengths_ms(boundaries) -> list[int]:
    g = _check_increasing(boundaries, "segmentation")
    return [int(b - a) * FRAME_MS for a, b in zip([0] + g[:-1], g)]


def segment_length_stats(segmentations, bins: int | Sequence[float] = 10) -> dict:
    """Summary of segment lengths (ms) over one segmentation or a batch of them."""
    if len(segmentations) and np.ndim(segmentations[0]) == 0:
        segmentations = [segmentations]
    lengths = [ms for g in segmentations for ms in segment_lengths_ms(g)]
    if not lengths:
        raise ValueError("no segments")
    counts, edges = np.histogram(lengths, bins=bins)
    q1, median, q3 = (percentile(lengths, q) for q in (25, 50, 75))
    return {
        "lengths_ms": lengths,
        "mean_ms": float(np.mean(lengths)),
        "median_ms": median,
        "q1_ms": q1,
        "q3_ms": q3,
        "iqr_ms": q3 - q1,
        "percentiles_ms": {str(q): percentile(lengths, q) for q in (10, 25, 50, 75, 90)},
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


# ----------------------------------------------------------------------- WER


@dataclass
class ErrorRate:
    errors: int
    sub: int
    dels: int
    ins: int
    n_ref: int

    @property
    def wer(self) -> float:
        return self.errors / self.n_ref if self.n_ref else float(self.errors > 0)

    @property
    def accuracy(self) -> float:
        return 1.0 - self.wer

    def __add__(self, other: "ErrorRate") -> "ErrorRate":
        return ErrorRate(self.errors + other.errors, self.sub + other.sub, self.dels + other.dels, self.ins + other.ins, self.n_ref + other.n_ref)

    def to_dict(self) -> dict:
        return {"wer": self.wer, "sub": self.sub, "del": self.dels, "ins": self.ins, "n_ref": self.n_ref}


def word_error_rate(hypothesis: Sequence, reference: Sequence) -> ErrorRate:
    al = align_sequences(list(reference), list(hypothesis))
    return ErrorRate(al.cost, al.sub, al.dels, al.ins, len(reference))


def corpus_error_rate(hypotheses, references) -> ErrorRate:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    total = ErrorRate(0, 0, 0, 0, 0)
    for h, r in zip(hypotheses, references):
        total = total + word_error_rate(h, r)
    return total


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([_fmt(row.get(c)) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}" if abs(value) < 10 else f"{value:.1f}"
    return "-" if value is None else str(value)


def dumps(report) -> str:
    return json.dumps(report, indent=2, sort_keys=True)

