"""CTC likelihood, Viterbi alignment and frame-synchronous prefix search.

Posteriors are (frames, V+1) log-probability matrices whose last column is
the blank.  Frames are reported 1-based to match boundary positions.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx

NEG_INF = -np.inf


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: repeats need a blank in between."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _check_labels(labels, n_symbols: int, blank: int) -> list[int]:
    labels = [int(y) for y in labels]
    for y in labels:
        if not 0 <= y < n_symbols or y == blank:
            raise ValueError(f"label {y} is outside the vocabulary")
    return labels


def ctc_log_likelihood(log_post, labels: Sequence[int], blank: int | None = None) -> nx.Node:
    """log P(labels | posteriors) by the log-domain forward recursion, as a graph node.

    Returns a node holding ``-inf`` when the labels cannot fit in the frames.
    """
    log_post = nx.as_node(log_post)
    n_frames, n_symbols = log_post.value.shape
    blank = n_symbols - 1 if blank is None else blank
    labels = _check_labels(labels, n_symbols, blank)
    ext = _extended(labels, blank)
    n_states = len(ext)

    # predecessor table over [alpha_prev, -inf]; index n_states is the -inf slot
    states = np.arange(n_states)
    skip_ok = np.zeros(n_states, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    preds = np.stack([states, states - 1, states - 2], axis=1)
    allowed = np.stack([np.ones(n_states, bool), states >= 1, skip_ok], axis=1)
    preds = np.where(allowed, preds, n_states)
    sentinel = nx.Node(np.array([NEG_INF]))

    emissions = nx.take(log_post, (slice(None), ext))
    start = np.full(n_states, NEG_INF)
    start[: min(2, n_states)] = 0.0
    alpha = emissions[0] + start
    for t in range(1, n_frames):
        padded = nx.concat([alpha, sentinel])
        alpha = nx.logsumexp(nx.take(padded, preds), axis=1) + emissions[t]
    finals = [n_states - 1] if n_states == 1 else [n_states - 1, n_states - 2]
    return nx.logsumexp(nx.take(alpha, np.array(finals)), axis=0)


def ctc_forward_logprob(log_post, labels: Sequence[int], blank: int | None = None) -> float:
    return float(ctc_log_likelihood(np.asarray(log_post, dtype=np.float64), labels, blank).value)


def ctc_viterbi_align(log_post, labels: Sequence[int], blank: int | None = None) -> tuple[np.ndarray, float]:
    """Best single CTC path for ``labels``.

    Returns the 1-based frame at which each label is first emitted and the
    path's log score.  Ties favour the path that emits tokens earliest.
    """
    lp = np.asarray(log_post, dtype=np.float64)
    n_frames, n_symbols = lp.shape
    blank = n_symbols - 1 if blank is None else blank
    labels = _check_labels(labels, n_symbols, blank)
    if min_frames(labels) > n_frames:
        raise ValueError(f"{len(labels)} labels cannot be aligned to {n_frames} frames")
    ext = _extended(labels, blank)
    n_states = len(ext)
    skip_ok = np.zeros(n_states, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    delta = np.full(n_states, NEG_INF)
    delta[: min(2, n_states)] = lp[0, ext[: min(2, n_states)]]
    back = np.zeros((n_frames, n_states), dtype=np.int64)
    for t in range(1, n_frames):
        stay = delta
        step = np.concatenate([[NEG_INF], delta[:-1]])
        skip = np.full(n_states, NEG_INF)
        skip[2:] = np.where(skip_ok[2:], delta[:-2], NEG_INF)
        cands = np.stack([stay, step, skip], axis=1)
        choice = np.argmax(cands, axis=1)  # first maximum: stay > step > skip
        back[t] = choice
        delta = cands[np.arange(n_states), choice] + lp[t, ext]

    finals = [n_states - 1] if n_states == 1 else [n_states - 1, n_states - 2]
    state = finals[int(np.argmax(delta[finals]))]
    score = float(delta[state])
    if not np.isfinite(score):
        raise ValueError("labels have no valid alignment")
    path = np.empty(n_frames, dtype=np.int64)
    for t in range(n_frames - 1, -1, -1):
        path[t] = state
        state -= back[t, state]
    triggers = np.array([int(np.argmax(path == 2 * k + 1)) + 1 for k in range(len(labels))], dtype=np.int64)
    return triggers, score


def prefix_total(state: tuple[float, float]) -> float:
    return float(np.logaddexp(state[0], state[1]))


def ctc_prefix_step(
    beam: Mapping[tuple, tuple[float, float]],
    log_row,
    sigma0: float = 0.0,
    blank: int | None = None,
) -> dict[tuple, tuple[float, float]]:
    """Advance every prefix in ``beam`` by one frame.

    ``beam`` maps a label prefix to its ``(log p_blank, log p_nonblank)``.
    Every existing prefix is carried forward; extensions are only proposed
    for symbols whose frame probability is positive and at least ``sigma0``.
    """
    row = np.asarray(log_row, dtype=np.float64).reshape(-1)
    blank = row.size - 1 if blank is None else blank
    probs = np.exp(row)
    symbols = [c for c in range(row.size) if c != blank and probs[c] > 0.0 and probs[c] >= sigma0]
    out: dict[tuple, list[float]] = {}

    def accumulate(prefix, lb, lnb):
        cur = out.get(prefix)
        if cur is None:
            out[prefix] = [lb, lnb]
        else:
            cur[0] = np.logaddexp(cur[0], lb)
            cur[1] = np.logaddexp(cur[1], lnb)

    for prefix, (lb, lnb) in beam.items():
        total = np.logaddexp(lb, lnb)
        last = prefix[-1] if prefix else None
        accumulate(prefix, total + row[blank], lnb + row[last] if prefix else NEG_INF)
        for c in symbols:
            source = lb if c == last else total
            accumulate(prefix + (c,), NEG_INF, source + row[c])
    return {k: (float(v[0]), float(v[1])) for k, v in out.items()}


def initial_beam() -> dict[tuple, tuple[float, float]]:
    return {(): (0.0, NEG_INF)}
