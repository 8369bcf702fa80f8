"""Corpus-level decoding and evaluation used by the CLI."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoding import DecodeConfig, decode_offline, decode_with_segmentation, scout_then_decode
from .metrics import (
    boundary_edit_distance,
    corpus_error_rate,
    frame_latency,
    merge_boundary_evals,
    segment_length_stats,
    word_latency,
)

MODES = ("streaming", "offline", "golden-boundaries")


def golden_segmentation(utterance) -> list[int]:
    """Reference word ends, closed with the utterance end when the tail is silent."""
    g = [int(b) for b in utterance.reference_boundaries() if b <= utterance.n_frames]
    if not g or g[-1] != utterance.n_frames:
        g.append(utterance.n_frames)
    return g


@dataclass
class UtteranceDecode:
    uid: str
    hypothesis: list
    reference: list
    segmentation: list
    seconds: float

    def to_dict(self) -> dict:
        return {"id": self.uid, "hyp": self.hypothesis, "ref": self.reference, "segmentation": self.segmentation}


def decode_utterance(u, rn, config: DecodeConfig, lm=None, mode: str = "streaming", scout=None) -> UtteranceDecode:
    t0 = time.perf_counter()
    if mode == "streaming":
        if scout is None:
            raise ValueError("streaming mode needs a scout model")
        result = scout_then_decode(u.features, scout, rn, config, lm)
    elif mode == "golden-boundaries":
        result = decode_with_segmentation(u.features, golden_segmentation(u), rn, config, lm)
    elif mode == "offline":
        result = decode_offline(u.features, rn, config, lm)
    else:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    return UtteranceDecode(u.uid, [int(t) for t in result.tokens], list(u.tokens), [int(b) for b in result.segmentation], time.perf_counter() - t0)


def summarize(decodes: list[UtteranceDecode], utterances) -> dict:
    """WER, latency and segment statistics over a decoded set (no wall-clock values)."""
    errors = corpus_error_rate([d.hypothesis for d in decodes], [d.reference for d in decodes])
    words, frames, evals = [], [], []
    for d, u in zip(decodes, utterances):
        ref = [int(b) for b in u.reference_boundaries()]
        ev = boundary_edit_distance(d.segmentation, ref)
        evals.append(ev)
        words.extend(word_latency(d.segmentation, ref, ev, final_boundary=u.n_frames).values_ms)
        frames.extend(frame_latency(d.segmentation).values_ms)
    stats = segment_length_stats([d.segmentation for d in decodes])
    stats.pop("lengths_ms")
    return {
        "n_utterances": len(decodes),
        "errors": errors.to_dict(),
        "wer": errors.wer,
        "token_accuracy": errors.accuracy,
        "word_latency_ms": float(np.mean(words)) if words else None,
        "frame_latency_ms": float(np.mean(frames)),
        "segments": stats,
        "boundaries": merge_boundary_evals(evals),
    }


def evaluate(utterances, rn, config: DecodeConfig, lm=None, mode: str = "streaming", scout=None) -> tuple[list[UtteranceDecode], dict]:
    decodes = [decode_utterance(u, rn, config, lm, mode, scout) for u in utterances]
    return decodes, summarize(decodes, utterances)


def sweep_sigma(utterances, rn, scout, config: DecodeConfig, sigmas, lm=None) -> list[dict]:
    """One row per threshold: WER against word and frame latency."""
    rows = []
    for sigma in sigmas:
        cfg = DecodeConfig(**{**config.to_dict(), "sigma": float(sigma)})
        _, report = evaluate(utterances, rn, cfg, lm, "streaming", scout)
        rows.append({
            "sigma": float(sigma),
            "wer": report["wer"],
            "word_latency_ms": report["word_latency_ms"],
            "frame_latency_ms": report["frame_latency_ms"],
            "mean_segment_ms": report["segments"]["mean_ms"],
        })
    return rows
