"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


def check_features(x, n_features: int | None = None, name: str = "features") -> np.ndarray:
    """Return ``x`` as a finite float64 (frames, dims) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (frames, dims), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} has no frames")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(f"{name} has {arr.shape[1]} dims per frame, expected {n_features}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return arr


def check_sequences(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a list of variable-length feature sequences; all must share one width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    seqs = [check_features(x, n_features, name=f"X[{i}]") for i, x in enumerate(X)]
    if not seqs:
        raise ValueError("X is empty")
    widths = {s.shape[1] for s in seqs}
    if len(widths) != 1:
        raise ValueError(f"sequences have different feature widths {sorted(widths)}")
    return seqs


def check_tokens(y, vocab_size: int | None = None) -> list[list[int]]:
    out = []
    for i, seq in enumerate(y):
        seq = [int(t) for t in seq]
        if vocab_size is not None and any(not 0 <= t < vocab_size for t in seq):
            raise ValueError(f"y[{i}] has tokens outside 0..{vocab_size - 1}")
        out.append(seq)
    return out


def check_consistent_length(*collections) -> None:
    lengths = {len(c) for c in collections if c is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
