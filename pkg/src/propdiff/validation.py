"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .features import SequenceError, check_sequence


def check_sequences(X, max_len: int | None = None, min_len: int = 1) -> list[str]:
    """Coerce ``X`` to a list of validated residue strings.

    Errors name the offending item, position and character.
    """
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    out = []
    for i, seq in enumerate(X):
        if not isinstance(seq, str):
            raise TypeError(f"item {i}: expected str, got {type(seq).__name__}")
        try:
            check_sequence(seq)
        except SequenceError as exc:
            raise SequenceError(exc.position, exc.char, item=i) from None
        if len(seq) < min_len or (max_len is not None and len(seq) > max_len):
            raise ValueError(f"item {i}: length {len(seq)} outside [{min_len}, {max_len}]")
        out.append(seq)
    return out


def check_matrix(X, n_cols: int | None = None, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {X.shape}")
    if n_cols is not None and X.shape[1] != n_cols:
        raise ValueError(f"{name}: expected {n_cols} columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains non-finite values")
    return X
