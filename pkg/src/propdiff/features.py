"""Amino-acid property table and sequence featurization.

Sequences become three aligned views: a one-hot matrix with a trailing
padding channel, a per-residue matrix of physicochemical descriptors
(``local``), and the mean descriptor vector over the true length (``global``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
PAD_INDEX = len(ALPHABET)
N_CHANNELS = len(ALPHABET) + 1
AA_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}

PROPERTY_NAMES = (
    "stc", "P_1", "p_2", "vol", "H_1", "H_2", "P_i", "alpha",
    "beta", "NCN", "SASA", "A1", "A2", "T", "E", "F",
)

# fmt: off
_TABLE_ROWS = {
    #     stc    P_1    p_2    vol   H_1    H_2   P_i    alpha beta  NCN     SASA    A1    A2     T      E   F
    "A": (1.28,  8.1,  0.046, 1.00, 0.62, -0.5,  6.11, 0.42, 0.23,  0.007,  1.181, 0.49, 1.064, -0.8,  15, -1.27),
    "C": (1.77,  5.50, 0.128, 2.43, 0.29, -1.0,  6.35, 0.17, 0.41, -0.036,  1.461, 0.26, 1.412,  0.83, 15, -1.09),
    "D": (1.60, 13.0,  0.105, 2.78, -0.9,  3.0,  2.95, 0.25, 0.20, -0.023,  1.587, 0.78, 0.866,  1.65,  5,  1.42),
    "E": (1.56, 12.3,  0.151, 3.78, -0.74, 3.0,  3.09, 0.42, 0.21,  0.006,  1.862, 0.84, 0.85,  -0.92, 50,  1.6),
    "F": (2.9,   5.2,  0.29,  5.89, 1.19, -2.5,  5.67, 0.30, 0.38,  0.037,  2.228, 0.42, 1.091,  0.18, 55, -2.14),
    "G": (40.0,  9.0,  0.00,  0.00, 0.48,  0.0,  6.07, 0.13, 0.15,  0.179,  0.881, 0.48, 0.874, -0.55, 10,  1.86),
    "H": (2.99, 20.4,  0.23,  4.66, -0.4, -0.5,  7.69, 0.27, 0.30, -0.010,  2.025, 0.84, 1.105,  0.11, 10, -0.82),
    "I": (4.19,  5.2,  0.186, 4.00, 1.38, -1.8,  6.04, 0.30, 0.45,  0.021,  1.810, 0.34, 1.152, -1.53, 56, -2.89),
    "K": (1.89, 11.3,  0.219, 4.77, -1.5,  3.0,  9.99, 0.32, 0.27,  0.017,  2.258, 0.97, 0.930, -1.06, 13,  2.88),
    "L": (2.59,  4.9,  0.186, 4.00, 1.06, -1.8,  6.04, 0.39, 0.31,  0.051,  1.931, 0.40, 1.250, -1.01, 85, -2.29),
    "M": (2.35,  5.7,  0.221, 4.43, 0.64, -1.3,  5.71, 0.38, 0.32,  0.002,  2.034, 0.48, 0.826, -1.48, 16, -1.84),
    "N": (1.60, 11.6,  0.134, 2.95, -0.78, 2.0,  6.52, 0.21, 0.22,  0.005,  1.655, 0.81, 0.776,  3.0,  20,  1.77),
    "P": (2.67,  8.0,  0.131, 2.72, 0.12,  0.0,  6.80, 0.13, 0.34,  0.239,  1.468, 0.49, 1.064, -0.8,  49,  0.52),
    "Q": (1.56, 10.5,  0.180, 3.95, -0.85, 0.2,  5.65, 0.36, 0.25,  0.049,  1.932, 0.84, 1.015,  0.11, 15,  1.18),
    "R": (2.34, 10.5,  0.291, 6.13, -2.53, 3.0, 10.74, 0.36, 0.25,  0.043,  2.560, 0.95, 0.873, -1.15, 56,  2.79),
    "S": (1.31,  9.2,  0.062, 1.60, -0.18, 0.3,  5.70, 0.20, 0.28,  0.004,  1.29,  0.65, 1.012,  1.34, 67,  3.0),
    "T": (3.03,  8.6,  0.108, 2.60, -0.05, -0.4, 5.60, 0.21, 0.36,  0.003, 81.525, 0.70, 0.909,  0.27, 32,  1.18),
    "V": (3.67,  5.9,  0.140, 3.00, 1.08, -1.5,  6.02, 0.27, 0.49,  0.057,  1.645, 0.36, 1.383, -0.83, 32, -1.75),
    "W": (3.21,  5.4,  0.409, 8.08, 0.81, -3.4,  5.94, 0.32, 0.42,  0.037,  2.663, 0.51, 0.893, -0.97, 17, -3.78),
    "Y": (2.94,  6.2,  0.298, 6.47, 0.26, -2.3,  5.66, 0.25, 0.41,  0.023,  2.368, 0.76, 1.161, -0.29, 41, -3.3),
}
# fmt: on

N_PROPERTIES = len(PROPERTY_NAMES)


class SequenceError(ValueError):
    """Raised for sequences containing letters outside the 20-letter alphabet."""

    def __init__(self, position: int, char: str, item: int | None = None):
        self.position = position
        self.char = char
        self.item = item
        where = f"item {item}: " if item is not None else ""
        super().__init__(f"{where}non-standard residue {char!r} at position {position}")


class PropertyTableError(ValueError):
    pass


@dataclass(frozen=True)
class AminoAcidPropertyTable:
    """20x16 descriptor matrix, rows in ``ALPHABET`` order."""

    values: np.ndarray
    names: tuple = PROPERTY_NAMES
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(ALPHABET), len(self.names)):
            raise PropertyTableError(
                f"table must be {len(ALPHABET)}x{len(self.names)}, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise PropertyTableError("table contains non-finite cells")
        values.setflags(write=False)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def lookup(self, aa: str) -> dict:
        return dict(zip(self.names, self.values[AA_INDEX[aa]].tolist()))

    def __getitem__(self, aa: str) -> np.ndarray:
        return self.values[AA_INDEX[aa]]

    @property
    def column_min(self) -> np.ndarray:
        return self.values.min(axis=0)

    @property
    def column_max(self) -> np.ndarray:
        return self.values.max(axis=0)

    def outliers(self, n_std: float = 5.0) -> list[tuple[str, str, float]]:
        """Cells further than ``n_std`` column standard deviations from the column mean.

        Reported only; the table is never edited.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.std > 0, (self.values - self.mean) / self.std, 0.0)
        rows, cols = np.nonzero(np.abs(z) > n_std)
        return [(ALPHABET[r], self.names[c], float(self.values[r, c])) for r, c in zip(rows, cols)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["aa", *self.names])
            for aa in ALPHABET:
                writer.writerow([aa, *[repr(float(v)) for v in self[aa]]])


def load_property_table(path: str | Path | None = None) -> AminoAcidPropertyTable:
    """Return the embedded descriptor table, or one read from a CSV override.

    The CSV must have the header ``aa,stc,P_1,...,F`` and one row per standard
    amino acid.
    """
    if path is None:
        return AminoAcidPropertyTable(np.array([_TABLE_ROWS[aa] for aa in ALPHABET]))

    rows: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["aa", *PROPERTY_NAMES]
        if header is None or [h.strip() for h in header] != expected:
            raise PropertyTableError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            aa = row[0].strip()
            if aa not in AA_INDEX:
                raise PropertyTableError(f"{path}:{lineno}: unknown amino acid {aa!r}")
            if len(row) != len(expected):
                raise PropertyTableError(f"{path}:{lineno}: row {aa} has {len(row) - 1} values")
            parsed = []
            for name, cell in zip(PROPERTY_NAMES, row[1:]):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise PropertyTableError(
                        f"{path}:{lineno}: row {aa}, column {name}: non-numeric {cell!r}"
                    ) from None
            rows[aa] = parsed
    missing = [aa for aa in ALPHABET if aa not in rows]
    if missing:
        raise PropertyTableError(f"{path}: missing amino acid rows {','.join(missing)}")
    return AminoAcidPropertyTable(np.array([rows[aa] for aa in ALPHABET]))


def normalize_table(table: AminoAcidPropertyTable) -> AminoAcidPropertyTable:
    """Z-score every column over the 20 rows; constant columns become zero."""
    safe = np.where(table.std > 0, table.std, 1.0)
    z = (table.values - table.mean) / safe
    z[:, table.std == 0] = 0.0
    return AminoAcidPropertyTable(z, names=table.names)


def normalize_features(features: np.ndarray, table: AminoAcidPropertyTable) -> np.ndarray:
    """Map raw-unit feature vectors into the z-scored space of ``normalize_table``."""
    features = np.asarray(features, dtype=np.float64)
    safe = np.where(table.std > 0, table.std, 1.0)
    out = (features - table.mean) / safe
    return np.where(table.std > 0, out, 0.0)


def denormalize_features(features: np.ndarray, table: AminoAcidPropertyTable) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) * table.std + table.mean


def check_sequence(sequence: str) -> np.ndarray:
    """Return residue indices, raising ``SequenceError`` on the first bad letter."""
    try:
        return np.fromiter((AA_INDEX[c] for c in sequence), dtype=np.int64, count=len(sequence))
    except KeyError:
        for i, c in enumerate(sequence):
            if c not in AA_INDEX:
                raise SequenceError(i, c) from None
        raise


def encode_one_hot(sequence: str, max_len: int) -> np.ndarray:
    idx = check_sequence(sequence)
    if not 1 <= len(idx) <= max_len:
        raise ValueError(f"sequence length {len(idx)} outside [1, {max_len}]")
    out = np.zeros((max_len, N_CHANNELS), dtype=np.float64)
    out[np.arange(len(idx)), idx] = 1.0
    out[len(idx):, PAD_INDEX] = 1.0
    return out


@dataclass(frozen=True)
class FeatureBundle:
    one_hot: np.ndarray
    local: np.ndarray
    global_: np.ndarray
    length: int


def featurize(
    sequence: str,
    table: AminoAcidPropertyTable | None = None,
    max_len: int = 128,
    normalized: bool = True,
) -> FeatureBundle:
    if table is None:
        table = load_property_table()
    if normalized:
        table = _normalized(table)
    one_hot = encode_one_hot(sequence, max_len)
    idx = check_sequence(sequence)
    local = np.zeros((max_len, table.values.shape[1]), dtype=np.float64)
    local[: len(idx)] = table.values[idx]
    glob = local[: len(idx)].mean(axis=0)
    return FeatureBundle(one_hot, local, glob, len(idx))


def global_features(
    sequence: str, table: AminoAcidPropertyTable | None = None, normalized: bool = True
) -> np.ndarray:
    """Mean descriptor vector of ``sequence`` without building the padded matrices."""
    if table is None:
        table = load_property_table()
    if normalized:
        table = _normalized(table)
    return table.values[check_sequence(sequence)].mean(axis=0)


_NORMALIZED_CACHE: dict[int, tuple[AminoAcidPropertyTable, AminoAcidPropertyTable]] = {}


def _normalized(table: AminoAcidPropertyTable) -> AminoAcidPropertyTable:
    hit = _NORMALIZED_CACHE.get(id(table))
    if hit is not None and hit[0] is table:
        return hit[1]
    norm = normalize_table(table)
    _NORMALIZED_CACHE[id(table)] = (table, norm)
    return norm


class PhyschemFeaturizer(TransformerMixin, BaseEstimator):
    """Sequence -> global descriptor vectors, usable inside sklearn pipelines.

    Parameters
    ----------
    max_len : int
        Padded length for one-hot and local matrices.
    normalized : bool
        Use the z-scored table (model inputs) instead of raw units (metrics).
    table_path : str or None
        Optional CSV override of the embedded table.
    """

    def __init__(self, max_len=128, normalized=True, table_path=None):
        self.max_len = max_len
        self.normalized = normalized
        self.table_path = table_path

    def fit(self, X=None, y=None):
        self.table_ = load_property_table(self.table_path)
        self.n_features_out_ = self.table_.values.shape[1]
        return self

    def _table(self):
        if not hasattr(self, "table_"):
            self.fit()
        return self.table_

    def transform(self, X):
        table = self._table()
        return np.stack([global_features(s, table, self.normalized) for s in X])

    def bundles(self, X) -> list[FeatureBundle]:
        table = self._table()
        return [featurize(s, table, self.max_len, self.normalized) for s in X]

    def arrays(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (one_hot, local, global, lengths) arrays for a batch."""
        b = self.bundles(X)
        return (
            np.stack([x.one_hot for x in b]),
            np.stack([x.local for x in b]),
            np.stack([x.global_ for x in b]),
            np.array([x.length for x in b], dtype=np.int64),
        )

    def get_feature_names_out(self, input_features=None):
        return np.array(PROPERTY_NAMES, dtype=object)


def decode_to_sequence(logits: np.ndarray, min_len: int = 1, max_len: int | None = None) -> str:
    """Turn an ``L_max x 21`` logit matrix into a residue string.

    The emitted length is the first position whose argmax is the padding
    channel, clamped into ``[min_len, max_len]`` (``max_len`` when no padding
    wins). Residues are the argmax over the 20 amino-acid channels; ties go to
    the lowest channel index.
    """
    logits = np.asarray(logits)
    n_pos = logits.shape[0]
    if max_len is None:
        max_len = n_pos
    if not 1 <= min_len <= max_len <= n_pos:
        raise ValueError(f"length bounds [{min_len}, {max_len}] invalid for {n_pos} positions")
    pad_hits = np.flatnonzero(np.argmax(logits, axis=1) == PAD_INDEX)
    length = int(pad_hits[0]) if len(pad_hits) else max_len
    length = min(max(length, min_len), max_len)
    idx = np.argmax(logits[:length, :PAD_INDEX], axis=1)
    return "".join(ALPHABET[i] for i in idx)
