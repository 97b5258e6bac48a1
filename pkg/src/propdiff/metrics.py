"""Sequence-level metrics and generated-vs-natural distribution reports."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    ALPHABET,
    PROPERTY_NAMES,
    AminoAcidPropertyTable,
    check_sequence,
    global_features,
    load_property_table,
    normalize_features,
)

# Henderson-Hasselbalch pKa values from the EMBOSS iep/charge tables.
PKA_EMBOSS = {
    "N_term": 8.6,
    "C_term": 3.6,
    "K": 10.8,
    "R": 12.5,
    "H": 6.5,
    "D": 3.9,
    "E": 4.1,
    "C": 8.5,
    "Y": 10.1,
}
BASIC = ("K", "R", "H")
ACIDIC = ("D", "E", "C", "Y")
REPORT_PH = 7.4
NOVELTY_NOTE = (
    "novelty: sequence identity (LCS / longer length) against the natural set, "
    "used in place of a structural database screen"
)

_H1 = PROPERTY_NAMES.index("H_1")


def avg_hydrophobicity(sequence: str, table: AminoAcidPropertyTable | None = None) -> float:
    table = table or load_property_table()
    return float(table.values[check_sequence(sequence), _H1].mean())


def _group_counts(sequence: str) -> Counter:
    check_sequence(sequence)
    return Counter(sequence)


def net_charge(sequence: str, pH: float, pka: dict | None = None) -> float:
    """Net charge from the termini plus ionizable side chains."""
    if not 0 <= pH <= 14:
        raise ValueError(f"pH must lie in [0, 14], got {pH}")
    pka = pka or PKA_EMBOSS
    counts = _group_counts(sequence)
    pos = 1.0 / (1.0 + 10.0 ** (pH - pka["N_term"]))
    neg = 1.0 / (1.0 + 10.0 ** (pka["C_term"] - pH))
    for aa in BASIC:
        pos += counts[aa] / (1.0 + 10.0 ** (pH - pka[aa]))
    for aa in ACIDIC:
        neg += counts[aa] / (1.0 + 10.0 ** (pka[aa] - pH))
    return pos - neg


def isoelectric_point(sequence: str, pka: dict | None = None, tol: float = 1e-10) -> float:
    """pH of zero net charge, by bisection on [0, 14] down to an interval of ``tol``."""
    lo, hi = 0.0, 14.0
    if net_charge(sequence, lo, pka) <= 0:
        return lo
    if net_charge(sequence, hi, pka) >= 0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if net_charge(sequence, mid, pka) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cysteine_pair_intervals(sequence: str) -> list[int]:
    """Gaps between consecutive cysteine positions."""
    pos = [i for i, c in enumerate(sequence) if c == "C"]
    return [b - a for a, b in zip(pos, pos[1:])]


def shannon_entropy(sequences) -> float:
    """Entropy (bits) of the pooled residue composition."""
    sequences = [sequences] if isinstance(sequences, str) else list(sequences)
    if not sequences:
        raise ValueError("shannon_entropy needs at least one sequence")
    counts = Counter()
    for s in sequences:
        check_sequence(s)
        counts.update(s)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("shannon_entropy needs at least one residue")
    # correctly rounded sum, so the result does not depend on letter order
    return -math.fsum(c / total * math.log2(c / total) for c in (counts[a] for a in ALPHABET) if c) + 0.0


def lcs_length(a: str, b: str) -> int:
    """Longest common subsequence length (bit-parallel over ``a``)."""
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, ch in enumerate(a):
        masks[ch] = masks.get(ch, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for ch in b:
        u = v & masks.get(ch, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def sequence_identity(a: str, b: str) -> float:
    """Identity under a match=1, mismatch=0, gap=0 global alignment, over the longer length."""
    n = max(len(a), len(b))
    return lcs_length(a, b) / n if n else 1.0


def max_identity(sequence: str, reference) -> float:
    return max(sequence_identity(sequence, r) for r in reference)


def novelty_ratio(generated, reference, identity_threshold: float = 0.20) -> float:
    """Fraction of generated sequences whose best identity to ``reference`` is below the threshold."""
    generated, reference = list(generated), list(reference)
    if not reference:
        raise ValueError("novelty_ratio needs a non-empty reference set")
    if not generated:
        raise ValueError("novelty_ratio needs a non-empty generated set")
    novel = sum(max_identity(g, reference) < identity_threshold for g in generated)
    return novel / len(generated)


def property_alignment_mse(target, sequence: str, table: AminoAcidPropertyTable | None = None, target_normalized: bool = False) -> float:
    """MSE between target descriptors and the sequence's global descriptors, in z-scored units.

    ``target`` is in raw table units unless ``target_normalized``.
    """
    table = table or load_property_table()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (table.values.shape[1],):
        raise ValueError(f"target must have {table.values.shape[1]} values, got shape {target.shape}")
    if not target_normalized:
        target = normalize_features(target[None, :], table)[0]
    realized = global_features(sequence, table, normalized=True)
    return float(np.mean((realized - target) ** 2))


def semantic_fidelity(text: str, sequence: str, aligner, table: AminoAcidPropertyTable | None = None) -> float:
    """Cosine between the text embedding and the embedding of the sequence's descriptors."""
    table = table or load_property_table()
    t = aligner.transform_text([text])[0]
    f = aligner.transform_features(global_features(sequence, table, normalized=True)[None, :])[0]
    cos = float(t @ f / (np.linalg.norm(t) * np.linalg.norm(f) + 1e-12))
    return min(1.0, max(-1.0, cos))


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return {"mean": math.nan, "median": math.nan, "std": math.nan, "n": 0}
    return {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std()), "n": int(len(v))}


def _as_records(items, prefix: str) -> list[tuple[str, str]]:
    out = []
    for i, item in enumerate(items):
        if isinstance(item, str):
            out.append((f"{prefix}{i}", item))
        else:
            out.append((str(item[0]), str(item[1])))
    return out


ROW_FIELDS = ("set", "id", "length", "hydrophobicity", "pI", "net_charge", "cys_intervals")
SCALAR_METRICS = ("length", "hydrophobicity", "pI", "net_charge")


def sequence_row(set_name: str, seq_id: str, sequence: str, table, pka=None, ph: float = REPORT_PH) -> dict:
    return {
        "set": set_name,
        "id": seq_id,
        "length": len(sequence),
        "hydrophobicity": avg_hydrophobicity(sequence, table),
        "pI": isoelectric_point(sequence, pka),
        "net_charge": net_charge(sequence, ph, pka),
        "cys_intervals": cysteine_pair_intervals(sequence),
    }


@dataclass
class MetricsReport:
    rows: list[dict]
    summary: dict
    feature_summary: dict
    entropy: dict
    novelty: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        """One row per sequence: set, id, length, hydrophobicity, pI, net_charge, cys_intervals."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow(
                    [r["set"], r["id"], r["length"], repr(r["hydrophobicity"]), repr(r["pI"]),
                     repr(r["net_charge"]), " ".join(map(str, r["cys_intervals"]))]
                )

    def to_dict(self) -> dict:
        return {
            "notes": self.notes,
            "summary": self.summary,
            "feature_summary": self.feature_summary,
            "entropy": self.entropy,
            "novelty_ratio": self.novelty,
        }

    def write(self, out_dir, histograms: bool = True, bins: int = 30) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / "per_sequence.csv")
        (out / "summary.json").write_text(json.dumps(self.to_dict(), indent=2))
        if histograms:
            self.write_histograms(out, bins)

    def write_histograms(self, out_dir, bins: int = 30) -> None:
        """Per-metric histogram tables (shared bin edges across sets) for external plotting."""
        sets = sorted({r["set"] for r in self.rows})
        metrics = {m: (lambda r, m=m: [r[m]]) for m in SCALAR_METRICS}
        metrics["cys_intervals"] = lambda r: r["cys_intervals"]
        for name, get in metrics.items():
            data = {s: [v for r in self.rows if r["set"] == s for v in get(r)] for s in sets}
            pooled = [v for vals in data.values() for v in vals]
            if not pooled:
                continue
            edges = np.histogram_bin_edges(pooled, bins=bins)
            with open(Path(out_dir) / f"hist_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_left", "bin_right", *sets])
                counts = {s: np.histogram(data[s], bins=edges)[0] for s in sets}
                for j in range(len(edges) - 1):
                    w.writerow([edges[j], edges[j + 1], *(int(counts[s][j]) for s in sets)])


def read_scores(path) -> dict[str, float]:
    """Two-column (id, score) file, comma or whitespace separated; '#' lines ignored."""
    scores = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'id score', got {line!r}")
        try:
            scores[parts[0]] = float(parts[1])
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ValueError(f"{path}:{lineno}: score {parts[1]!r} is not a number") from None
    return scores


def distribution_report(
    generated,
    natural,
    table: AminoAcidPropertyTable | None = None,
    scores: dict | None = None,
    score_threshold: float = 70.0,
    pka: dict | None = None,
    ph: float = REPORT_PH,
    identity_threshold: float = 0.20,
    novelty: bool = True,
    workers: int = 1,
) -> MetricsReport:
    """Compare generated and natural sets metric by metric.

    ``generated``/``natural`` are sequences or ``(id, sequence)`` pairs. When
    ``scores`` (id -> external confidence) is given, generated items scoring at
    or below ``score_threshold`` (or missing) are dropped first. ``workers > 1``
    computes per-sequence rows in a process pool; row order is unaffected.
    """
    table = table or load_property_table()
    gen = _as_records(generated, "gen")
    nat = _as_records(natural, "nat")
    notes = []
    if scores is not None:
        before = len(gen)
        gen = [(i, s) for i, s in gen if scores.get(i, -math.inf) > score_threshold]
        notes.append(f"score filter: kept {len(gen)}/{before} generated sequences with score > {score_threshold}")
    if not gen or not nat:
        raise ValueError(f"distribution_report needs non-empty sets (generated={len(gen)}, natural={len(nat)})")
    jobs = [("generated", i, s) for i, s in gen] + [("natural", i, s) for i, s in nat]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(sequence_row, *zip(*jobs), *([x] * len(jobs) for x in (table, pka, ph)), chunksize=16))
    else:
        rows = [sequence_row(*job, table, pka, ph) for job in jobs]
    summary, feature_summary, entropy = {}, {}, {}
    for set_name, recs in (("generated", gen), ("natural", nat)):
        set_rows = [r for r in rows if r["set"] == set_name]
        summary[set_name] = {m: _summary([r[m] for r in set_rows]) for m in SCALAR_METRICS}
        summary[set_name]["cys_intervals"] = _summary([v for r in set_rows for v in r["cys_intervals"]])
        feats = np.stack([global_features(s, table, normalized=False) for _, s in recs])
        feature_summary[set_name] = {n: _summary(feats[:, j]) for j, n in enumerate(PROPERTY_NAMES)}
        entropy[set_name] = shannon_entropy([s for _, s in recs])
    ratio = None
    if novelty:
        ratio = novelty_ratio([s for _, s in gen], [s for _, s in nat], identity_threshold)
        notes.append(NOVELTY_NOTE)
    return MetricsReport(rows, summary, feature_summary, entropy, ratio, notes)
