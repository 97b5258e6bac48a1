"""Controllable generation: condition -> latent diffusion -> CVAE decoding -> FASTA."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aligner import AlignedCondition, BioAligner, features_to_condition, text_to_condition
from .cvae import SequenceCVAE
from .diffusion import LatentDiffusion
from .features import (
    N_PROPERTIES,
    AminoAcidPropertyTable,
    decode_to_sequence,
    global_features,
    load_property_table,
    normalize_features,
)
from .training import rng_for

log = logging.getLogger(__name__)

MODES = ("text", "raw_feature", "random_feature")
FASTA_TAG = "propdiff"
FASTA_WIDTH = 60

__all__ = [
    "GenerationRequest",
    "GeneratedSequence",
    "build_condition",
    "sample_random_features",
    "decode_to_sequence",
    "generate",
    "check_compatible",
    "write_fasta",
    "read_fasta",
]


@dataclass
class GenerationRequest:
    """What to generate.

    ``target_features`` are raw (table-unit) descriptor values; ``min_len`` and
    ``max_len`` bound the emitted lengths.
    """

    mode: str
    text: str | None = None
    target_features: np.ndarray | None = None
    count: int = 1
    min_len: int = 10
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "text" and not (self.text and self.text.strip()):
            raise ValueError("text mode requires a non-empty text")
        if self.mode == "raw_feature":
            if self.target_features is None:
                raise ValueError("raw_feature mode requires target_features")
            f = np.asarray(self.target_features, dtype=np.float64)
            if f.shape != (N_PROPERTIES,):
                raise ValueError(f"target_features must have {N_PROPERTIES} values, got shape {f.shape}")
            if not np.all(np.isfinite(f)):
                raise ValueError("target_features must be finite")
            self.target_features = f
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"length bounds [{self.min_len}, {self.max_len}] invalid")


@dataclass
class GeneratedSequence:
    sequence: str
    index: int
    seed: int
    mode: str
    condition_provenance: str
    realized_features: np.ndarray = field(repr=False)
    target_features: np.ndarray | None = field(default=None, repr=False)
    latent: np.ndarray | None = field(default=None, repr=False)


def sample_random_features(seed: int, table: AminoAcidPropertyTable | None = None, stream=()) -> np.ndarray:
    """Uniform draw of each descriptor within the table's raw column range."""
    table = table or load_property_table()
    rng = rng_for(seed, *stream)
    return rng.uniform(table.column_min, table.column_max)


def _item_condition(request, aligner: BioAligner, table, item: int):
    """(condition, normalized decoder features, raw target or None) for one item."""
    if request.mode == "text":
        cond = text_to_condition(request.text, aligner)
        return cond, aligner.predict_features([request.text])[0], None
    if request.mode == "raw_feature":
        raw = request.target_features
    else:
        raw = sample_random_features(request.seed, table, stream=(item,))
    norm = normalize_features(raw[None, :], table)[0]
    cond = features_to_condition(norm, aligner)
    return AlignedCondition(cond.vector, request.mode), norm, raw


def build_condition(request: GenerationRequest, aligner: BioAligner, table=None, item: int = 0) -> AlignedCondition:
    table = table or load_property_table()
    return _item_condition(request, aligner, table, item)[0]


def check_compatible(cvae: SequenceCVAE, aligner: BioAligner, diffusion: LatentDiffusion, max_len: int | None = None):
    if diffusion.latent_dim_ != cvae.latent_dim:
        raise ValueError(
            f"diffusion latent_dim {diffusion.latent_dim_} != cvae latent_dim {cvae.latent_dim}"
        )
    if diffusion.cond_dim_ != aligner.shared_dim:
        raise ValueError(
            f"diffusion cond_dim {diffusion.cond_dim_} != aligner shared_dim {aligner.shared_dim}"
        )
    if max_len is not None and max_len > cvae.max_len:
        raise ValueError(f"requested max_len {max_len} exceeds cvae max_len {cvae.max_len}")


def generate(
    request: GenerationRequest,
    cvae: SequenceCVAE,
    aligner: BioAligner,
    diffusion: LatentDiffusion,
    table: AminoAcidPropertyTable | None = None,
    start_index: int = 0,
) -> list[GeneratedSequence]:
    """Generate ``request.count`` sequences.

    Item ``i`` (numbered from ``start_index``) draws all of its randomness from
    the stream ``(seed, i)``, so items are reproducible independently.
    """
    check_compatible(cvae, aligner, diffusion, request.max_len)
    table = table or cvae.featurizer_.table_
    out = []
    for i in range(start_index, start_index + request.count):
        cond, dec_feats, raw = _item_condition(request, aligner, table, i)
        z = diffusion.sample(cond.vector[None, :], random_state=request.seed, stream=(i,))
        logits = cvae.decode_logits(z, dec_feats[None, :])[0]
        seq = decode_to_sequence(logits, request.min_len, request.max_len)
        out.append(
            GeneratedSequence(
                sequence=seq,
                index=i,
                seed=request.seed,
                mode=request.mode,
                condition_provenance=cond.provenance,
                realized_features=global_features(seq, table, normalized=True),
                target_features=raw,
                latent=z[0],
            )
        )
    log.info("generated %d sequences (mode=%s, seed=%d)", len(out), request.mode, request.seed)
    return out


def fasta_header(item: GeneratedSequence) -> str:
    return f"{FASTA_TAG}|{item.index}|seed={item.seed}|mode={item.mode}"


def write_fasta(sequences, path) -> None:
    """Write records as FASTA with bodies wrapped at 60 columns.

    Accepts ``GeneratedSequence`` objects or ``(header, sequence)`` pairs.
    """
    lines = []
    for item in sequences:
        header, seq = (fasta_header(item), item.sequence) if isinstance(item, GeneratedSequence) else item
        lines.append(f">{header}")
        lines.extend(seq[i : i + FASTA_WIDTH] for i in range(0, len(seq), FASTA_WIDTH))
    Path(path).write_text("".join(l + "\n" for l in lines))


def read_fasta(path) -> list[tuple[str, str]]:
    records, header, chunks = [], None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                records.append((header, "".join(chunks)))
            header, chunks = line[1:], []
        elif header is None:
            raise ValueError(f"{path}:{lineno}: sequence data before the first header")
        else:
            chunks.append(line)
    if header is not None:
        records.append((header, "".join(chunks)))
    return records
