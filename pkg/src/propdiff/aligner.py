"""Contrastive alignment of text descriptions with global descriptor vectors.

Texts and descriptor vectors are embedded into one unit-norm space; the
text-side embedding is the condition handed to the latent diffusion model.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from .checkpoint import arrays_to_state, load_checkpoint, save_checkpoint, state_to_arrays
from .features import N_PROPERTIES
from .training import batches, check_finite, make_optimizer, resolve_dtype, seed_everything
from .validation import check_matrix

log = logging.getLogger(__name__)

TEMPERATURE_BOUNDS = (0.01, 1.0)
_TOKEN = re.compile(r"[a-z0-9]+(?:[-_:.][a-z0-9]+)*")


@dataclass(frozen=True)
class AlignedCondition:
    vector: np.ndarray
    provenance: str  # "text" | "features"


class UnknownTextError(KeyError):
    pass


def text_digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket(token: str, n_buckets: int) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little") % n_buckets


class HashingTextEncoder(nn.Module):
    """Token hashing -> embedding bag (mean) -> linear; trainable and self-contained."""

    kind = "hashing"

    def __init__(self, out_dim: int = 384, n_buckets: int = 4096):
        super().__init__()
        self.out_dim = out_dim
        self.n_buckets = n_buckets
        self.bag = nn.EmbeddingBag(n_buckets, out_dim, mode="mean")
        self.proj = nn.Linear(out_dim, out_dim)

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids, offsets = [], []
        for text in texts:
            offsets.append(len(ids))
            toks = tokenize(text) or ["<empty>"]
            ids.extend(_bucket(t, self.n_buckets) for t in toks)
        ids_t = torch.as_tensor(ids, dtype=torch.long)
        off_t = torch.as_tensor(offsets, dtype=torch.long)
        return self.proj(self.bag(ids_t, off_t))


class PrecomputedTextEmbedder(nn.Module):
    """Frozen lookup of externally computed sentence vectors keyed by text digest."""

    kind = "precomputed"

    def __init__(self, digests: list[str], vectors: np.ndarray):
        super().__init__()
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(digests) != len(vectors):
            raise ValueError("need one vector per digest")
        self.out_dim = vectors.shape[1]
        self.digests = list(digests)
        self.index = {d: i for i, d in enumerate(self.digests)}
        self.register_buffer("table", torch.as_tensor(vectors, dtype=torch.float32))

    @classmethod
    def from_file(cls, path) -> "PrecomputedTextEmbedder":
        """Read ``{"digest": ..., "vector": [...]}`` records, one per line.

        ``text`` may be given instead of ``digest``.
        """
        digests, vectors = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    digest = obj["digest"] if "digest" in obj else text_digest(obj["text"])
                    vec = [float(v) for v in obj["vector"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad embedding record ({exc})") from None
                if vectors and len(vec) != len(vectors[0]):
                    raise ValueError(f"{path}:{lineno}: vector length {len(vec)} != {len(vectors[0])}")
                digests.append(digest)
                vectors.append(vec)
        if not vectors:
            raise ValueError(f"{path}: no embeddings")
        return cls(digests, np.array(vectors))

    def forward(self, texts: list[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            key = text_digest(text)
            if key not in self.index:
                raise UnknownTextError(f"no precomputed embedding for text {key} ({text[:40]!r})")
            rows.append(self.index[key])
        return self.table[torch.as_tensor(rows, dtype=torch.long)]


class FeatureEncoder(nn.Module):
    """Treats the k descriptor values as a length-k token sequence."""

    def __init__(self, n_props: int, hidden_dim: int, n_heads: int, n_layers: int):
        super().__init__()
        self.value = nn.Linear(1, hidden_dim)
        self.pos = nn.Parameter(torch.randn(n_props, hidden_dim) * 0.1)
        layer = nn.TransformerEncoderLayer(
            hidden_dim, n_heads, 2 * hidden_dim, dropout=0.0, activation="gelu", batch_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)

    def forward(self, feats):
        h = self.value(feats[..., None]) + self.pos
        return self.transformer(h).mean(1)


class AlignerNet(nn.Module):
    def __init__(
        self,
        text_encoder: nn.Module,
        shared_dim=128,
        hidden_dim=64,
        n_heads=4,
        n_layers=2,
        temperature=0.07,
        learnable_temperature=True,
        n_props=N_PROPERTIES,
    ):
        super().__init__()
        self.n_props = n_props
        self.text_encoder = text_encoder
        self.text_proj = nn.Linear(text_encoder.out_dim, shared_dim)
        self.feature_encoder = FeatureEncoder(n_props, hidden_dim, n_heads, n_layers)
        self.feature_proj = nn.Linear(hidden_dim, shared_dim)
        log_tau = torch.tensor(float(np.log(temperature)))
        if learnable_temperature:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    def tau(self):
        return self.log_tau.exp().clamp(*TEMPERATURE_BOUNDS)

    def embed_text(self, texts):
        t = self.text_encoder(texts).to(self.text_proj.weight.dtype)
        return F.normalize(self.text_proj(t), dim=-1)

    def embed_features(self, feats):
        if feats.dim() != 2 or feats.shape[1] != self.n_props:
            raise ValueError(f"features: expected shape (N, {self.n_props}), got {tuple(feats.shape)}")
        return F.normalize(self.feature_proj(self.feature_encoder(feats)), dim=-1)


def similarity_matrix(text_embs, feat_embs):
    """Cosine similarities between unit-norm rows; entry (i, j) pairs text i with features j."""
    return (text_embs @ feat_embs.T).clamp(-1.0, 1.0)


def mine_hard_negatives(sim, k: int = 1) -> list[tuple[int, int]]:
    """Top-``k`` off-diagonal entries of every row, highest first."""
    sim = torch.as_tensor(sim)
    n = sim.shape[0]
    if n < 2:
        raise ValueError("hard-negative mining needs at least 2 rows")
    k = min(k, n - 1)
    masked = sim.detach().clone()
    masked.fill_diagonal_(-float("inf"))
    top = masked.topk(k, dim=1).indices
    return [(i, int(j)) for i in range(n) for j in top[i]]


def contrastive_loss(sim, tau, symmetric: bool = False, hard_negatives=None, hard_negative_weight: float = 1.0):
    """Mean InfoNCE loss with matching pairs on the diagonal.

    ``hard_negatives`` (pairs from ``mine_hard_negatives``) have their
    denominator terms multiplied by ``hard_negative_weight``.
    """
    tau_value = float(torch.as_tensor(tau).detach())
    if tau_value <= 0:
        raise ValueError(f"temperature must be positive, got {tau_value}")
    logits = sim / tau
    if hard_negatives:
        bonus = torch.zeros_like(logits)
        rows, cols = zip(*hard_negatives)
        bonus[list(rows), list(cols)] = float(np.log(hard_negative_weight))
        logits = logits + bonus
    target = torch.arange(sim.shape[0])
    loss = F.cross_entropy(logits, target)
    if symmetric:
        logits_t = sim.T / tau
        if hard_negatives:
            logits_t = logits_t + bonus.T
        loss = 0.5 * (loss + F.cross_entropy(logits_t, target))
    return loss


class BioAligner(BaseEstimator):
    """Contrastive text/descriptor aligner.

    ``fit(texts, features)`` trains on matching pairs with in-batch
    negatives. ``features`` are global descriptor vectors in the normalized
    space used by the CVAE.

    Parameters
    ----------
    text_dim : int
        Width of the text embedding (384 matches MiniLM-style sentence vectors).
    shared_dim : int
        Width of the shared unit-norm space.
    temperature : float
        Initial softmax temperature; ``temperature_mode="learnable"`` trains
        its log, clamped to [0.01, 1].
    embedding_file : str or None
        Line-delimited precomputed text vectors; replaces the hashing encoder.
    """

    def __init__(
        self,
        text_dim=384,
        shared_dim=128,
        hidden_dim=64,
        n_heads=4,
        n_layers=2,
        n_buckets=4096,
        temperature=0.07,
        temperature_mode="learnable",
        symmetric=False,
        hard_negatives=False,
        hard_negative_k=1,
        hard_negative_weight=2.0,
        learning_rate=1e-3,
        batch_size=64,
        epochs=100,
        lr_step_epochs=30,
        lr_gamma=0.9,
        head_ridge=1e-3,
        random_state=0,
        dtype="float32",
        embedding_file=None,
    ):
        self.text_dim = text_dim
        self.shared_dim = shared_dim
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_buckets = n_buckets
        self.temperature = temperature
        self.temperature_mode = temperature_mode
        self.symmetric = symmetric
        self.hard_negatives = hard_negatives
        self.hard_negative_k = hard_negative_k
        self.hard_negative_weight = hard_negative_weight
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_step_epochs = lr_step_epochs
        self.lr_gamma = lr_gamma
        self.head_ridge = head_ridge
        self.random_state = random_state
        self.dtype = dtype
        self.embedding_file = embedding_file

    def _validate_params(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.temperature_mode not in ("fixed", "learnable"):
            raise ValueError(f"temperature_mode must be 'fixed' or 'learnable', got {self.temperature_mode!r}")
        for key in ("text_dim", "shared_dim", "hidden_dim", "n_heads", "n_layers", "batch_size"):
            if int(getattr(self, key)) <= 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")

    def _text_encoder(self, precomputed=None):
        if precomputed is not None:
            return precomputed
        if self.embedding_file:
            return PrecomputedTextEmbedder.from_file(self.embedding_file)
        return HashingTextEncoder(self.text_dim, self.n_buckets)

    def _build(self, precomputed=None):
        self._validate_params()
        self._torch_dtype = resolve_dtype(self.dtype)
        gen = seed_everything(self.random_state)
        net = AlignerNet(
            self._text_encoder(precomputed),
            self.shared_dim,
            self.hidden_dim,
            self.n_heads,
            self.n_layers,
            self.temperature,
            self.temperature_mode == "learnable",
        )
        self.net_ = net.to(self._torch_dtype)
        return gen

    def _feats(self, features):
        return torch.as_tensor(check_matrix(features, N_PROPERTIES, "features"), dtype=self._torch_dtype)

    def batch_loss(self, texts, feats):
        """Contrastive loss of one batch under the current parameters."""
        sim = similarity_matrix(self.net_.embed_text(texts), self.net_.embed_features(feats))
        hard = mine_hard_negatives(sim, self.hard_negative_k) if self.hard_negatives and len(texts) > 1 else None
        loss = contrastive_loss(sim, self.net_.tau(), self.symmetric, hard, self.hard_negative_weight)
        return loss, sim

    def fit(self, texts, features):
        texts = list(texts)
        if len(texts) < 2:
            raise ValueError("need at least 2 (text, features) pairs for in-batch negatives")
        if any(not t for t in texts):
            raise ValueError("texts must be non-empty")
        gen = self._build()
        feats = self._feats(features)
        if len(feats) != len(texts):
            raise ValueError(f"{len(texts)} texts but {len(feats)} feature rows")
        opt, sched = make_optimizer(
            [p for p in self.net_.parameters() if p.requires_grad],
            self.learning_rate,
            self.lr_step_epochs,
            self.lr_gamma,
        )
        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            tot_loss = tot_hit = 0.0
            for idx in batches(len(texts), self.batch_size, gen):
                if len(idx) < 2:
                    continue
                loss, sim = self.batch_loss([texts[i] for i in idx], feats[idx])
                check_finite(loss, "contrastive loss", epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot_loss += loss.item() * len(idx)
                tot_hit += (sim.argmax(1) == torch.arange(len(idx))).sum().item()
            sched.step()
            self.history_.append(
                {
                    "epoch": epoch,
                    "loss": tot_loss / len(texts),
                    "retrieval": tot_hit / len(texts),
                    "temperature": float(self.net_.tau().detach()),
                }
            )
            if epoch % 25 == 0 or epoch == 1:
                log.info("aligner epoch %d %s", epoch, self.history_[-1])
        self._fit_feature_head(texts, feats)
        return self

    @torch.no_grad()
    def _fit_feature_head(self, texts, feats):
        """Ridge map from text embeddings to descriptor vectors (decoder input in text mode)."""
        X = self.net_.embed_text(texts).double().numpy()
        Y = feats.double().numpy()
        X1 = np.hstack([X, np.ones((len(X), 1))])
        reg = self.head_ridge * np.eye(X1.shape[1])
        reg[-1, -1] = 0.0
        self.feature_head_ = np.linalg.solve(X1.T @ X1 + reg, X1.T @ Y)

    @torch.no_grad()
    def transform_text(self, texts) -> np.ndarray:
        check_is_fitted(self, "net_")
        texts = [texts] if isinstance(texts, str) else list(texts)
        if any(not t for t in texts):
            raise ValueError("texts must be non-empty")
        return self.net_.embed_text(texts).double().numpy()

    @torch.no_grad()
    def transform_features(self, features) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.net_.embed_features(self._feats(features)).double().numpy()

    def predict_features(self, texts) -> np.ndarray:
        """Descriptor vectors (normalized space) predicted from text."""
        X = self.transform_text(texts)
        return np.hstack([X, np.ones((len(X), 1))]) @ self.feature_head_

    def similarity(self, texts, features) -> np.ndarray:
        return np.clip(self.transform_text(texts) @ self.transform_features(features).T, -1.0, 1.0)

    def retrieval_accuracy(self, texts, features) -> float:
        """Top-1 text -> features retrieval accuracy among the given pairs."""
        sim = self.similarity(texts, features)
        return float(np.mean(sim.argmax(1) == np.arange(len(sim))))

    def save(self, path):
        check_is_fitted(self, "net_")
        arrays = state_to_arrays(self.net_)
        arrays["feature_head"] = self.feature_head_
        extra = {"history": getattr(self, "history_", []), "text_encoder": self.net_.text_encoder.kind}
        if isinstance(self.net_.text_encoder, PrecomputedTextEmbedder):
            extra["digests"] = self.net_.text_encoder.digests
        params = self.get_params()
        params["embedding_file"] = None
        save_checkpoint(path, "aligner", params, arrays, extra)

    @classmethod
    def load(cls, path):
        header, arrays = load_checkpoint(path, "aligner")
        model = cls(**header["config"])
        extra = header["extra"]
        pre = None
        if extra.get("text_encoder") == "precomputed":
            pre = PrecomputedTextEmbedder(extra["digests"], arrays["text_encoder.table"])
        model._build(pre)
        arrays_to_state(model.net_, arrays)
        model.feature_head_ = arrays["feature_head"]
        model.history_ = extra.get("history", [])
        return model


def text_to_condition(text: str, aligner: BioAligner) -> AlignedCondition:
    return AlignedCondition(aligner.transform_text([text])[0], "text")


def features_to_condition(features, aligner: BioAligner) -> AlignedCondition:
    return AlignedCondition(aligner.transform_features(np.atleast_2d(features))[0], "features")
