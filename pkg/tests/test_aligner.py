import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from propdiff.aligner import (
    AlignerNet,
    BioAligner,
    HashingTextEncoder,
    PrecomputedTextEmbedder,
    UnknownTextError,
    contrastive_loss,
    features_to_condition,
    mine_hard_negatives,
    similarity_matrix,
    text_digest,
    text_to_condition,
)

TEXTS = ["Species: Bacteria.\nKeyword: Ribosomal protein.", "Species: Homo.\nKeyword: Defensin.", "zinc finger", "capsid"]


def tiny_net(seed=0):
    torch.manual_seed(seed)
    return AlignerNet(HashingTextEncoder(16, 64), shared_dim=8, hidden_dim=8, n_heads=2, n_layers=1).double().eval()


def test_embed_text_deterministic_unit_norm_distinct():
    net = tiny_net()
    with torch.no_grad():
        a = net.embed_text(TEXTS)
        b = net.embed_text(TEXTS)
    assert torch.equal(a, b)
    torch.testing.assert_close(a.norm(dim=1), torch.ones(4, dtype=torch.float64), rtol=0, atol=1e-6)
    assert (a[0] @ a[1]).item() < 1.0


def test_embed_features_contract(rng):
    net = tiny_net()
    f = torch.as_tensor(rng.normal(size=(3, 16)))
    with torch.no_grad():
        a, b = net.embed_features(f), net.embed_features(f)
        perm = net.embed_features(f[:, torch.as_tensor(rng.permutation(16))])
    assert torch.equal(a, b)
    torch.testing.assert_close(a.norm(dim=1), torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-6)
    assert not torch.allclose(a, perm)
    with pytest.raises(ValueError, match=r"expected shape \(N, 16\)"):
        net.embed_features(f[:, :15])


def test_similarity_matrix_examples():
    e = torch.eye(3, dtype=torch.float64)
    torch.testing.assert_close(similarity_matrix(e, e), e)
    x = torch.nn.functional.normalize(torch.randn(4, 5, dtype=torch.float64), dim=1)
    y = torch.nn.functional.normalize(torch.randn(4, 5, dtype=torch.float64), dim=1)
    torch.testing.assert_close(similarity_matrix(x, y), similarity_matrix(y, x).T)
    assert similarity_matrix(x, y).abs().max() <= 1.0


def test_contrastive_examples():
    assert contrastive_loss(torch.tensor([[0.3]]), 0.07).item() == 0.0
    n = 5
    assert contrastive_loss(torch.full((n, n), 0.2, dtype=torch.float64), 0.5).item() == pytest.approx(math.log(n), abs=1e-12)
    sim = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
    # -log(e / (e + e^-1)), evaluated independently at high precision
    assert contrastive_loss(sim, 1.0).item() == pytest.approx(0.1269280110429725, abs=1e-12)


def test_contrastive_rejects_nonpositive_tau():
    with pytest.raises(ValueError, match="temperature"):
        contrastive_loss(torch.eye(2), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_contrastive_permutation_invariant(n, seed):
    g = np.random.default_rng(seed)
    sim = torch.as_tensor(g.uniform(-1, 1, size=(n, n)))
    p = torch.as_tensor(g.permutation(n))
    for sym in (False, True):
        a = contrastive_loss(sim, 0.1, symmetric=sym).item()
        b = contrastive_loss(sim[p][:, p], 0.1, symmetric=sym).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
        assert a >= 0


def test_raising_diagonal_lowers_loss(rng):
    sim = torch.as_tensor(rng.uniform(-1, 1, size=(4, 4)))
    before = contrastive_loss(sim, 0.2).item()
    sim[1, 1] += 0.3
    assert contrastive_loss(sim, 0.2).item() < before


def test_loss_vanishes_with_margin():
    sim = torch.full((3, 3), -1.0, dtype=torch.float64)
    sim.fill_diagonal_(1.0)
    # log(1 + 2 exp(-200)) is far below 1e-80
    assert contrastive_loss(sim, 0.01).item() < 1e-80


def test_hard_negatives():
    sim = torch.tensor([[1.0, 0.2], [0.1, 1.0]])
    assert mine_hard_negatives(sim) == [(0, 1), (1, 0)]
    big = torch.zeros(4, 4)
    big[2, 0] = 0.9
    pairs = mine_hard_negatives(big, k=2)
    assert all(i != j for i, j in pairs)
    assert [p for p in pairs if p[0] == 2][0] == (2, 0)


def test_hard_negative_weight_increases_loss(rng):
    sim = torch.as_tensor(rng.uniform(-1, 1, size=(4, 4)))
    hard = mine_hard_negatives(sim)
    assert contrastive_loss(sim, 0.1, hard_negatives=hard, hard_negative_weight=3.0) > contrastive_loss(sim, 0.1)
    torch.testing.assert_close(contrastive_loss(sim, 0.1, hard_negatives=hard, hard_negative_weight=1.0),
                               contrastive_loss(sim, 0.1))


def _tiny_aligner(**kw):
    return BioAligner(text_dim=16, shared_dim=8, hidden_dim=8, n_heads=2, n_layers=1, n_buckets=64,
                      batch_size=4, **kw)


def test_fit_requires_two_pairs():
    with pytest.raises(ValueError, match="at least 2"):
        _tiny_aligner(epochs=1).fit(TEXTS[:1], np.zeros((1, 16)))


def test_fit_history_and_temperature_bounds(rng):
    feats = rng.normal(size=(4, 16))
    m = _tiny_aligner(epochs=3, learning_rate=0.5).fit(TEXTS, feats)
    first = m.history_[0]["loss"]
    assert math.isfinite(first) and first > 0
    assert all(0.01 <= h["temperature"] <= 1.0 for h in m.history_)
    assert m.predict_features(TEXTS).shape == (4, 16)
    c = text_to_condition(TEXTS[0], m)
    assert c.provenance == "text" and abs(np.linalg.norm(c.vector) - 1) < 1e-6
    np.testing.assert_array_equal(c.vector, text_to_condition(TEXTS[0], m).vector)
    f = features_to_condition(feats[0], m)
    np.testing.assert_allclose(f.vector, m.transform_features(feats[:1])[0])


def test_fixed_temperature_stays_put(rng):
    m = _tiny_aligner(epochs=2, temperature_mode="fixed", temperature=0.2).fit(TEXTS, rng.normal(size=(4, 16)))
    assert all(h["temperature"] == pytest.approx(0.2) for h in m.history_)


def test_save_load_roundtrip(tmp_path, rng):
    feats = rng.normal(size=(4, 16))
    m = _tiny_aligner(epochs=2).fit(TEXTS, feats)
    m.save(tmp_path / "a.npz")
    m2 = BioAligner.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(m2.similarity(TEXTS, feats), m.similarity(TEXTS, feats))
    np.testing.assert_array_equal(m2.predict_features(TEXTS), m.predict_features(TEXTS))


def test_precomputed_embeddings(tmp_path, rng):
    path = tmp_path / "emb.jsonl"
    vecs = rng.normal(size=(4, 16))
    with open(path, "w") as fh:
        for i, (t, v) in enumerate(zip(TEXTS, vecs)):
            key = {"digest": text_digest(t)} if i % 2 else {"text": t}
            fh.write(json.dumps({**key, "vector": v.tolist()}) + "\n")
    emb = PrecomputedTextEmbedder.from_file(path)
    np.testing.assert_allclose(emb(TEXTS).numpy(), vecs, rtol=1e-6)
    with pytest.raises(UnknownTextError, match="sha256:"):
        emb(["never seen"])
    m = _tiny_aligner(epochs=2, embedding_file=str(path)).fit(TEXTS, rng.normal(size=(4, 16)))
    m.save(tmp_path / "a.npz")
    m2 = BioAligner.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(m2.transform_text(TEXTS), m.transform_text(TEXTS))
