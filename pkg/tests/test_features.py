import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propdiff.features import (
    ALPHABET,
    N_CHANNELS,
    PAD_INDEX,
    PROPERTY_NAMES,
    AminoAcidPropertyTable,
    PhyschemFeaturizer,
    PropertyTableError,
    SequenceError,
    decode_to_sequence,
    encode_one_hot,
    featurize,
    global_features,
    load_property_table,
    normalize_features,
    normalize_table,
)

peptides = st.text(alphabet=ALPHABET, min_size=1, max_size=128)


def test_table_shape_and_named_cells():
    t = load_property_table()
    assert t.values.shape == (20, 16)
    assert t.names == PROPERTY_NAMES
    assert t.lookup("A")["H_1"] == 0.62
    assert t.lookup("W")["p_2"] == 0.409
    assert t.lookup("G")["stc"] == 40.0
    assert t.lookup("T")["SASA"] == 81.525


def test_column_stats_match_rows():
    t = load_property_table()
    np.testing.assert_array_equal(t.mean, t.values.mean(0))
    np.testing.assert_array_equal(t.std, t.values.std(0))


def test_outliers_flags_known_anomalies_without_editing():
    t = load_property_table()
    flagged = {(aa, name) for aa, name, _ in t.outliers(n_std=4)}
    assert ("T", "SASA") in flagged and ("G", "stc") in flagged
    assert t.lookup("G")["stc"] == 40.0


def test_normalize_table_moments():
    z = normalize_table(load_property_table())
    np.testing.assert_allclose(z.values.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.values.std(0), 1.0, atol=1e-12)


def test_constant_column_normalizes_to_zero():
    vals = load_property_table().values.copy()
    vals[:, 3] = 2.5
    z = normalize_table(AminoAcidPropertyTable(vals))
    assert np.all(z.values[:, 3] == 0.0)
    assert np.all(normalize_features(vals[:2], AminoAcidPropertyTable(vals))[:, 3] == 0.0)


def test_csv_override_roundtrip(tmp_path):
    t = load_property_table()
    path = tmp_path / "t.csv"
    t.to_csv(path)
    np.testing.assert_array_equal(load_property_table(path).values, t.values)


def test_csv_override_names_bad_cell(tmp_path):
    path = tmp_path / "t.csv"
    load_property_table().to_csv(path)
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[5] = "abc"
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines))
    with pytest.raises(PropertyTableError, match=r"row D, column H_1"):
        load_property_table(path)


def test_csv_override_missing_row(tmp_path):
    path = tmp_path / "t.csv"
    load_property_table().to_csv(path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(l for l in lines if not l.startswith("K,")))
    with pytest.raises(PropertyTableError, match="K"):
        load_property_table(path)


def test_one_hot_examples():
    oh = encode_one_hot("A", 2)
    assert oh[0, ALPHABET.index("A")] == 1 and oh[1, PAD_INDEX] == 1
    oh = encode_one_hot("ACD", 3)
    assert oh.shape == (3, N_CHANNELS) and oh[:, PAD_INDEX].sum() == 0


def test_one_hot_rejects_nonstandard():
    with pytest.raises(SequenceError) as err:
        encode_one_hot("AXA", 3)
    assert err.value.position == 1 and err.value.char == "X"
    with pytest.raises(SequenceError):
        encode_one_hot("acd", 3)


def test_featurize_examples():
    t = load_property_table()
    np.testing.assert_array_equal(featurize("A", t, 4, normalized=False).global_, t["A"])
    assert featurize("AC", t, 4, normalized=False).global_[PROPERTY_NAMES.index("H_1")] == pytest.approx(0.455, abs=1e-15)
    b = featurize("AAAA", t, 6, normalized=False)
    np.testing.assert_array_equal(b.global_, t["A"])
    assert all(np.array_equal(b.local[i], t["A"]) for i in range(4))


@settings(max_examples=100, deadline=None)
@given(peptides)
def test_bundle_invariants(seq):
    b = featurize(seq, max_len=128)
    assert np.all(b.one_hot.sum(1) == 1.0)
    assert np.all(b.one_hot[len(seq):, PAD_INDEX] == 1.0)
    assert np.all(b.local[len(seq):] == 0.0)
    assert np.max(np.abs(b.global_ - b.local[: len(seq)].mean(0))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(peptides, st.randoms(use_true_random=False))
def test_global_is_permutation_invariant_and_bounded(seq, rnd):
    t = load_property_table()
    shuffled = "".join(rnd.sample(seq, len(seq)))
    g = global_features(seq, t, normalized=False)
    np.testing.assert_allclose(g, global_features(shuffled, t, normalized=False), rtol=1e-12, atol=1e-12)
    assert np.all(g >= t.column_min - 1e-12) and np.all(g <= t.column_max + 1e-12)


def test_featurize_is_pure():
    a, b = featurize("MKTAYIAK"), featurize("MKTAYIAK")
    assert a.global_.tobytes() == b.global_.tobytes() and a.local.tobytes() == b.local.tobytes()


def test_featurizer_estimator_api():
    f = PhyschemFeaturizer(max_len=16, normalized=False)
    assert f.get_params() == {"max_len": 16, "normalized": False, "table_path": None}
    X = f.fit_transform(["ACD", "WWW"])
    assert X.shape == (2, 16)
    assert list(f.get_feature_names_out()) == list(PROPERTY_NAMES)


def test_decode_length_rule():
    logits = np.zeros((20, N_CHANNELS))
    logits[:, ALPHABET.index("K")] = 1.0
    logits[12:, PAD_INDEX] = 5.0
    assert decode_to_sequence(logits, min_len=10) == "K" * 12
    assert decode_to_sequence(logits, min_len=14) == "K" * 14
    assert decode_to_sequence(logits, min_len=1, max_len=8) == "K" * 8


def test_decode_ties_break_to_lowest_channel():
    s = decode_to_sequence(np.zeros((10, N_CHANNELS)), min_len=1)
    assert s == "A" * 10
    assert s == decode_to_sequence(np.zeros((10, N_CHANNELS)), min_len=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decode_alphabet_and_bounds(seed):
    logits = np.random.default_rng(seed).normal(size=(32, N_CHANNELS))
    s = decode_to_sequence(logits, 5, 20)
    assert 5 <= len(s) <= 20 and set(s) <= set(ALPHABET)
