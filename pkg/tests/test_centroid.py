import numpy as np
import pytest
from hypothesis import given, strategies as st

from digmon.spectral import CORPUS_CLASSES
from digmon.spectral.centroid import (
    CentroidModel,
    InsufficientDataError,
    classify,
    classify_many,
    features,
    train_centroids,
)
from digmon.spectral.psd import compute_psd

FS = 50_000.0
T = np.arange(2000) / FS


def _tone_windows(f, n, seed, amp=4.0):
    rng = np.random.default_rng(seed)
    return [compute_psd(180 + amp * np.sin(2 * np.pi * f * T + rng.uniform(0, 2 * np.pi))
                        + rng.normal(0, 1, 2000)) for _ in range(n)]


def _undo(model, z):
    """Bins whose features standardize to ``z``."""
    return 10 ** ((z * model.scale + model.mean) / 10)


def test_features_are_db():
    b = np.array([1.0, 10.0, 0.0])
    np.testing.assert_allclose(features(b), [0.0, 10.0, -120.0])


def test_identical_windows_give_identical_centroids():
    w = _tone_windows(1000, 1, 0)[0]
    m = train_centroids({"a": [w] * 5, "b": [w] * 5})
    np.testing.assert_array_equal(m.centroids[0], m.centroids[1])
    assert m.n_train == (5, 5)


def test_centroid_is_mean_of_standardized_features():
    a, b = _tone_windows(1000, 6, 1), _tone_windows(3000, 7, 2)
    m = train_centroids({"a": a, "b": b})
    fa, fb = np.array([features(w) for w in a]), np.array([features(w) for w in b])
    allf = np.vstack([fa, fb])
    mean, sd = allf.mean(0), allf.std(0)
    np.testing.assert_allclose(m.centroids[0], ((fa - mean) / sd).mean(0), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(m.centroids[1], ((fb - mean) / sd).mean(0), rtol=1e-10, atol=1e-10)


def test_pairs_input_equivalent_to_mapping():
    a, b = _tone_windows(1000, 5, 3), _tone_windows(2000, 5, 4)
    m1 = train_centroids({"a": a, "b": b})
    m2 = train_centroids([("a", w) for w in a] + [("b", w) for w in b])
    np.testing.assert_array_equal(m1.centroids, m2.centroids)


def test_training_validation():
    a = _tone_windows(1000, 5, 0)
    with pytest.raises(InsufficientDataError):
        train_centroids({"a": a})
    with pytest.raises(InsufficientDataError):
        train_centroids({"a": a, "b": a[:4]})
    with pytest.raises(ValueError):
        train_centroids({"a": a, "b": [w.bins[:1000] for w in a]})


def test_duplicate_labels_rejected():
    from digmon.spectral import centroid

    a = _tone_windows(1000, 5, 0)

    class Dup(dict):
        def items(self):
            return [("x", a), ("x", a)]

    with pytest.raises(ValueError):
        centroid.train_centroids(Dup(x=a))


def test_centroid_classifies_as_itself():
    m = train_centroids({"a": _tone_windows(1000, 6, 5), "b": _tone_windows(3000, 6, 6),
                         "c": _tone_windows(7000, 6, 7)})
    for i, lab in enumerate(m.labels):
        got, margin = classify(_undo(m, m.centroids[i]), m)
        assert got == lab and margin > 0


def test_margin_definition():
    m = train_centroids({"a": _tone_windows(1000, 6, 8), "b": _tone_windows(3000, 6, 9)})
    w = _tone_windows(1000, 1, 10)[0]
    lab, margin = classify(w, m)
    z = m.standardize(features(w))
    d = np.linalg.norm(m.centroids - z, axis=1)
    assert lab == "a"
    assert margin == pytest.approx((d.max() - d.min()) / d.min())


def test_dimension_mismatch():
    m = train_centroids({"a": _tone_windows(1000, 5, 0), "b": _tone_windows(2000, 5, 1)})
    with pytest.raises(ValueError):
        classify(np.ones(100), m)
    with pytest.raises(ValueError):
        classify_many([np.ones(100)], m)


def test_classify_many_agrees_with_classify():
    m = train_centroids({"a": _tone_windows(1000, 5, 0), "b": _tone_windows(2000, 5, 1),
                         "c": _tone_windows(2500, 5, 2)})
    ws = _tone_windows(1000, 3, 3) + _tone_windows(2000, 3, 4) + _tone_windows(2500, 3, 5)
    assert classify_many(ws, m) == [classify(w, m)[0] for w in ws]


def test_save_load_roundtrip(tmp_path):
    m = train_centroids({"a": _tone_windows(1000, 5, 0), "b": _tone_windows(2000, 5, 1)})
    m.save(tmp_path / "m.dgcm")
    r = CentroidModel.load(tmp_path / "m.dgcm")
    assert r.labels == m.labels and r.n_train == m.n_train
    for x, y in ((r.centroids, m.centroids), (r.mean, m.mean), (r.scale, m.scale)):
        np.testing.assert_array_equal(x, y)
    (tmp_path / "bad").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        CentroidModel.load(tmp_path / "bad")
    raw = (tmp_path / "m.dgcm").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        CentroidModel.load(tmp_path / "short")


@given(st.floats(0, 2 * np.pi))
def test_phase_shift_invariance(phase):
    m = train_centroids({"low": _tone_windows(1500, 6, 0), "high": _tone_windows(4500, 6, 1)})
    x = 180 + 4 * np.sin(2 * np.pi * 4500 * T + phase) + np.random.default_rng(2).normal(0, 1, 2000)
    assert classify(compute_psd(x), m)[0] == "high"


@pytest.mark.slow
def test_corpus_separation(windows):
    train = {c: windows(c, 30, 100 + i) for i, c in enumerate(CORPUS_CLASSES)}
    m = train_centroids(train)
    correct = total = 0
    for i, c in enumerate(CORPUS_CLASSES):
        got = classify_many(windows(c, 30, 200 + i), m)
        correct += sum(g == c for g in got)
        total += len(got)
    assert correct / total >= 0.95
