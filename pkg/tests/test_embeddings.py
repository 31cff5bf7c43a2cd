import json

import numpy as np
import pytest

from lalign.embeddings import (
    EmbeddingSet, PairedEmbeddings, SynthSpec, content_hash, load_bundle, load_csv, save_bundle,
    split_gallery_query, split_rows, synth_pair,
)
from lalign.errors import (
    DimMismatchError, InvalidSpecError, ManifestMismatchError, MisalignedError, MissingFileError,
    NonFiniteError, SingletonClassError,
)
from lalign.transforms import procrustes_fit


def write_raw(path, manifest, payload, labels=None):
    path.mkdir()
    (path / "manifest.json").write_text(json.dumps(manifest))
    (path / "vectors.bin").write_bytes(payload)
    if labels is not None:
        (path / "labels.txt").write_text("".join(f"{v}\n" for v in labels))


def test_load_bundle_size_arithmetic(tmp_path):
    payload = np.arange(8, dtype="<f4").tobytes()
    assert len(payload) == 32
    write_raw(tmp_path / "b", {"dim": 4, "count": 2, "has_labels": False}, payload)
    emb = load_bundle(tmp_path / "b")
    assert (emb.count, emb.dim) == (2, 4)
    assert not emb.has_labels


def test_load_bundle_count_mismatch(tmp_path):
    write_raw(tmp_path / "b", {"dim": 4, "count": 3, "has_labels": False}, np.zeros(8, "<f4").tobytes())
    with pytest.raises(ManifestMismatchError):
        load_bundle(tmp_path / "b")


def test_load_bundle_missing_and_bad_labels(tmp_path):
    with pytest.raises(MissingFileError):
        load_bundle(tmp_path / "nope")
    write_raw(tmp_path / "b", {"dim": 1, "count": 2, "has_labels": True}, np.zeros(2, "<f4").tobytes(), [0])
    with pytest.raises(ManifestMismatchError):
        load_bundle(tmp_path / "b")


def test_load_bundle_non_finite(tmp_path):
    write_raw(tmp_path / "b", {"dim": 2, "count": 1, "has_labels": False}, np.array([1.0, np.nan], "<f4").tobytes())
    with pytest.raises(NonFiniteError):
        load_bundle(tmp_path / "b")


def test_bundle_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vec = rng.normal(size=(13, 5)).astype(np.float32).astype(np.float64)
    emb = EmbeddingSet(vec, rng.integers(0, 4, 13), "m1")
    save_bundle(emb, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    np.testing.assert_array_equal(back.vectors, emb.vectors)
    np.testing.assert_array_equal(back.labels, emb.labels)
    assert back.model_tag == "m1"
    h = content_hash(tmp_path / "b")
    save_bundle(back, tmp_path / "b")
    assert content_hash(tmp_path / "b") == h


def test_load_csv(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("label,x0,x1\n0,1.5,2\n1,3,4\n")
    emb = load_csv(p)
    np.testing.assert_array_equal(emb.vectors, [[1.5, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(emb.labels, [0, 1])


def test_embedding_set_validation():
    with pytest.raises(NonFiniteError):
        EmbeddingSet(np.array([[np.inf]]))
    with pytest.raises(DimMismatchError):
        EmbeddingSet(np.zeros((2, 2)), [0])
    with pytest.raises(MisalignedError):
        PairedEmbeddings(EmbeddingSet(np.zeros((2, 2))), EmbeddingSet(np.zeros((3, 2))))


def test_synth_orthogonal_is_isometry():
    pair = synth_pair(SynthSpec(seed=3))
    def dists(x):
        return np.linalg.norm(x[:, None] - x[None], axis=2)
    assert np.abs(dists(pair.old.vectors) - dists(pair.new.vectors)).max() <= 1e-9


def test_synth_deterministic():
    a = synth_pair(SynthSpec(seed=5, new_model_distortion="affine+noise", noise=0.1))
    b = synth_pair(SynthSpec(seed=5, new_model_distortion="affine+noise", noise=0.1))
    np.testing.assert_array_equal(a.old.vectors, b.old.vectors)
    np.testing.assert_array_equal(a.new.vectors, b.new.vectors)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_affine_procrustes_worse_than_affine_fit():
    pair = synth_pair(SynthSpec(seed=1, new_model_distortion="affine", condition_number=5.0))
    src, tgt = pair.new.vectors, pair.old.vectors
    r = procrustes_fit(src, tgt)
    orth_mse = np.mean(np.sum((src @ r.T - tgt) ** 2, axis=1))
    x1 = np.hstack([src, np.ones((src.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(x1, tgt, rcond=None)
    aff_mse = np.mean(np.sum((x1 @ coef - tgt) ** 2, axis=1))
    assert orth_mse > aff_mse


def test_synth_invalid_spec():
    with pytest.raises(InvalidSpecError):
        synth_pair(SynthSpec(num_classes=0))
    with pytest.raises(InvalidSpecError):
        synth_pair(SynthSpec(new_model_distortion="shear"))
    with pytest.raises(InvalidSpecError):
        synth_pair(SynthSpec(num_classes=3, class_spread=(1.0, 2.0)))


def test_split_gallery_query_counts():
    emb = EmbeddingSet(np.arange(8.0).reshape(4, 2), [0, 0, 1, 1])
    loo = split_gallery_query(emb, seed=0)
    assert sorted(loo.query_order.tolist()) == [0, 1, 2, 3]
    for i in range(4):
        g = loo.gallery_for(i)
        assert g.size == 3 and i not in g


def test_split_gallery_query_singleton():
    with pytest.raises(SingletonClassError):
        split_gallery_query(EmbeddingSet(np.zeros((3, 2)), [0, 0, 1]))


def test_split_rows_partitions():
    pair = synth_pair(SynthSpec(per_class=5))
    a, b = split_rows(pair, 0.5, 0)
    assert a.count + b.count == pair.count
    assert a.count == 25
