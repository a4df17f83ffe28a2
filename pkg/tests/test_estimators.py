import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dgmseg.embedding import InsufficientSamplesError
from dgmseg.estimators import (DiscriminantGrassmannEmbedding, ManifoldCRFSegmenter,
                               PatchSubspaceEncoder, check_subspace_stack,
                               sample_training_patches)
from dgmseg.evaluation import dice
from dgmseg.volume import Mask, Volume

from conftest import random_bases, small_phantom
from test_embedding import two_cluster_set


def test_check_subspace_stack(rng):
    X = random_bases(rng, 4)
    assert check_subspace_stack(X.reshape(4, -1), 5).shape == (4, 25, 5)
    with pytest.raises(ValueError):
        check_subspace_stack(X.reshape(4, -1), 7)
    with pytest.raises(ValueError):
        check_subspace_stack(np.zeros((0, 25, 5)))
    bad = X.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_subspace_stack(bad)
    with pytest.raises(ValueError):
        check_subspace_stack(X, 4)


def test_encoder(rng):
    mats = rng.standard_normal((3, 25, 25))
    mats[2] = 0
    enc = PatchSubspaceEncoder(subspace_dim=5)
    out = enc.fit_transform(mats)
    assert out.shape == (3, 125)
    assert enc.ranks_.tolist() == [5, 5, 0]
    b = out[0].reshape(25, 5)
    assert np.allclose(b.T @ b, np.eye(5), atol=1e-12)


def test_embedding_estimator_api(rng):
    pts, labels = two_cluster_set(rng, 20)
    est = DiscriminantGrassmannEmbedding(n_neighbors_within=5, n_neighbors_between=3,
                                         n_components=3, n_neighbors=5)
    assert est.get_params()["n_components"] == 3
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(pts)
    named = np.where(labels == 1, "tumor", "normal")
    est.fit(pts.reshape(40, -1), named)
    assert est.classes_.tolist() == ["normal", "tumor"]
    assert est.transform(pts).shape == (40, 3)
    proba = est.predict_proba(pts)
    assert np.all(proba.sum(axis=1) == 1.0)
    assert est.score(pts, named) > 0.9
    with pytest.raises(ValueError):
        est.fit(pts, np.zeros(40))
    with pytest.raises(ValueError):
        est.fit(pts, labels[:10])


def test_from_model_round_trip(rng):
    pts, labels = two_cluster_set(rng, 20)
    est = DiscriminantGrassmannEmbedding(n_neighbors_within=5, n_neighbors_between=3,
                                         n_components=3, n_neighbors=5).fit(pts, labels)
    wrapped = DiscriminantGrassmannEmbedding.from_model(est.model_)
    assert np.array_equal(wrapped.transform(pts), est.transform(pts))
    assert wrapped.get_params() == est.get_params()


def test_sample_training_patches():
    vol, mask = small_phantom(3)
    mats, labels = sample_training_patches([vol], [mask], 40, seed=1)
    assert mats.shape == (80, 25, 25)
    assert np.bincount(labels).tolist() == [40, 40]
    again, _ = sample_training_patches([vol], [mask], 40, seed=1)
    assert np.array_equal(mats, again)
    other, _ = sample_training_patches([vol], [mask], 40, seed=2)
    assert not np.array_equal(mats, other)


def test_sample_training_patches_errors():
    vol, mask = small_phantom(3)
    empty = Mask(np.zeros(mask.dims, dtype=np.uint8))
    with pytest.raises(InsufficientSamplesError):
        sample_training_patches([vol], [empty], 20)
    with pytest.raises(ValueError):
        sample_training_patches([vol], [Mask(np.zeros((4, 4, 4), dtype=np.uint8))], 20)
    with pytest.raises(ValueError):
        sample_training_patches([vol, Volume(vol.data, (0.5, 0.5, 1.0))],
                                [mask, Mask(mask.data, (0.5, 0.5, 1.0))], 20)
    with pytest.raises(ValueError):
        sample_training_patches([vol], [], 20)


def test_segmenter(trained_segmenter):
    assert clone(trained_segmenter).get_params() == trained_segmenter.get_params()
    vol, mask = small_phantom(11)
    pred = trained_segmenter.predict(vol)
    assert pred.dims == vol.dims
    assert dice(pred, mask) > 0.8
    assert trained_segmenter.score(vol, mask) == dice(pred, mask)
    with pytest.raises(NotFittedError):
        ManifoldCRFSegmenter().predict(vol)


def test_segmenter_set_model(trained_segmenter):
    seg = ManifoldCRFSegmenter(window=3, shift=1).set_model(trained_segmenter.model_)
    assert (seg.window, seg.shift, seg.subspace_dim) == (5, 2, 5)
    vol, _ = small_phantom(12, dims=(40, 40, 20), diameter=10)
    assert seg.predict(vol) == trained_segmenter.predict(vol)
