"""scikit-learn style estimators wrapping the embedding and segmentation code.

``PatchSubspaceEncoder`` turns patch data matrices into Grassmann points,
``DiscriminantGrassmannEmbedding`` learns the discriminant projection and
acts as a classifier/transformer on those points, and
``ManifoldCRFSegmenter`` trains from labelled volumes and segments new ones.
Subspace stacks may be passed either as ``(n, D, m)`` arrays or flattened to
``(n, D * m)``.
"""
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import crf
from .embedding import (InsufficientSamplesError, class_posterior_batch, embed_stack,
                        fit_embedding)
from .grassmann import KernelParams, subspace_stack
from .volume import Volume, extract_patch_stack, patch_footprint

__all__ = [
    "check_subspace_stack", "check_volume_pair", "PatchSubspaceEncoder",
    "DiscriminantGrassmannEmbedding", "ManifoldCRFSegmenter",
    "sample_training_patches",
]


def check_subspace_stack(X, subspace_dim=None):
    """Validate and reshape ``X`` into a finite ``(n, D, m)`` float stack."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        if subspace_dim is None or X.shape[1] % subspace_dim:
            raise ValueError(
                f"cannot unflatten X of shape {X.shape} with subspace_dim={subspace_dim}")
        X = X.reshape(X.shape[0], -1, subspace_dim)
    if X.ndim != 3:
        raise ValueError(f"expected an (n, D, m) stack or (n, D*m) matrix, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if subspace_dim is not None and X.shape[2] != subspace_dim:
        raise ValueError(f"expected subspace dimension {subspace_dim}, got {X.shape[2]}")
    return X


def check_volume_pair(volume, mask):
    if tuple(volume.data.shape) != tuple(mask.data.shape):
        raise ValueError(f"volume dims {volume.data.shape} != mask dims {mask.data.shape}")


class PatchSubspaceEncoder(TransformerMixin, BaseEstimator):
    """Map ``(n, D, p)`` patch data matrices to flattened orthonormal bases.

    Rank-deficient matrices keep zero columns beyond their rank.
    """

    def __init__(self, subspace_dim=5):
        self.subspace_dim = subspace_dim

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ValueError(f"expected (n, D, p) data matrices, got shape {X.shape}")
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ValueError(f"expected (n, D, p) data matrices, got shape {X.shape}")
        bases, self.ranks_ = subspace_stack(X, self.subspace_dim)
        return bases.reshape(len(bases), -1)


class DiscriminantGrassmannEmbedding(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Discriminant graph embedding on the Grassmann manifold.

    ``transform`` returns embedded coordinates, ``predict_proba`` the
    smoothed k-NN class posterior in the embedding.

    Parameters
    ----------
    alpha1, alpha2 : float
        Weights of the projection and canonical-correlation kernels.
    n_neighbors_within, n_neighbors_between : int
        Neighbourhood sizes of the within- and between-class graphs.
    n_components : int
        Embedding dimension.
    h : float
        Weight of the within-class term in the trace difference.
    n_neighbors : int
        Neighbours used by the posterior.
    subspace_dim : int
        Columns per basis; needed to unflatten 2D input.
    """

    def __init__(self, alpha1=1.0, alpha2=5.0, n_neighbors_within=10,
                 n_neighbors_between=5, n_components=6, h=1.0, n_neighbors=15,
                 subspace_dim=5, window=5, shift=2):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.n_neighbors_within = n_neighbors_within
        self.n_neighbors_between = n_neighbors_between
        self.n_components = n_components
        self.h = h
        self.n_neighbors = n_neighbors
        self.subspace_dim = subspace_dim
        self.window = window
        self.shift = shift

    def fit(self, X, y):
        X = check_subspace_stack(X, self.subspace_dim)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {self.classes_.tolist()}")
        self.model_ = fit_embedding(
            X, codes, KernelParams(self.alpha1, self.alpha2),
            k1=self.n_neighbors_within, k2=self.n_neighbors_between,
            d=self.n_components, h=self.h, classifier_k=self.n_neighbors,
            window=self.window, shift=self.shift)
        self.embedding_ = self.model_.train_embedded
        self.eigenvalues_ = self.model_.eigenvalues
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`~dgmseg.embedding.EmbeddingModel`."""
        est = cls(model.params.alpha1, model.params.alpha2, model.k1, model.k2,
                  model.d, model.h, model.classifier_k, model.m, model.window, model.shift)
        est.classes_ = np.array([0, 1])
        est.model_ = model
        est.embedding_ = model.train_embedded
        est.eigenvalues_ = model.eigenvalues
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed_stack(check_subspace_stack(X, self.model_.m), self.model_)

    def predict_proba(self, X):
        return class_posterior_batch(self.transform(X), self.model_)

    def predict(self, X):
        # ties go to the first class
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def _valid_region(shape, r):
    valid = np.zeros(shape, dtype=bool)
    valid[r:shape[0] - r, r:shape[1] - r, :] = True
    return valid


def _split_budget(total, parts):
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def sample_training_patches(volumes, masks, samples_per_class=200, band_radius=10,
                            window=5, shift=2, seed=0):
    """Draw tumor and nearby-normal patch matrices from labelled volumes.

    Centers are drawn uniformly without replacement, the per-class budget
    split evenly across volumes.  Normal centers come from non-tumor voxels
    within ``band_radius`` voxels of the tumor.  Returns ``(matrices,
    labels)``.
    """
    volumes, masks = list(volumes), list(masks)
    if len(volumes) != len(masks) or not volumes:
        raise ValueError("need one mask per volume and at least one pair")
    for v, m in zip(volumes, masks):
        check_volume_pair(v, m)
    spacings = {tuple(float(s) for s in v.spacing) for v in volumes}
    if len(spacings) > 1:
        raise ValueError(f"training volumes have different voxel spacings {sorted(spacings)}")
    rng = np.random.default_rng(seed)
    r = patch_footprint(window, shift)
    budget = _split_budget(samples_per_class, len(volumes))
    mats, labels = [], []
    for v, m, n in zip(volumes, masks, budget):
        data = np.asarray(v.data, dtype=float)
        reference = float(np.median(data))
        tumor = m.data.astype(bool)
        valid = _valid_region(tumor.shape, r)
        if tumor.any():
            near = ndimage.distance_transform_edt(~tumor) <= band_radius
        else:
            near = np.zeros_like(tumor)
        for label, region in ((1, tumor & valid), (0, near & ~tumor & valid)):
            idx = np.argwhere(region)
            if len(idx) < n:
                name = "tumor" if label else "normal"
                raise InsufficientSamplesError(
                    f"volume offers {len(idx)} {name} patch centers, {n} requested")
            if n == 0:
                continue
            pick = idx[np.sort(rng.choice(len(idx), n, replace=False))]
            for z in np.unique(pick[:, 2]):
                sel = pick[pick[:, 2] == z]
                mats.append(extract_patch_stack(data[:, :, z], sel[:, :2], window, shift,
                                                reference))
                labels.append(np.full(len(sel), label))
    return np.concatenate(mats), np.concatenate(labels)


class ManifoldCRFSegmenter(BaseEstimator):
    """Train a discriminant embedding from labelled volumes and segment new ones.

    ``fit(volumes, masks)`` samples patches and learns the embedding;
    ``predict(volume)`` returns a :class:`~dgmseg.volume.Mask`.
    """

    def __init__(self, alpha1=1.0, alpha2=5.0, subspace_dim=5, window=5, shift=2,
                 k1=10, k2=5, n_components=6, h=1.0, classifier_k=15,
                 w=1.0, sigma_f=None, truncation=None, lambda_max=32.0, beta_q=1.0,
                 k_f=5, sigma_scale=0.75, target_size=12, group_factor=4, samples_per_class=200,
                 band_radius=10, random_state=0):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.subspace_dim = subspace_dim
        self.window = window
        self.shift = shift
        self.k1 = k1
        self.k2 = k2
        self.n_components = n_components
        self.h = h
        self.classifier_k = classifier_k
        self.w = w
        self.sigma_f = sigma_f
        self.truncation = truncation
        self.lambda_max = lambda_max
        self.beta_q = beta_q
        self.k_f = k_f
        self.sigma_scale = sigma_scale
        self.target_size = target_size
        self.group_factor = group_factor
        self.samples_per_class = samples_per_class
        self.band_radius = band_radius
        self.random_state = random_state

    def _embedding(self):
        return DiscriminantGrassmannEmbedding(
            self.alpha1, self.alpha2, self.k1, self.k2, self.n_components, self.h,
            self.classifier_k, self.subspace_dim, self.window, self.shift)

    def potential_params(self):
        return crf.PotentialParams(w=self.w, sigma_f=self.sigma_f, truncation=self.truncation,
                                   lambda_max=self.lambda_max, beta_q=self.beta_q,
                                   k_f=self.k_f, sigma_scale=self.sigma_scale)

    def fit(self, volumes, masks):
        if isinstance(volumes, Volume):
            volumes, masks = [volumes], [masks]
        mats, labels = sample_training_patches(
            volumes, masks, self.samples_per_class, self.band_radius, self.window,
            self.shift, self.random_state)
        bases, _ = subspace_stack(mats, self.subspace_dim)
        self.embedding_ = self._embedding().fit(bases, labels)
        self.model_ = self.embedding_.model_
        return self

    def set_model(self, model):
        """Use a previously trained (e.g. loaded) embedding model."""
        self.embedding_ = DiscriminantGrassmannEmbedding.from_model(model)
        self.model_ = model
        self.window, self.shift, self.subspace_dim = model.window, model.shift, model.m
        return self

    def predict(self, volume, return_log=False):
        check_is_fitted(self, "model_")
        return crf.segment_volume(volume, self.model_, self.potential_params(),
                                  self.target_size, self.group_factor,
                                  seed=self.random_state, return_log=return_log)

    def score(self, volumes, masks):
        """Mean Dice over the given volume/mask pairs."""
        from .evaluation import dice
        if isinstance(volumes, Volume):
            volumes, masks = [volumes], [masks]
        return float(np.mean([dice(self.predict(v), m) for v, m in zip(volumes, masks)]))
