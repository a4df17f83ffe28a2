"""Discriminant Grassmannian manifold embedding and higher-order CRF segmentation.

Image patches are turned into subspaces (points on a Grassmann manifold),
a discriminant graph embedding separating lesion from normal texture is
learned from labelled examples, and volumes are segmented slice by slice
with a CRF over superpixels whose potentials live in the embedding.
"""
from .config import PipelineConfig, dump_config, load_config
from .crf import PotentialParams, minimize, segment_volume, total_energy
from .embedding import (EmbeddingModel, InsufficientSamplesError, class_posterior, embed,
                        fit_embedding, load_model, save_model)
from .estimators import (DiscriminantGrassmannEmbedding, ManifoldCRFSegmenter,
                         PatchSubspaceEncoder)
from .evaluation import MetricReport, report
from .grassmann import KernelParams, RankDeficiencyError, SubspacePoint, orthonormalize
from .volume import (Mask, PhantomSpec, Volume, VolumeFormatError, generate_phantom,
                     load_mask, load_volume, save_mask, save_volume)

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "dump_config", "load_config", "PotentialParams", "minimize",
    "segment_volume", "total_energy", "EmbeddingModel", "InsufficientSamplesError",
    "class_posterior", "embed", "fit_embedding", "load_model", "save_model",
    "DiscriminantGrassmannEmbedding", "ManifoldCRFSegmenter", "PatchSubspaceEncoder",
    "MetricReport", "report", "KernelParams", "RankDeficiencyError", "SubspacePoint",
    "orthonormalize", "Mask", "PhantomSpec", "Volume", "VolumeFormatError",
    "generate_phantom", "load_mask", "load_volume", "save_mask", "save_volume",
]
