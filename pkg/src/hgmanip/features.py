"""Per-point feature providers and descriptor construction.

The synthetic providers stand in for large pretrained point-feature models.
Both push a per-point "semantic coordinate" plus a one-hot part label through
a fixed seeded random projection followed by a cosine nonlinearity (random
Fourier features), so cosine similarity between two points decays smoothly
with the distance between their semantic coordinates and is near zero across
different part labels. Each provider only recognises its own part vocabulary;
unknown labels contribute nothing.

* rigid provider: semantic coordinate = the ``nocs`` payload (shape-normalised
  object-frame coordinates). Clouds without ``nocs`` fall back to a
  geometry-only estimate (centroid-centred, extent-scaled world coordinates),
  which is neither pose- nor deformation-invariant.
* deformable provider: semantic coordinate = the ``uv`` payload (intrinsic
  material coordinates), unchanged by any deformation of the sheet.

Noise is seeded from the provider seed and a digest of the cloud's payloads,
so identical input gives identical output and world-frame motion of the same
object leaves the noise untouched.
"""
from __future__ import annotations

import enum
import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import HGMError
from .geometry import PointCloud, cosine_similarity_matrix

NUM_LABELS = 16
# the synthetic part vocabulary is split by category: each provider only
# recognises the part labels of the objects it was "trained" on
RIGID_LABELS = tuple(range(0, 8))
DEFORMABLE_LABELS = tuple(range(8, 16))


class ObjectCategory(str, enum.Enum):
    RIGID = "rigid"
    ARTICULATED = "articulated"
    DEFORMABLE = "deformable"


class FeatureProvider(ABC):
    id: str
    feature_dim: int

    @abstractmethod
    def compute(self, cloud: PointCloud) -> np.ndarray:
        """Return an (N, feature_dim) float64 feature matrix."""


def _payload_digest(cloud: PointCloud) -> int:
    h = hashlib.sha256()
    for name in sorted(cloud.payloads):
        if name == "features":
            continue
        arr = np.ascontiguousarray(cloud.payloads[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return int.from_bytes(h.digest()[:8], "little")


class _RandomFeatureProvider(FeatureProvider):
    coord_dim = 3

    def __init__(self, provider_id: str, embed_dim: int = 64, noise_sigma: float = 0.01,
                 num_labels: int = NUM_LABELS, length_scale: float = 0.35, seed: int = 0,
                 known_labels=None):
        self.id = provider_id
        self.known_labels = None if known_labels is None else frozenset(int(x) for x in known_labels)
        self.feature_dim = embed_dim
        self.noise_sigma = float(noise_sigma)
        self.num_labels = num_labels
        self.length_scale = length_scale
        self.seed = seed
        rng = np.random.default_rng(seed)
        coord_cols = rng.normal(0.0, 1.0 / length_scale, size=(embed_dim, self.coord_dim))
        label_cols = rng.normal(0.0, np.pi, size=(embed_dim, num_labels))
        # D x (coord_dim + L)
        self.projection = np.concatenate([coord_cols, label_cols], axis=1)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=embed_dim)

    @abstractmethod
    def semantic_coords(self, cloud: PointCloud) -> np.ndarray:
        ...

    def compute(self, cloud: PointCloud) -> np.ndarray:
        coords = self.semantic_coords(cloud)
        labels = cloud.payloads.get("label")
        onehot = np.zeros((len(cloud), self.num_labels))
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64) % self.num_labels
            rows = np.arange(len(cloud))
            if self.known_labels is not None:
                keep = np.isin(lab, sorted(self.known_labels))
                rows, lab = rows[keep], lab[keep]
            onehot[rows, lab] = 1.0
        z = np.concatenate([coords, onehot], axis=1) @ self.projection.T + self.phase
        feats = np.sqrt(2.0) * np.cos(z)
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, _payload_digest(cloud)])
            feats = feats + rng.normal(0.0, self.noise_sigma, size=feats.shape)
        return feats


class SyntheticRigidProvider(_RandomFeatureProvider):
    def __init__(self, embed_dim: int = 64, noise_sigma: float = 0.01, num_labels: int = NUM_LABELS,
                 length_scale: float = 0.35, seed: int = 11, provider_id: str = "rigid-synth",
                 known_labels=RIGID_LABELS):
        super().__init__(provider_id, embed_dim, noise_sigma, num_labels, length_scale, seed, known_labels)

    def semantic_coords(self, cloud: PointCloud) -> np.ndarray:
        if "nocs" in cloud.payloads:
            return np.asarray(cloud.payloads["nocs"], dtype=np.float64)
        pts = cloud.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        half = np.maximum((hi - lo) / 2.0, 1e-6)
        return (pts - (lo + hi) / 2.0) / half


class SyntheticDeformableProvider(_RandomFeatureProvider):
    coord_dim = 2

    def __init__(self, embed_dim: int = 64, noise_sigma: float = 0.01, num_labels: int = NUM_LABELS,
                 length_scale: float = 0.2, seed: int = 23, provider_id: str = "deform-synth",
                 known_labels=DEFORMABLE_LABELS):
        super().__init__(provider_id, embed_dim, noise_sigma, num_labels, length_scale, seed, known_labels)

    def semantic_coords(self, cloud: PointCloud) -> np.ndarray:
        if "uv" not in cloud.payloads:
            raise HGMError("no-intrinsic", "deformable provider needs a 'uv' payload")
        return np.asarray(cloud.payloads["uv"], dtype=np.float64)


def default_providers(noise_sigma: float = 0.01, embed_dim: int = 64) -> dict[str, FeatureProvider]:
    return {
        "rigid-synth": SyntheticRigidProvider(embed_dim=embed_dim, noise_sigma=noise_sigma),
        "deform-synth": SyntheticDeformableProvider(embed_dim=embed_dim, noise_sigma=noise_sigma),
    }


DEFAULT_REGISTRY: Mapping[ObjectCategory, str] = {
    ObjectCategory.RIGID: "rigid-synth",
    ObjectCategory.ARTICULATED: "rigid-synth",
    ObjectCategory.DEFORMABLE: "deform-synth",
}


def provider_for(category: ObjectCategory, registry: Mapping[ObjectCategory, str] | None = None,
                 providers: Mapping[str, FeatureProvider] | None = None) -> FeatureProvider:
    """Look up the provider registered for ``category``."""
    registry = DEFAULT_REGISTRY if registry is None else registry
    providers = default_providers() if providers is None else providers
    category = ObjectCategory(category)
    if category not in registry:
        raise HGMError("no-provider", f"no provider registered for {category.value}")
    pid = registry[category]
    if pid not in providers:
        raise HGMError("no-provider", f"provider {pid!r} is not constructed")
    return providers[pid]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray        # (D,)
    components: np.ndarray  # (k, D), orthonormal rows

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def fit_pca(X: np.ndarray, k: int = 5) -> PcaModel:
    """Top-``k`` principal directions of ``X`` via SVD of the centred data.

    Each component is sign-fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k < 1 or k > min(n, d):
        raise HGMError("pca-rank", f"k={k} with data {X.shape}")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaModel(mean=mean, components=comps)


def pca_project(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise HGMError("dim-mismatch", f"expected (N, {model.dim}), got {X.shape}")
    return (X - model.mean) @ model.components.T


def similarity_descriptor(features: np.ndarray, anchor_features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    anchor_features = np.asarray(anchor_features, dtype=np.float64)
    if anchor_features.ndim != 2 or anchor_features.shape[0] < 1:
        raise HGMError("dim-mismatch", "need at least one anchor row")
    return cosine_similarity_matrix(features, anchor_features)


@dataclass(frozen=True)
class DescriptorSet:
    values: np.ndarray  # (N, d + 3); last three columns are raw xyz
    route: str          # "pca" or "anchor-similarity"

    @property
    def semantic(self) -> np.ndarray:
        return self.values[:, :-3]

    @property
    def coords(self) -> np.ndarray:
        return self.values[:, -3:]


def descriptor_route(category: ObjectCategory) -> str:
    return "anchor-similarity" if ObjectCategory(category) is ObjectCategory.DEFORMABLE else "pca"


def semantic_part(features: np.ndarray, route: str, context) -> np.ndarray:
    if route == "pca":
        if not isinstance(context, PcaModel):
            raise HGMError("missing-context", "rigid/articulated descriptors need a fitted PcaModel")
        return pca_project(context, features)
    if context is None or isinstance(context, PcaModel):
        raise HGMError("missing-context", "deformable descriptors need anchor features")
    return similarity_descriptor(features, context)


def build_descriptors(cloud: PointCloud, category: ObjectCategory, provider: FeatureProvider,
                      context, route: str | None = None) -> DescriptorSet:
    """Compressed semantics concatenated with raw coordinates.

    ``route`` overrides the category-derived construction (used when a single
    provider is forced onto every object).
    """
    route = route or descriptor_route(category)
    if "features" in cloud.payloads:
        feats = np.asarray(cloud.payloads["features"], dtype=np.float64)
    else:
        feats = provider.compute(cloud)
    sem = semantic_part(feats, route, context)
    return DescriptorSet(np.concatenate([sem, cloud.points], axis=1), route)
