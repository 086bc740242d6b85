"""Inference-time dataset identification via k-means prototypes.

Each dataset is summarized by k cluster centers over feature embeddings.
At test time an input is assigned to the dataset owning the globally
nearest center, and that dataset's expert makes the prediction. The
feature extractor is either the frozen backbone or, in the plus-plus
variant, the backbone with the first expert's adapters attached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vit
from .errors import ContractError, NumericError, ShapeError
from .experts import predict_with_expert

__all__ = [
    "EXTRACTOR_FROZEN",
    "EXTRACTOR_FIRST_EXPERT",
    "PrototypeSet",
    "Router",
    "kmeans",
    "extract_features",
    "fit_prototypes",
    "identify_dataset",
    "route_and_predict",
]

EXTRACTOR_FROZEN = "frozen"
EXTRACTOR_FIRST_EXPERT = "first_expert"
_EXTRACTOR_TAGS = (EXTRACTOR_FROZEN, EXTRACTOR_FIRST_EXPERT)


def _squared_distances(points: np.ndarray, centers: np.ndarray,
                       chunk: int = 512) -> np.ndarray:
    """(n, d) x (k, d) -> (n, k) squared Euclidean distances.

    Computed from explicit differences (not the dot-product expansion) so a
    point sitting exactly on a center reports a distance of exactly zero.
    Chunked over points to bound the (chunk, k, d) intermediate.
    """
    out = np.empty((len(points), len(centers)))
    for start in range(0, len(points), chunk):
        diff = points[start:start + chunk, None, :] - centers[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared distance."""
    n = len(points)
    centers = [points[int(rng.integers(n))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers)


# independent seedings per call; the lowest-inertia run wins, which keeps
# small-k solutions stable without giving up determinism
_KMEANS_RESTARTS = 5


def _lloyd(pts: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int) -> tuple:
    """One Lloyd run from a k-means++ seeding: (centers, wcss history)."""
    n = len(pts)
    centers = _seed_centers(pts, k, rng)
    assign = None
    history = []
    for _ in range(max_iters):
        d2 = _squared_distances(pts, centers)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        nearest_d2 = d2[np.arange(n), new_assign]
        for j in range(k):
            members = new_assign == j
            if members.any():
                centers[j] = pts[members].mean(axis=0)
            else:
                centers[j] = pts[nearest_d2.argmax()]
    return centers, history


def kmeans(points, k: int, seed: int, max_iters: int = 100,
           return_history: bool = False):
    """Best of several seeded Lloyd runs. Returns (k, d) centers,
    optionally with the winning run's per-iteration within-cluster sum
    of squares (non-increasing).

    Empty clusters are reseeded to the point farthest from its center.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"k-means expects (n, d) points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NumericError("k-means input contains non-finite values")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = len(pts)
    if n < k:
        raise ContractError(f"k-means needs at least k={k} points, got {n}")

    best = None
    for restart in range(_KMEANS_RESTARTS):
        rng = np.random.default_rng([seed, restart])
        centers, history = _lloyd(pts, k, rng, max_iters)
        if best is None or history[-1] < best[1][-1]:
            best = (centers, history)
    centers, history = best
    if return_history:
        return centers, history
    return centers


@dataclass
class PrototypeSet:
    """k cluster centers summarizing one dataset's feature distribution."""

    dataset_id: str
    centroids: np.ndarray
    extractor_tag: str

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) == 0:
            raise ShapeError(f"centroids must be (k, d), got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise NumericError(f"non-finite centroid for dataset {self.dataset_id!r}")
        if self.extractor_tag not in _EXTRACTOR_TAGS:
            raise ContractError(f"unknown extractor tag {self.extractor_tag!r}")

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass
class Router:
    """Insertion-ordered collection of per-dataset prototype sets.

    All sets share one extractor tag; ties in nearest-center distance go
    to the earliest-registered dataset.
    """

    extractor_tag: str = EXTRACTOR_FROZEN
    prototype_sets: list = field(default_factory=list)

    def __post_init__(self):
        if self.extractor_tag not in _EXTRACTOR_TAGS:
            raise ContractError(f"unknown extractor tag {self.extractor_tag!r}")

    @property
    def dataset_ids(self):
        return [ps.dataset_id for ps in self.prototype_sets]

    def add(self, prototype_set: PrototypeSet):
        if prototype_set.extractor_tag != self.extractor_tag:
            raise ContractError(
                f"prototype set tagged {prototype_set.extractor_tag!r} cannot "
                f"join a {self.extractor_tag!r} router")
        if prototype_set.dataset_id in self.dataset_ids:
            raise ContractError(f"dataset {prototype_set.dataset_id!r} already routed")
        self.prototype_sets.append(prototype_set)

    def identify_features(self, features: np.ndarray):
        """(n, d) features -> list of dataset_ids owning the nearest center."""
        if not self.prototype_sets:
            raise ContractError("router has no prototype sets")
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        stacked = np.vstack([ps.centroids for ps in self.prototype_sets])
        owners = np.concatenate([
            np.full(ps.k, i) for i, ps in enumerate(self.prototype_sets)])
        nearest = _squared_distances(features, stacked).argmin(axis=1)
        return [self.prototype_sets[owners[j]].dataset_id for j in nearest]

    def named_arrays(self):
        return [(f"router.{ps.dataset_id}.centroids", ps.centroids)
                for ps in self.prototype_sets]


def extract_features(images, backbone: vit.ViTParams, extractor_tag: str,
                     first_expert=None) -> np.ndarray:
    """Embed images with the router's extractor."""
    if extractor_tag == EXTRACTOR_FROZEN:
        return vit.embed_images(images, backbone)
    if extractor_tag == EXTRACTOR_FIRST_EXPERT:
        if first_expert is None or not first_expert.trained:
            raise ContractError(
                "first_expert extractor needs the trained first expert")
        return vit.embed_images(images, backbone, adapters=first_expert.adapter_set)
    raise ContractError(f"unknown extractor tag {extractor_tag!r}")


def fit_prototypes(images, backbone: vit.ViTParams, k: int, seed: int, *,
                   dataset_id: str, extractor_tag: str = EXTRACTOR_FROZEN,
                   first_expert=None) -> PrototypeSet:
    """Cluster the dataset's embeddings into k prototypes."""
    features = extract_features(images, backbone, extractor_tag, first_expert)
    centroids = kmeans(features, k, seed)
    return PrototypeSet(dataset_id=dataset_id, centroids=centroids,
                        extractor_tag=extractor_tag)


def identify_dataset(x, router: Router, backbone: vit.ViTParams,
                     first_expert=None) -> str:
    """Single image -> dataset_id of the globally nearest prototype."""
    features = extract_features(np.asarray(x), backbone, router.extractor_tag,
                                first_expert)
    return router.identify_features(features)[0]


def route_and_predict(x, router: Router, experts_by_id: dict,
                      backbone: vit.ViTParams, first_expert=None):
    """Single image -> (global class id, identified dataset_id)."""
    dataset_id = identify_dataset(x, router, backbone, first_expert)
    expert = experts_by_id.get(dataset_id)
    if expert is None:
        raise ContractError(f"no trained expert for dataset {dataset_id!r}")
    class_id, _ = predict_with_expert(expert, x, backbone)
    return class_id, dataset_id
