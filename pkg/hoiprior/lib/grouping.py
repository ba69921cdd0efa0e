"""Ray-geometry distances and top-k neighbor grouping of 2D keypoint views.

Two views of the same 3D keypoints have rays which meet, so the mean distance
between corresponding rays measures how well two 2D layouts agree on a 3D
interaction. The grouping is an iterative neighbor-of-neighbor refinement
started from random neighbor sets. Distances are computed once up front as a
dense matrix, in row chunks to bound memory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import Array, ArrayLike, IndexArray, as_array
from hoiprior.lib.error import ConfigError, DatasetTooSmallError, DimensionMismatchError, ValidationError
from hoiprior.lib.models import CameraPose, Intrinsics, Keypoints2D, Rep25D
from hoiprior.lib.util import config_from_dict

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

PARALLEL_TOLERANCE = 1e-9
CRITERIA = ("anchor", "cluster")


@dataclass(frozen=True)
class GroupingConfig:
    """Settings for the neighbor grouping.

    Attributes
    ----------
    k : int
        Neighbors per item, default 8.
    n_iter : int
        Refinement iterations, default 10.
    sim_threshold : float
        A candidate is only accepted while its flattened representation is
        closer than this to every current member, default 100.
    drop_distance : float
        Cluster entries further than this, in meters, are dropped, default 0.5.
    rng_seed : int
        Seed of the random initial neighbor sets and candidates, default 0.
    criterion : str
        "anchor" compares candidates by their distance to the item itself,
        "cluster" by their mean distance to the item and its current
        neighbors. Default "anchor".
    n_random : int
        Random items added to every candidate pool in each iteration, default
        4. With 0 the pools hold only neighbors and reverse neighbors.
    chunk_size : int
        Rows per block when building the distance matrix, default 64.

    """

    k: int = 8
    n_iter: int = 10
    sim_threshold: float = 100.0
    drop_distance: float = 0.5
    rng_seed: int = 0
    criterion: str = "anchor"
    n_random: int = 4
    chunk_size: int = 64

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.k < 1 or self.n_iter < 1 or self.chunk_size < 1:
            msg = "k, n_iter and chunk_size must be at least 1"
            raise ConfigError(msg)
        if self.n_random < 0:
            msg = "n_random must be nonnegative"
            raise ConfigError(msg)
        if self.sim_threshold <= 0 or self.drop_distance <= 0:
            msg = "sim_threshold and drop_distance must be positive"
            raise ConfigError(msg)
        if self.criterion not in CRITERIA:
            msg = f"Unknown grouping criterion '{self.criterion}', expected one of {CRITERIA}"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> GroupingConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


# Dataset index -------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetItem:
    """One view: its 2D keypoints, camera and 2.5D representation."""

    image_id: str
    rep: Rep25D
    keypoints: Keypoints2D
    camera: CameraPose
    intrinsics: Intrinsics
    family: int | None = None


@dataclass(frozen=True)
class DatasetIndex:
    """A set of views with unique ids, all with the same number of keypoints.

    The rays, camera centers and flattened representations are cached as
    numpy arrays for the distance computations.
    """

    items: list[DatasetItem]
    directions: Array = field(init=False, repr=False)
    translations: Array = field(init=False, repr=False)
    flat: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Check the ids and sizes, and cache the arrays."""
        ids = [item.image_id for item in self.items]
        if len(set(ids)) != len(ids):
            msg = "Dataset image ids must be unique"
            raise ValidationError(msg)
        if len({item.rep.n for item in self.items}) > 1:
            msg = "Every item in a dataset index must have the same number of keypoints"
            raise DimensionMismatchError(msg)
        object.__setattr__(self, "directions", np.stack([as_array(i.rep.directions) for i in self.items]))
        object.__setattr__(self, "translations", np.stack([as_array(i.rep.cam_translation) for i in self.items]))
        object.__setattr__(self, "flat", np.stack([as_array(i.rep.flatten()) for i in self.items]))

    def __len__(self) -> int:
        """The number of items."""
        return len(self.items)

    @property
    def families(self) -> list[int | None]:
        """The family label of each item."""
        return [item.family for item in self.items]


@dataclass(frozen=True)
class NeighborSets:
    """The neighbor set of every item and the reverse sets.

    Attributes
    ----------
    neighbors : IndexArray
        The (N, k) neighbor indices; row p is sorted by distance to p, ties
        by lower index.
    reverse : list[frozenset[int]]
        reverse[p] = {i | p in neighbors[i]}.
    swaps : list[int]
        The number of accepted swaps in each iteration.

    """

    neighbors: IndexArray
    reverse: list[frozenset[int]]
    swaps: list[int] = field(default_factory=list)

    @classmethod
    def from_neighbors(cls, neighbors: ArrayLike, swaps: list[int] | None = None) -> NeighborSets:
        """Build the reverse sets from the forward sets.

        Parameters
        ----------
        neighbors : ArrayLike
            The (N, k) neighbor indices.
        swaps : list[int] | None
            The per-iteration swap counts, if any.

        Returns
        -------
        NeighborSets
            The neighbor sets.

        """
        neighbors = np.asarray(neighbors, dtype=np.int64)
        reverse: list[set[int]] = [set() for _ in range(neighbors.shape[0])]
        for p, row in enumerate(neighbors):
            if p in row:
                msg = f"Item {p} is its own neighbor"
                raise ValidationError(msg)
            if len(set(row.tolist())) != len(row):
                msg = f"Item {p} has a repeated neighbor"
                raise ValidationError(msg)
            for i in row:
                reverse[int(i)].add(p)
        return cls(neighbors, [frozenset(r) for r in reverse], list(swaps or []))

    @property
    def k(self) -> int:
        """The number of neighbors per item."""
        return int(self.neighbors.shape[1])

    def is_consistent(self) -> bool:
        """Check p in reverse[q] exactly when q in neighbors[p]."""
        expected = NeighborSets.from_neighbors(self.neighbors).reverse
        return expected == list(self.reverse)

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"neighbors": self.neighbors.tolist(), "swaps": list(self.swaps)}

    @classmethod
    def from_dict(cls, values: dict) -> NeighborSets:
        """Create from a dict written by to_dict."""
        return cls.from_neighbors(values["neighbors"], values.get("swaps"))


@dataclass(frozen=True)
class ClusterEntry:
    """A retained neighbor: its 2D keypoints, camera and distance."""

    image_id: str
    keypoints: Keypoints2D
    camera: CameraPose
    intrinsics: Intrinsics
    distance: float


@dataclass(frozen=True)
class Cluster:
    """The neighboring views of one image, sorted by ascending distance."""

    image_id: str
    index: int
    entries: list[ClusterEntry]

    @property
    def is_empty(self) -> bool:
        """Whether every neighbor was dropped."""
        return not self.entries


# Distances -----------------------------------------------------------------------


def _ray_distances(d1: Array, t1: Array, d2: Array, t2: Array) -> Array:
    """Get line-to-line distances for broadcastable arrays of rays.

    Parameters
    ----------
    d1, t1, d2, t2 : Array
        Unit directions and origins with a trailing axis of 3.

    Returns
    -------
    Array
        The distances, with the broadcast shape minus the last axis.

    """
    cross = np.cross(d1, d2)
    cross_norm = np.linalg.norm(cross, axis=-1)
    diff = t1 - t2
    skew = np.abs(np.sum(cross * diff, axis=-1)) / np.where(cross_norm < PARALLEL_TOLERANCE, 1.0, cross_norm)
    along = np.sum(diff * d1, axis=-1)
    parallel = np.linalg.norm(diff - along[..., None] * d1, axis=-1)
    return np.where(cross_norm < PARALLEL_TOLERANCE, parallel, skew)


def ray_pair_distance(d: ArrayLike, t: ArrayLike, d2: ArrayLike, t2: ArrayLike) -> float:
    """Get the distance between two rays, treated as infinite lines.

    Parameters
    ----------
    d : ArrayLike
        The unit direction of the first ray.
    t : ArrayLike
        The origin of the first ray.
    d2 : ArrayLike
        The unit direction of the second ray.
    t2 : ArrayLike
        The origin of the second ray.

    Returns
    -------
    float
        The distance in meters. Skew lines use the normalised triple product,
        parallel lines the point-to-line distance.

    """
    d, t, d2, t2 = (as_array(v).reshape(3) for v in (d, t, d2, t2))
    if np.linalg.norm(np.cross(d, d2)) < PARALLEL_TOLERANCE:
        # The parallel case is symmetric up to the direction used to project.
        return float(0.5 * (_ray_distances(d, t, d2, t2) + _ray_distances(d2, t2, d, t)))
    return float(_ray_distances(d, t, d2, t2))


def rep_distance(a: Rep25D, b: Rep25D) -> float:
    """Get the mean distance between corresponding rays of two views.

    Parameters
    ----------
    a : Rep25D
        The first view.
    b : Rep25D
        The second view.

    Returns
    -------
    float
        The distance in meters.

    """
    if a.n != b.n:
        msg = f"Cannot compare views with {a.n} and {b.n} keypoints"
        raise DimensionMismatchError(msg)
    distances = _ray_distances(
        as_array(a.directions),
        as_array(a.cam_translation)[None],
        as_array(b.directions),
        as_array(b.cam_translation)[None],
    )
    return float(np.mean(distances))


def pairwise_distances(ds: DatasetIndex, chunk_size: int = 64) -> Array:
    """Get the symmetric matrix of view distances with a zero diagonal.

    Parameters
    ----------
    ds : DatasetIndex
        The views.
    chunk_size : int
        Rows computed per block.

    Returns
    -------
    Array
        The (N, N) distances.

    """
    n_items = len(ds)
    distances = np.zeros((n_items, n_items))
    dirs, trans = ds.directions, ds.translations
    for start in range(0, n_items, chunk_size):
        stop = min(start + chunk_size, n_items)
        block = _ray_distances(
            dirs[start:stop, None],
            trans[start:stop, None, None],
            dirs[None],
            trans[None, :, None],
        )
        distances[start:stop] = block.mean(axis=-1)
    distances = 0.5 * (distances + distances.T)
    np.fill_diagonal(distances, 0.0)
    return distances


def representation_distances(ds: DatasetIndex) -> Array:
    """Get the flattened Euclidean distances between every pair of views."""
    return cdist(ds.flat, ds.flat)


# Grouping ------------------------------------------------------------------------


def _check_size(ds: DatasetIndex, k: int) -> None:
    if len(ds) <= k:
        msg = f"Need more than k={k} items to find k neighbors, got {len(ds)}"
        raise DatasetTooSmallError(msg)


def _sort_rows(neighbors: IndexArray, distances: Array) -> IndexArray:
    """Sort each neighbor row by distance to its item, ties by lower index."""
    rows = []
    for p, row in enumerate(neighbors):
        order = np.lexsort((row, distances[p, row]))
        rows.append(row[order])
    return np.asarray(rows, dtype=np.int64).reshape(neighbors.shape)


def brute_force_topk(ds: DatasetIndex, k: int, distances: Array | None = None) -> NeighborSets:
    """Get the exact k nearest neighbors of every item.

    Parameters
    ----------
    ds : DatasetIndex
        The views.
    k : int
        The number of neighbors.
    distances : Array | None
        A precomputed distance matrix.

    Returns
    -------
    NeighborSets
        The exact neighbor sets, ties broken by lower index.

    """
    _check_size(ds, k)
    distances = pairwise_distances(ds) if distances is None else distances.copy()
    np.fill_diagonal(distances, np.inf)
    order = np.argsort(distances, axis=1, kind="stable")
    return NeighborSets.from_neighbors(order[:, :k])


def random_neighbors(n_items: int, k: int, rng: np.random.Generator) -> IndexArray:
    """Draw k distinct random neighbors for every item, excluding itself.

    Parameters
    ----------
    n_items : int
        The number of items.
    k : int
        The number of neighbors.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    IndexArray
        The (N, k) neighbor indices.

    """
    neighbors = np.empty((n_items, k), dtype=np.int64)
    for p in range(n_items):
        choice = rng.choice(n_items - 1, size=k, replace=False)
        neighbors[p] = choice + (choice >= p)
    return neighbors


def cluster_spread(distances: Array, p: int, members: ArrayLike, criterion: str = "anchor") -> float:
    """Get the quantity a grouping swap must decrease for item p.

    Parameters
    ----------
    distances : Array
        The (N, N) distance matrix.
    p : int
        The item.
    members : ArrayLike
        The neighbor indices of p.
    criterion : str
        "anchor" gives the mean distance from p to its neighbors, "cluster"
        the mean pairwise distance over p and its neighbors, self pairs
        included.

    Returns
    -------
    float
        The spread in meters.

    """
    members = np.asarray(members, dtype=np.int64)
    if criterion == "anchor":
        return float(distances[p, members].mean())
    cluster = np.concatenate([[p], members])
    return float(distances[np.ix_(cluster, cluster)].mean())


class _GroupingState:
    """The mutable neighbor sets and cached worst members of one grouping run."""

    def __init__(self, neighbors: IndexArray, distances: Array, similarities: Array, criterion: str) -> None:
        self.neighbors = [list(map(int, row)) for row in neighbors]
        self.members = [set(row) for row in self.neighbors]
        self.reverse: list[set[int]] = [set() for _ in self.neighbors]
        for p, row in enumerate(self.neighbors):
            for i in row:
                self.reverse[i].add(p)
        self.distances = distances
        self.similarities = similarities
        self.criterion = criterion
        self._worst: dict[int, tuple[float, int]] = {}

    def _cluster(self, p: int) -> list[int]:
        return [p, *self.neighbors[p]]

    def worst_member(self, p: int) -> tuple[float, int]:
        """Get d_max and the slot of i_max for item p, cached until p's set changes."""
        if p not in self._worst:
            row = np.asarray(self.neighbors[p])
            if self.criterion == "cluster":
                spread = self.distances[np.ix_(row, self._cluster(p))].mean(axis=1)
            else:
                spread = self.distances[p, row]
            slot = int(np.argmax(spread))
            self._worst[p] = (float(spread[slot]), slot)
        return self._worst[p]

    def candidate_distance(self, p: int, q: int) -> float:
        """Get d_q, the distance of a candidate q to item p's cluster."""
        if self.criterion == "cluster":
            return float(self.distances[q, self._cluster(p)].mean())
        return float(self.distances[p, q])

    def try_swap(self, p: int, q: int, sim_threshold: float) -> bool:
        """Replace p's worst member by q when q is closer and similar enough."""
        if q == p or q in self.members[p]:
            return False
        d_max, slot = self.worst_member(p)
        if not self.candidate_distance(p, q) < d_max:
            return False
        if not self.similarities[q, self.neighbors[p]].max() < sim_threshold:
            return False
        i_max = self.neighbors[p][slot]
        self.neighbors[p][slot] = q
        self.members[p].remove(i_max)
        self.members[p].add(q)
        self.reverse[i_max].discard(p)
        self.reverse[q].add(p)
        self._worst.pop(p, None)
        return True

    def mean_spread(self) -> float:
        """Get the spread averaged over every item."""
        return float(
            np.mean([cluster_spread(self.distances, p, row, self.criterion) for p, row in enumerate(self.neighbors)]),
        )


def knn_group(ds: DatasetIndex, cfg: GroupingConfig, distances: Array | None = None) -> NeighborSets:
    """Group views into approximate top-k neighbor sets.

    Starting from random neighbor sets, every iteration visits each item t and
    tries every ordered pair (p, q) of distinct items from its neighbors,
    reverse neighbors and cfg.n_random freshly drawn random items. q replaces
    the member of p's set with the largest spread when q's distance is
    strictly smaller and q's flattened representation is within
    sim_threshold of every member.

    The random items reach views that no current neighbor set links to, such
    as the own scene of a view whose set settled among another scene.

    Parameters
    ----------
    ds : DatasetIndex
        The views.
    cfg : GroupingConfig
        The grouping settings.
    distances : Array | None
        A precomputed distance matrix.

    Returns
    -------
    NeighborSets
        The neighbor sets, each row sorted by distance.

    """
    _check_size(ds, cfg.k)
    distances = pairwise_distances(ds, cfg.chunk_size) if distances is None else distances
    similarities = representation_distances(ds)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    n_items = len(ds)
    state = _GroupingState(random_neighbors(n_items, cfg.k, rng), distances, similarities, cfg.criterion)

    swaps = []
    for iteration in range(cfg.n_iter):
        extra = rng.integers(0, n_items, size=(n_items, cfg.n_random))
        accepted = 0
        for t in range(n_items):
            candidates = sorted(state.members[t] | state.reverse[t] | set(extra[t].tolist()))
            for p in candidates:
                for q in candidates:
                    accepted += state.try_swap(p, q, cfg.sim_threshold)
        swaps.append(accepted)
        LOGGER.debug(
            "Grouping iteration %d accepted %d swaps, mean spread %.4f m",
            iteration + 1,
            accepted,
            state.mean_spread(),
        )

    LOGGER.info("Grouped %d items into %d-neighbor sets, %d swaps in total", n_items, cfg.k, sum(swaps))
    return NeighborSets.from_neighbors(_sort_rows(np.asarray(state.neighbors), distances), swaps)


def ground_truth_neighbors(ds: DatasetIndex, k: int, distances: Array | None = None) -> NeighborSets:
    """Group views by their ground-truth family labels.

    Members of an item's own family come first, nearest first; other items
    only fill in when the family has fewer than k other members.

    Parameters
    ----------
    ds : DatasetIndex
        The views, each with a family label.
    k : int
        The number of neighbors.
    distances : Array | None
        A precomputed distance matrix.

    Returns
    -------
    NeighborSets
        The neighbor sets.

    """
    _check_size(ds, k)
    families = ds.families
    if any(f is None for f in families):
        msg = "Ground truth grouping needs a family label on every item"
        raise ValidationError(msg)
    distances = pairwise_distances(ds) if distances is None else distances
    labels = np.asarray(families)
    index = np.arange(len(ds))
    rows = []
    for p in range(len(ds)):
        other_family = (labels != labels[p]).astype(np.int64)
        order = np.lexsort((index, distances[p], other_family))
        rows.append(order[order != p][:k])
    return NeighborSets.from_neighbors(np.asarray(rows))


def recall_at_k(approx: NeighborSets, exact: NeighborSets) -> float:
    """Get the mean fraction of exact neighbors an approximate grouping found.

    Parameters
    ----------
    approx : NeighborSets
        The approximate neighbor sets.
    exact : NeighborSets
        The exact neighbor sets.

    Returns
    -------
    float
        The recall, in [0, 1].

    """
    if approx.neighbors.shape != exact.neighbors.shape:
        msg = "Neighbor sets must have the same shape to compare them"
        raise DimensionMismatchError(msg)
    hits = [len(set(a.tolist()) & set(e.tolist())) for a, e in zip(approx.neighbors, exact.neighbors, strict=True)]
    return float(np.sum(hits) / exact.neighbors.size)


def build_clusters(ds: DatasetIndex, ns: NeighborSets, drop_distance: float) -> list[Cluster]:
    """Build the cluster of every item from its neighbor set.

    Parameters
    ----------
    ds : DatasetIndex
        The views.
    ns : NeighborSets
        The neighbor sets.
    drop_distance : float
        Neighbors further than this are dropped.

    Returns
    -------
    list[Cluster]
        One cluster per item, entries sorted by ascending distance.

    """
    if ns.neighbors.shape[0] != len(ds):
        msg = f"Neighbor sets cover {ns.neighbors.shape[0]} items but the dataset has {len(ds)}"
        raise DimensionMismatchError(msg)
    clusters = []
    for p, row in enumerate(ns.neighbors):
        block = _ray_distances(
            ds.directions[p][None],
            ds.translations[p][None, None],
            ds.directions[row],
            ds.translations[row][:, None],
        ).mean(axis=-1)
        entries = [
            ClusterEntry(
                ds.items[i].image_id,
                ds.items[i].keypoints,
                ds.items[i].camera,
                ds.items[i].intrinsics,
                float(d),
            )
            for d, i in sorted(zip(block.tolist(), row.tolist(), strict=True))
            if d <= drop_distance
        ]
        clusters.append(Cluster(ds.items[p].image_id, p, entries))
    empty = sum(c.is_empty for c in clusters)
    if empty:
        LOGGER.info(
            "%d of %d clusters are empty after dropping neighbors beyond %.3f m",
            empty,
            len(clusters),
            drop_distance,
        )
    return clusters
