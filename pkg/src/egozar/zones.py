"""Activity-centric zone discovery.

Clip-averaged zone features are clustered with K-Means (k-means++ seeding,
several restarts); each sample's zone pseudo-label is the index of its
nearest centroid. The per-location variant clusters every domain separately
and greedily merges local clusters whose verb distributions are closest in
Jensen-Shannon divergence.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ezf
from .errors import ContractError, DimensionError, IngestionError, InsufficientPointsError, ParameterError

PLAIN = "plain"
PER_DOMAIN_MERGED = "per-domain-merged"


@dataclass
class ZoneCentroids:
    centroids: np.ndarray
    provenance: str = PLAIN
    source_cluster_map: dict[tuple[int, int], int] | None = None
    inertia: float | None = None
    inertia_history: list[float] = field(default_factory=list)
    sizes: list[int] | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ContractError(f"centroids must be a non-empty K x D array, got shape {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ContractError("centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class ZoneAssignment:
    sample_id: str | int | None
    zone: int
    distance: float


def mean_over_clips(x_z) -> np.ndarray:
    x_z = np.asarray(x_z, dtype=np.float64)
    if x_z.ndim < 2:
        raise DimensionError(f"expected (..., clips, dim) features, got shape {x_z.shape}")
    if x_z.shape[-2] == 0:
        raise IngestionError("cannot average over zero clips")
    return x_z.mean(axis=-2)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    M = len(points)
    chosen = [int(rng.integers(M))]
    d2 = _sq_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(M))
        else:
            idx = int(rng.choice(M, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_distances(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iter, tol):
    history = []
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(points)), labels].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        new = centroids.copy()
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        for j in range(len(centroids)):
            if not (labels == j).any():
                # reseed to the point farthest from its own centroid
                own = d2[np.arange(len(points)), labels]
                far = int(own.argmax())
                new[j] = points[far]
                labels[far] = j
                d2[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_distances(points, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    if inertia > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
    history.append(inertia)
    return centroids, labels, inertia, history


def fit_kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8, n_init: int = 10) -> ZoneCentroids:
    """Best-of-``n_init`` Lloyd runs from k-means++ seeds."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"fit_kmeans expects an M x D array, got shape {points.shape}")
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    if len(points) < k:
        raise InsufficientPointsError(f"fit_kmeans needs at least K={k} points, got {len(points)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeanspp(points, k, rng)
        run = _lloyd(points, init, max_iter, tol)
        if best is None or run[2] < best[2]:
            best = run
    centroids, labels, inertia, history = best
    sizes = np.bincount(labels, minlength=k).tolist()
    return ZoneCentroids(centroids, PLAIN, None, inertia, history, sizes)


def inertia(points, zc: ZoneCentroids) -> float:
    """Sum of squared distances from each point to its nearest centroid."""
    return float(_sq_distances(np.asarray(points, dtype=np.float64), zc.centroids).min(axis=1).sum())


def assign_zones(points, zc: ZoneCentroids) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised nearest-centroid labels and distances; ties go to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != zc.dim:
        raise DimensionError(f"points of shape {points.shape} do not match centroid dim {zc.dim}")
    d2 = _sq_distances(points, zc.centroids)
    labels = d2.argmin(axis=1)
    return labels, np.sqrt(d2[np.arange(len(points)), labels])


def assign_zone(x_z_mean, zc: ZoneCentroids, sample_id=None) -> ZoneAssignment:
    x = np.asarray(x_z_mean, dtype=np.float64)
    if x.shape != (zc.dim,):
        raise DimensionError(f"zone feature of shape {x.shape} does not match centroid dim {zc.dim}")
    labels, dist = assign_zones(x[None, :], zc)
    return ZoneAssignment(sample_id, int(labels[0]), float(dist[0]))


def js_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def smoothed_distribution(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return (counts + 1.0) / (counts.sum() + len(counts))


def per_domain_cluster_and_merge(
    points_by_domain: dict[int, np.ndarray],
    verbs_by_domain: dict[int, np.ndarray],
    k_per_domain: int,
    k_final: int,
    verb_count: int,
    seed: int = 0,
    n_init: int = 10,
) -> ZoneCentroids:
    """Cluster each domain separately, then greedily merge across domains.

    At every step the pair of groups with the smallest Jensen-Shannon
    divergence between their (add-one smoothed) verb distributions is merged,
    preferring pairs that share no domain. Ties go to the lowest group indices.
    """
    domains = sorted(points_by_domain)
    total_local = k_per_domain * len(domains)
    if not 1 <= k_final <= total_local:
        raise ParameterError(f"k_final must lie in [1, {total_local}], got {k_final}")

    groups = []
    for i, d in enumerate(domains):
        pts = np.asarray(points_by_domain[d], dtype=np.float64)
        verbs = np.asarray(verbs_by_domain[d], dtype=np.int64)
        if len(pts) < k_per_domain:
            raise InsufficientPointsError(
                f"domain {d} has {len(pts)} points, fewer than K_per_domain={k_per_domain}"
            )
        if len(verbs) != len(pts):
            raise DimensionError(f"domain {d}: {len(pts)} points but {len(verbs)} verb labels")
        local = fit_kmeans(pts, k_per_domain, seed=seed + i, n_init=n_init)
        labels, _ = assign_zones(pts, local)
        for j in range(k_per_domain):
            members = labels == j
            groups.append(
                {
                    "members": [(d, j)],
                    "domains": {d},
                    "counts": np.bincount(verbs[members], minlength=verb_count).astype(np.float64),
                    "weight": float(members.sum()),
                    "centroid": local.centroids[j].copy(),
                }
            )

    while len(groups) > k_final:
        pairs = [(a, b) for a in range(len(groups)) for b in range(a + 1, len(groups))]
        disjoint = [(a, b) for a, b in pairs if not groups[a]["domains"] & groups[b]["domains"]]
        best, best_js = None, np.inf
        for a, b in disjoint or pairs:
            js = js_divergence(smoothed_distribution(groups[a]["counts"]), smoothed_distribution(groups[b]["counts"]))
            if js < best_js:
                best, best_js = (a, b), js
        a, b = best
        ga, gb = groups[a], groups.pop(b)
        w = ga["weight"] + gb["weight"]
        if w > 0:
            ga["centroid"] = (ga["centroid"] * ga["weight"] + gb["centroid"] * gb["weight"]) / w
        else:
            ga["centroid"] = 0.5 * (ga["centroid"] + gb["centroid"])
        ga["weight"] = w
        ga["counts"] = ga["counts"] + gb["counts"]
        ga["members"] += gb["members"]
        ga["domains"] |= gb["domains"]

    mapping = {member: z for z, g in enumerate(groups) for member in g["members"]}
    return ZoneCentroids(
        np.stack([g["centroid"] for g in groups]),
        PER_DOMAIN_MERGED,
        mapping,
        sizes=[int(g["weight"]) for g in groups],
    )


def clustering_agreement(assignments, reference) -> float:
    """Normalised mutual information (arithmetic-mean normalisation)."""
    a = np.asarray(assignments)
    b = np.asarray(reference)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"labelings must be equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ContractError("clustering_agreement needs at least 2 labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    p = table / len(a)
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    ha = -float(np.sum(pa * np.log(pa)))
    hb = -float(np.sum(pb * np.log(pb)))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])))
    return float(min(1.0, max(0.0, mi / (0.5 * (ha + hb)))))


# ---------------------------------------------------------------- persistence


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_centroids(zc: ZoneCentroids, path) -> None:
    ezf.write_ezf(path, zc.centroids[:, None, :])
    meta = {
        "K": zc.K,
        "dim": zc.dim,
        "provenance": zc.provenance,
        "inertia": zc.inertia,
        "sizes": zc.sizes,
        "source_cluster_map": None
        if zc.source_cluster_map is None
        else [{"domain": d, "cluster": j, "zone": z} for (d, j), z in sorted(zc.source_cluster_map.items())],
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_centroids(path) -> ZoneCentroids:
    block = ezf.read_ezf(path)
    meta = {}
    side = sidecar_path(path)
    if os.path.exists(side):
        with open(side) as f:
            meta = json.load(f)
    mapping = meta.get("source_cluster_map")
    if mapping is not None:
        mapping = {(int(e["domain"]), int(e["cluster"])): int(e["zone"]) for e in mapping}
    return ZoneCentroids(
        block[:, 0, :].astype(np.float64),
        meta.get("provenance", PLAIN),
        mapping,
        inertia=meta.get("inertia"),
        sizes=meta.get("sizes"),
    )
