"""Federated k-means over machine index vectors and majority-rule grouping.

Each client is a factory.  Clients only ever send the server three kinds of
message: per-dimension moment sums (for normalisation), local centroids with
their assignment counts, and nothing else.  The message classes below are the
whole client-to-server schema; :func:`check_message` enforces it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .dsp import index_vector
from .errors import ConfigurationError, DataError, ProtocolError

DEFAULT_K = 2
DEFAULT_EPS = 1e-3
DEFAULT_MAX_ROUNDS = 50


# ---------------------------------------------------------------------------
# Protocol messages (client -> server)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentReport:
    """Per-dimension count, sum and sum of squares of a client's vectors."""

    client_id: int
    count: int
    sums: np.ndarray
    sumsq: np.ndarray


@dataclass(frozen=True)
class CentroidReport:
    """Local centroids after Lloyd steps plus the number of points per centroid."""

    client_id: int
    centroids: np.ndarray
    counts: np.ndarray
    padded: bool = False

    @property
    def empty(self) -> bool:
        return int(np.sum(self.counts)) == 0


MESSAGE_SCHEMA = {
    MomentReport: ("client_id", "count", "sums", "sumsq"),
    CentroidReport: ("client_id", "centroids", "counts", "padded"),
}


def check_message(msg) -> None:
    """Raise :class:`ProtocolError` unless ``msg`` is an allowed payload."""
    allowed = MESSAGE_SCHEMA.get(type(msg))
    if allowed is None:
        raise ProtocolError(f"{type(msg).__name__} may not be sent to the server")
    names = tuple(f.name for f in fields(msg))
    if names != allowed:
        raise ProtocolError(f"{type(msg).__name__} carries unexpected fields {names}")


# ---------------------------------------------------------------------------
# Client and server state
# ---------------------------------------------------------------------------


@dataclass
class ClientClusterState:
    """Index vectors held by one factory.

    ``vectors``/``machine_ids`` cover normal-condition records only; machines
    without any normal record keep all their vectors in ``fallback`` so they
    can still be assigned a group.
    """

    factory_id: int
    vectors: np.ndarray
    machine_ids: np.ndarray
    fallback: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_records(cls, factory_id: int, vectors: np.ndarray, machine_ids: Sequence[int],
                     labels: np.ndarray) -> "ClientClusterState":
        vectors = np.asarray(vectors, dtype=np.float64)
        machine_ids = np.asarray(machine_ids)
        normal = ~np.asarray(labels).astype(bool).any(axis=1)
        fallback = {int(m): vectors[machine_ids == m]
                    for m in np.unique(machine_ids) if not normal[machine_ids == m].any()}
        return cls(factory_id, vectors[normal], machine_ids[normal], fallback)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def normalized(self, stats: "ClusterNorm") -> "ClientClusterState":
        return ClientClusterState(self.factory_id, stats.apply(self.vectors), self.machine_ids,
                                  {m: stats.apply(v) for m, v in self.fallback.items()})


@dataclass(frozen=True)
class ClusterNorm:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class GlobalCentroids:
    centroids: np.ndarray
    round: int = 0
    converged: bool = False
    gap: float = float("nan")     # max local-vs-global centroid distance in the last round

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class GroupAssignment:
    groups: dict[int, int]
    flagged: tuple[int, ...] = ()

    def members(self, group: int) -> list[int]:
        return sorted(m for m, g in self.groups.items() if g == group)

    def to_dict(self) -> dict:
        return {"groups": {str(m): g for m, g in sorted(self.groups.items())},
                "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupAssignment":
        return cls({int(m): int(g) for m, g in d["groups"].items()}, tuple(d.get("flagged", ())))


# ---------------------------------------------------------------------------
# Normalisation from moment sums
# ---------------------------------------------------------------------------


def moment_report(client: ClientClusterState) -> MomentReport:
    x = client.vectors
    return MomentReport(client.factory_id, int(x.shape[0]), x.sum(axis=0), (x * x).sum(axis=0))


def merge_moments(reports: Sequence[MomentReport]) -> ClusterNorm:
    for r in reports:
        check_message(r)
    n = sum(r.count for r in reports)
    if n == 0:
        raise DataError("no records to normalise")
    s = np.sum([r.sums for r in reports if r.count], axis=0)
    ss = np.sum([r.sumsq for r in reports if r.count], axis=0)
    mean = s / n
    var = np.maximum(ss / n - mean * mean, 0.0)
    std = np.sqrt(var)
    # relative test so constant dimensions survive round-off in ss/n - mean^2
    flat = std <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    std[flat] = 1.0
    return ClusterNorm(mean, std)


def federated_normalize(clients: Sequence[ClientClusterState]
                        ) -> tuple[ClusterNorm, list[ClientClusterState]]:
    """Global z-score stats from moment sums; returns stats and normalised clients."""
    if not clients or sum(len(c) for c in clients) == 0:
        raise DataError("federated normalisation needs at least one record")
    stats = merge_moments([moment_report(c) for c in clients])
    return stats, [c.normalized(stats) for c in clients]


# ---------------------------------------------------------------------------
# Lloyd steps and merging
# ---------------------------------------------------------------------------


def nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for every row; ties go to the lower index."""
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def lloyd_update(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One Lloyd iteration; empty clusters keep their previous centroid."""
    k = centroids.shape[0]
    lab = nearest(x, centroids)
    counts = np.bincount(lab, minlength=k)
    new = centroids.copy()
    for j in range(k):
        if counts[j]:
            new[j] = x[lab == j].mean(axis=0)
    return new, counts


def local_kmeans_step(client: ClientClusterState, global_: GlobalCentroids,
                      iters: int = 1) -> CentroidReport:
    g = np.asarray(global_.centroids, dtype=np.float64)
    if len(client) == 0:
        return CentroidReport(client.factory_id, g.copy(), np.zeros(g.shape[0], dtype=np.int64))
    # fewer distinct points than clusters: unused slots stay at the global centroids
    padded = np.unique(client.vectors, axis=0).shape[0] < g.shape[0]
    c, counts = g.copy(), None
    for _ in range(max(1, iters)):
        c, counts = lloyd_update(client.vectors, c)
    return CentroidReport(client.factory_id, c, counts.astype(np.int64), bool(padded))


def server_merge(reports: Sequence[CentroidReport], prev: GlobalCentroids) -> GlobalCentroids:
    """Count-weighted mean of client centroids matched to the nearest previous slot."""
    for r in reports:
        check_message(r)
    live = [r for r in reports if not r.empty]
    if not live:
        raise ProtocolError("server_merge received only empty reports")
    prev_c = np.asarray(prev.centroids, dtype=np.float64)
    k = prev_c.shape[0]
    acc = np.zeros_like(prev_c)
    weight = np.zeros(k)
    # fixed client order keeps floating-point sums independent of arrival order
    for r in sorted(live, key=lambda r: r.client_id):
        used = r.counts > 0
        slots = nearest(r.centroids[used], prev_c)
        for c, n, j in zip(r.centroids[used], r.counts[used], slots):
            acc[j] += n * c
            weight[j] += n
    merged = prev_c.copy()
    hit = weight > 0
    merged[hit] = acc[hit] / weight[hit, None]
    return GlobalCentroids(merged, prev.round + 1, False)


def kmeans_pp_init(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    if x.shape[0] < k:
        raise DataError(f"k-means++ needs at least {k} points, got {x.shape[0]}")
    centers, _ = kmeans_plusplus(np.asarray(x, dtype=np.float64), k, random_state=seed)
    return centers


def run_federated_kmeans(clients: Sequence[ClientClusterState], k: int = DEFAULT_K,
                         eps: float = DEFAULT_EPS, max_rounds: int = DEFAULT_MAX_ROUNDS,
                         seed: int = 0, init: np.ndarray | None = None) -> GlobalCentroids:
    """Broadcast / local Lloyd step / merge until the global centroids move < ``eps``.

    The first client with data seeds the global centroids with k-means++ unless
    ``init`` is given.
    """
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if max_rounds < 1:
        raise ConfigurationError("max_rounds must be positive")
    if init is None:
        first = next((c for c in clients if len(c)), None)
        if first is None:
            raise DataError("no client holds normal-condition records")
        init = kmeans_pp_init(first.vectors, k, seed)
    state = GlobalCentroids(np.array(init, dtype=np.float64), 0, False)
    for _ in range(max_rounds):
        reports = [local_kmeans_step(c, state) for c in clients]
        merged = server_merge(reports, state)
        merged.gap = max(float(np.linalg.norm(r.centroids - state.centroids, axis=1).max())
                         for r in reports if not r.empty)
        # non-IID clients keep a permanent local/global gap, so stop on global movement
        shift = float(np.linalg.norm(merged.centroids - state.centroids, axis=1).max())
        state = merged
        if shift < eps:
            state.converged = True
            break
    return state


# ---------------------------------------------------------------------------
# Group assignment
# ---------------------------------------------------------------------------


def majority_group(vectors: np.ndarray, centroids: np.ndarray) -> int:
    """Modal nearest-centroid label; ties resolved towards the lower group id."""
    if len(vectors) == 0:
        raise DataError("cannot assign a group from zero records")
    votes = np.bincount(nearest(np.asarray(vectors, dtype=np.float64), centroids),
                        minlength=centroids.shape[0])
    return int(np.argmax(votes))


def assign_groups(clients: Sequence[ClientClusterState], global_: GlobalCentroids
                  ) -> GroupAssignment:
    """Each client labels its own machines; only the mapping is shared."""
    groups, flagged = {}, []
    for c in clients:
        for m in np.unique(c.machine_ids):
            groups[int(m)] = majority_group(c.vectors[c.machine_ids == m], global_.centroids)
        for m, vecs in c.fallback.items():
            groups[int(m)] = majority_group(vecs, global_.centroids)
            flagged.append(int(m))
    return GroupAssignment(dict(sorted(groups.items())), tuple(sorted(flagged)))


# ---------------------------------------------------------------------------
# Centroid export
# ---------------------------------------------------------------------------


@dataclass
class CentroidExport:
    norm: ClusterNorm
    centroids: GlobalCentroids

    @property
    def k(self) -> int:
        return self.centroids.k

    @property
    def d(self) -> int:
        return self.centroids.centroids.shape[1]

    def group_of(self, raw_vectors: np.ndarray) -> int:
        return majority_group(self.norm.apply(np.atleast_2d(raw_vectors)), self.centroids.centroids)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "mean": self.norm.mean.tolist(),
            "std": self.norm.std.tolist(),
            "centroids": self.centroids.centroids.tolist(),
            "rounds": self.centroids.round,
            "converged": self.centroids.converged,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CentroidExport":
        cent = np.asarray(d["centroids"], dtype=np.float64)
        if cent.shape != (d["k"], d["d"]):
            raise ConfigurationError(f"centroid array {cent.shape} does not match k={d['k']}, d={d['d']}")
        norm = ClusterNorm(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))
        return cls(norm, GlobalCentroids(cent, int(d.get("rounds", 0)), bool(d.get("converged", False))))

    def save(self, path: str | Path) -> None:
        # repr-exact floats so a reload reproduces the centroids bit for bit
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "CentroidExport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigurationError(f"centroid export {path} not found") from None


def clients_from_dataset(config, dataset: Mapping[int, Sequence]) -> list[ClientClusterState]:
    """One client per factory holding the index vectors of its machines' records."""
    rates = [c.sampling_rate for c in config.channels]
    by_factory: dict[int, list] = {}
    for m in config.machines:
        by_factory.setdefault(m.factory_id, []).append(m.machine_id)
    clients = []
    for fid in sorted(by_factory):
        vecs, mids, labs = [], [], []
        for mid in by_factory[fid]:
            for r in dataset[mid]:
                vecs.append(index_vector(r.channels, rates, r.rotating_freq))
                mids.append(mid)
                labs.append(r.labels)
        clients.append(ClientClusterState.from_records(fid, np.array(vecs), mids, np.array(labs)))
    return clients


@dataclass
class ClusteringResult:
    export: CentroidExport
    assignment: GroupAssignment


def cluster_machines(clients: Sequence[ClientClusterState], k: int = DEFAULT_K,
                     eps: float = DEFAULT_EPS, max_rounds: int = DEFAULT_MAX_ROUNDS,
                     seed: int = 0) -> ClusteringResult:
    """Normalise, run federated k-means and assign every machine a group."""
    stats, normed = federated_normalize(clients)
    glob = run_federated_kmeans(normed, k, eps, max_rounds, seed)
    return ClusteringResult(CentroidExport(stats, glob), assign_groups(normed, glob))
