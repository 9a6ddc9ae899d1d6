"""Tests for federated normalisation, federated k-means and group assignment."""

from dataclasses import dataclass

import numpy as np
import pytest
from sklearn.cluster import KMeans

from fedpfd.errors import ConfigurationError, DataError, ProtocolError
from fedpfd.fedclust import (CentroidExport, CentroidReport, ClientClusterState, GlobalCentroids,
                             GroupAssignment, check_message, cluster_machines,
                             clients_from_dataset, federated_normalize, local_kmeans_step,
                             majority_group, merge_moments, moment_report, run_federated_kmeans,
                             server_merge)
from fedpfd.synth import default_scenario, generate_scenario


def _client(fid, x, mids=None):
    x = np.asarray(x, dtype=np.float64)
    mids = np.full(len(x), fid) if mids is None else np.asarray(mids)
    return ClientClusterState(fid, x, mids)


def _blobs(seed=0, n=60, d=3):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0] * d, [8.0] * d, [-6.0, 9.0, 2.0][:d]])
    lab = rng.integers(0, 3, n)
    return centres[lab] + rng.standard_normal((n, d))


def _lloyd(x, c, iters=100):
    for _ in range(iters):
        lab = np.argmin(((x[:, None] - c[None]) ** 2).sum(-1), axis=1)
        c = np.array([x[lab == j].mean(0) if (lab == j).any() else c[j] for j in range(len(c))])
    return c


class TestNormalization:
    def test_matches_pooled_statistics(self):
        rng = np.random.default_rng(0)
        parts = [rng.normal(3, 2, (n, 4)) for n in (5, 17, 9)]
        stats, normed = federated_normalize([_client(i, p) for i, p in enumerate(parts)])
        pooled = np.vstack(parts)
        np.testing.assert_allclose(stats.mean, pooled.mean(0), rtol=1e-12)
        np.testing.assert_allclose(stats.std, pooled.std(0), rtol=1e-9)
        z = np.vstack([c.vectors for c in normed])
        np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)

    def test_constant_dimension_unit_scale(self):
        x = np.column_stack([np.full(6, 7.0), np.arange(6.0)])
        stats = merge_moments([moment_report(_client(1, x))])
        assert stats.std[0] == 1.0

    def test_empty(self):
        with pytest.raises(DataError):
            federated_normalize([_client(1, np.zeros((0, 2)))])


class TestKMeans:
    def test_two_point_example(self):
        c = _client(1, [[0.0], [0.0], [10.0], [10.0]])
        g = run_federated_kmeans([c], k=2, init=np.array([[1.0], [9.0]]))
        np.testing.assert_array_equal(np.sort(g.centroids[:, 0]), [0.0, 10.0])
        assert g.converged

    def test_single_client_equals_centralised_lloyd(self):
        x = _blobs()
        init = x[[0, 1, 2]].copy()
        g = run_federated_kmeans([_client(1, x)], k=3, eps=1e-12, max_rounds=200, init=init)
        ref = KMeans(3, init=init, n_init=1, algorithm="lloyd", tol=0, max_iter=300).fit(x)
        np.testing.assert_allclose(g.centroids, _lloyd(x, init), atol=1e-9)
        np.testing.assert_allclose(g.centroids, ref.cluster_centers_, atol=1e-9)

    def test_merge_is_count_weighted(self):
        prev = GlobalCentroids(np.array([[1.0], [11.0]]))
        a = CentroidReport(1, np.array([[0.0], [10.0]]), np.array([1, 3]))
        b = CentroidReport(2, np.array([[2.0], [12.0]]), np.array([3, 1]))
        merged = server_merge([a, b], prev)
        np.testing.assert_allclose(merged.centroids, [[1.5], [10.5]])
        assert merged.round == 1

    def test_merge_matches_nearest_previous_slot(self):
        prev = GlobalCentroids(np.array([[0.0], [10.0]]))
        # a client whose slots are swapped relative to the global order
        swapped = CentroidReport(1, np.array([[9.0], [1.0]]), np.array([2, 2]))
        merged = server_merge([swapped], prev)
        np.testing.assert_allclose(merged.centroids, [[1.0], [9.0]])

    def test_empty_cluster_keeps_global(self):
        prev = GlobalCentroids(np.array([[0.0], [100.0]]))
        rep = local_kmeans_step(_client(1, [[1.0], [2.0]]), prev)
        np.testing.assert_array_equal(rep.counts, [2, 0])
        merged = server_merge([rep], prev)
        assert merged.centroids[1, 0] == 100.0

    def test_client_order_invariant(self):
        x = _blobs(1)
        clients = [_client(i, x[i::3]) for i in range(3)]
        init = x[[0, 5, 9]]
        a = run_federated_kmeans(clients, 3, init=init)
        b = run_federated_kmeans(clients[::-1], 3, init=init)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_deterministic_with_seed(self):
        clients = [_client(i, _blobs(i)) for i in range(3)]
        a = run_federated_kmeans(clients, 3, seed=4)
        b = run_federated_kmeans(clients, 3, seed=4)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_non_iid_clients_converge(self):
        x = _blobs(2, n=200)
        lab = np.argmin(((x[:, None] - x[[0, 1, 2]][None]) ** 2).sum(-1), 1)
        # each client sees a skewed mixture of the blobs
        clients = [_client(i, x[(lab == i) | (np.arange(200) % 7 == i)]) for i in range(3)]
        g = run_federated_kmeans(clients, 3, seed=0)
        assert g.converged and g.round < 50

    def test_bad_k(self):
        with pytest.raises(ConfigurationError):
            run_federated_kmeans([_client(1, _blobs())], k=1)


class TestPrivacy:
    def test_messages_follow_schema(self):
        c = _client(1, _blobs())
        for msg in (moment_report(c), local_kmeans_step(c, GlobalCentroids(_blobs()[:2]))):
            check_message(msg)

    def test_message_size_independent_of_record_count(self):
        small, big = _client(1, _blobs(n=10)), _client(2, _blobs(n=500))
        g = GlobalCentroids(_blobs()[:2])
        for make in (moment_report, lambda c: local_kmeans_step(c, g)):
            a, b = make(small), make(big)
            for name in ("sums", "sumsq", "centroids", "counts"):
                if hasattr(a, name):
                    assert np.shape(getattr(a, name)) == np.shape(getattr(b, name))

    def test_raw_vectors_rejected(self):
        @dataclass
        class Leak:
            client_id: int
            vectors: np.ndarray

        with pytest.raises(ProtocolError):
            check_message(Leak(1, np.zeros((3, 2))))
        with pytest.raises(ProtocolError):
            merge_moments([Leak(1, np.zeros((3, 2)))])


class TestAssignment:
    def test_majority_ties_to_lower_group(self):
        cent = np.array([[0.0], [10.0]])
        assert majority_group(np.array([[1.0], [9.0]]), cent) == 0
        assert majority_group(np.array([[1.0], [9.0], [8.0]]), cent) == 1

    def test_machines_without_normal_records_are_flagged(self):
        vecs = np.array([[0.0], [0.1], [9.0], [9.5]])
        labels = np.array([[0, 0], [0, 0], [1, 0], [0, 1]])
        c = ClientClusterState.from_records(1, vecs, [1, 1, 2, 2], labels)
        assert set(c.fallback) == {2} and len(c) == 2
        res = cluster_machines([c, _client(2, [[10.0], [10.2]], [3, 3])], k=2, seed=0)
        assert res.assignment.flagged == (2,)
        assert res.assignment.groups[2] == res.assignment.groups[3] != res.assignment.groups[1]

    def test_assignment_round_trip(self):
        a = GroupAssignment({1: 0, 2: 1}, (2,))
        assert GroupAssignment.from_dict(a.to_dict()) == a

    def test_export_round_trip_exact(self, tmp_path):
        res = cluster_machines([_client(1, _blobs()), _client(2, _blobs(1))], k=3, seed=2)
        res.export.save(tmp_path / "c.json")
        back = CentroidExport.load(tmp_path / "c.json")
        assert back.centroids.centroids.tobytes() == res.export.centroids.centroids.tobytes()
        assert back.norm.std.tobytes() == res.export.norm.std.tobytes()
        with pytest.raises(ConfigurationError):
            CentroidExport.load(tmp_path / "missing.json")


class TestDefaultFleet:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovers_archetypes(self, seed):
        cfg = default_scenario(seed, sample_scale=0.05)
        res = cluster_machines(clients_from_dataset(cfg, generate_scenario(cfg)), k=2, seed=seed)
        truth = {m.machine_id: m.archetype_id for m in cfg.machines}
        groups = res.assignment.groups
        agree = sum(groups[m] == truth[m] for m in truth)
        assert max(agree, 13 - agree) == 13
        assert res.export.centroids.converged
