"""Tests for point-cloud containers, kNN, and grid subsampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcf.geometry import (
    CapacityError,
    ParameterError,
    PointCloud,
    brute_force_knn,
    grid_subsample,
    knn,
    relative_positions,
)


def random_cloud(rng, n, c=2, labels=False):
    lab = rng.integers(0, 3, n) if labels else None
    return PointCloud(rng.uniform(0, 1, (n, 3)), rng.normal(size=(n, c)), lab)


def dyadic_cloud(rng, n, c=2):
    """Positions quantized to multiples of 2**-20 so translation sums are exact."""
    pos = np.round(rng.uniform(0, 1, (n, 3)) * 2**20) / 2**20
    return PointCloud(pos, rng.normal(size=(n, c)))


class TestPointCloud:
    def test_rejects_mismatched_features(self):
        with pytest.raises(ParameterError):
            PointCloud(np.zeros((3, 3)), np.zeros((2, 1)))

    def test_rejects_nonfinite_positions(self):
        pos = np.zeros((2, 3))
        pos[0, 0] = np.nan
        with pytest.raises(ParameterError):
            PointCloud(pos, np.zeros((2, 1)))

    def test_rejects_empty(self):
        with pytest.raises(ParameterError):
            PointCloud(np.zeros((0, 3)), np.zeros((0, 1)))


class TestKnn:
    def test_collinear_example(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
        cloud = PointCloud(pos, np.zeros((3, 1)))
        nbr = knn(cloud, cloud, 2)
        # point 1: itself first, then point 0 (distance 1 beats distance 2)
        np.testing.assert_array_equal(nbr.indices[1], [1, 0])

    def test_k_equals_n_is_permutation(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 9)
        nbr = knn(cloud, cloud, 9)
        for row in nbr.indices:
            assert sorted(row) == list(range(9))

    def test_capacity_error(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 4)
        with pytest.raises(CapacityError):
            knn(cloud, cloud, 5)

    def test_distances_nondecreasing(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 100)
        nbr = knn(cloud, cloud, 10)
        d = np.linalg.norm(nbr.rel_pos, axis=2)
        assert (np.diff(d, axis=1) >= 0).all()

    def test_self_inclusion_first_slot(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 50)
        nbr = knn(cloud, cloud, 4)
        np.testing.assert_array_equal(nbr.indices[:, 0], np.arange(50))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for n, k in [(30, 3), (200, 16), (500, 16), (2000, 16)]:
            source = random_cloud(rng, n)
            query = random_cloud(rng, 40)
            fast = knn(source, query, k)
            slow = brute_force_knn(source, query, k)
            np.testing.assert_array_equal(fast.indices, slow.indices)
            np.testing.assert_array_equal(fast.rel_pos, slow.rel_pos)

    def test_matches_oracle_self_query(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 300)
        np.testing.assert_array_equal(
            knn(cloud, cloud, 16).indices, brute_force_knn(cloud, cloud, 16).indices)

    def test_duplicate_points_lower_index_wins(self):
        pos = np.array([[0.5, 0.5, 0.5]] * 3 + [[0.9, 0.9, 0.9]])
        cloud = PointCloud(pos, np.zeros((4, 1)))
        nbr = brute_force_knn(cloud, cloud, 3)
        np.testing.assert_array_equal(nbr.indices[2], [0, 1, 2])
        np.testing.assert_array_equal(knn(cloud, cloud, 3).indices, nbr.indices)

    def test_single_source_point(self):
        source = PointCloud(np.zeros((1, 3)), np.zeros((1, 1)))
        rng = np.random.default_rng(6)
        query = random_cloud(rng, 5)
        nbr = brute_force_knn(source, query, 1)
        assert (nbr.indices == 0).all()

    def test_clustered_cloud_matches_oracle(self):
        # clusters leave most hash cells empty, exercising shell expansion
        rng = np.random.default_rng(7)
        centers = rng.uniform(0, 10, (5, 3))
        pos = np.concatenate([c + rng.normal(0, 0.05, (60, 3)) for c in centers])
        cloud = PointCloud(pos, np.zeros((300, 1)))
        np.testing.assert_array_equal(
            knn(cloud, cloud, 8).indices, brute_force_knn(cloud, cloud, 8).indices)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 40))
    def test_oracle_equivalence_property(self, seed, n):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, n)
        k = min(5, n)
        np.testing.assert_array_equal(
            knn(cloud, cloud, k).indices, brute_force_knn(cloud, cloud, k).indices)


class TestGridSubsample:
    def test_two_point_barycenter(self):
        cloud = PointCloud([[0.1, 0, 0], [0.2, 0, 0]], [[2.0], [4.0]])
        out, sub = grid_subsample(cloud, 1.0)
        assert out.n == 1
        np.testing.assert_allclose(out.positions[0], [0.15, 0, 0])
        np.testing.assert_allclose(out.features[0], [3.0])
        assert sub.cell_size == 1.0

    def test_tiny_cells_identity_up_to_order(self):
        rng = np.random.default_rng(8)
        cloud = random_cloud(rng, 40)
        out, sub = grid_subsample(cloud, 1e-6)
        assert out.n == 40
        order = np.concatenate([p for p in sub.parent])
        np.testing.assert_allclose(out.positions, cloud.positions[order])

    def test_cell_membership_and_occupancy_oracle(self):
        rng = np.random.default_rng(9)
        cloud = random_cloud(rng, 1000, labels=True)
        cell = 0.25
        out, sub = grid_subsample(cloud, cell)
        origin = cloud.positions.min(axis=0)
        # independent hash-set count of occupied cells
        keys = {tuple(v) for v in np.floor((cloud.positions - origin) / cell).astype(int)}
        assert out.n == len(keys)
        # each output point lies inside the cell of its members
        for gi, members in enumerate(sub.parent):
            member_cells = np.floor((cloud.positions[members] - origin) / cell).astype(int)
            assert (member_cells == member_cells[0]).all()
            out_cell = np.floor((out.positions[gi] - origin) / cell).astype(int)
            np.testing.assert_array_equal(out_cell, member_cells[0])

    def test_parent_partitions_input(self):
        rng = np.random.default_rng(10)
        cloud = random_cloud(rng, 500)
        _, sub = grid_subsample(cloud, 0.3)
        seen = np.concatenate(sub.parent)
        assert len(seen) == len(set(seen.tolist())) == 500

    def test_output_order_is_lexicographic(self):
        rng = np.random.default_rng(11)
        cloud = random_cloud(rng, 300)
        out, _ = grid_subsample(cloud, 0.2)
        origin = cloud.positions.min(axis=0)
        cells = np.floor((out.positions - origin) / 0.2).astype(int)
        keys = [tuple(c) for c in cells]
        assert keys == sorted(keys)

    def test_majority_label_smallest_tie(self):
        pos = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
        cloud = PointCloud(pos, np.zeros((4, 1)), labels=[2, 2, 1, 1])
        out, _ = grid_subsample(cloud, 10.0)
        assert out.labels[0] == 1  # tie between 1 and 2 goes to the smaller id

    def test_rejects_nonpositive_cell(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ParameterError):
            grid_subsample(random_cloud(rng, 5), 0.0)

    def test_second_pass_never_splits(self):
        # re-anchoring at the barycenter cloud's min corner can merge adjacent
        # cells, so occupancy is monotone non-increasing rather than fixed
        for seed in range(10):
            rng = np.random.default_rng(seed)
            cloud = random_cloud(rng, 1000)
            once, _ = grid_subsample(cloud, 0.25)
            twice, _ = grid_subsample(once, 0.25)
            assert twice.n <= once.n

    def test_occupancy_idempotent_for_separated_clusters(self):
        # a lone point pins the anchor at the origin; tight clusters sit
        # mid-cell, two cells apart, so their barycenters stay further than
        # one cell from each other and no re-anchoring phase can merge them
        rng = np.random.default_rng(13)
        lattice = rng.choice(4 * 4 * 4, size=20, replace=False)
        ijk = np.stack([lattice // 16, (lattice // 4) % 4, lattice % 4], axis=1) + 1
        centers = 0.15 + 0.6 * ijk
        pos = np.concatenate([np.zeros((1, 3))]
                             + [c + rng.uniform(-0.01, 0.01, (25, 3)) for c in centers])
        cloud = PointCloud(pos, np.zeros((501, 1)))
        once, _ = grid_subsample(cloud, 0.3)
        assert once.n == 21  # precondition: no cluster straddles a cell boundary
        twice, _ = grid_subsample(once, 0.3)
        assert twice.n == once.n


class TestRelativePositions:
    def test_self_slot_is_zero(self):
        rng = np.random.default_rng(14)
        cloud = random_cloud(rng, 20)
        nbr = knn(cloud, cloud, 3)
        rel = relative_positions(cloud, cloud, nbr)
        np.testing.assert_array_equal(rel.data[:, 0, :], np.zeros((20, 3)))

    def test_translation_invariance_exact(self):
        # dyadic coordinates and translation make fp addition exact
        rng = np.random.default_rng(15)
        cloud = dyadic_cloud(rng, 60)
        nbr = knn(cloud, cloud, 5)
        t = np.array([3.0, -7.5, 0.25])
        shifted = cloud.translated(t)
        nbr2 = knn(shifted, shifted, 5)
        np.testing.assert_array_equal(nbr.indices, nbr2.indices)
        rel1 = relative_positions(cloud, cloud, nbr)
        rel2 = relative_positions(shifted, shifted, nbr2)
        assert (rel1.data == rel2.data).all()

    def test_matches_direct_subtraction(self):
        rng = np.random.default_rng(16)
        source = random_cloud(rng, 50)
        query = random_cloud(rng, 20)
        nbr = knn(source, query, 6)
        rel = relative_positions(source, query, nbr)
        expect = np.stack([source.positions[nbr.indices[i]] - query.positions[i]
                           for i in range(query.n)])
        np.testing.assert_array_equal(rel.data, expect)

    def test_matches_cached_block(self):
        rng = np.random.default_rng(17)
        cloud = random_cloud(rng, 30)
        nbr = knn(cloud, cloud, 4)
        np.testing.assert_array_equal(relative_positions(cloud, cloud, nbr).data, nbr.rel_pos)
