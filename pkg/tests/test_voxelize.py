import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from podseg.cloud import LabeledCloud, VoxelGrid
from podseg.voxelize import (
    DROPPED,
    AugmentFlags,
    FeatureMap,
    PointOutsideGridError,
    Resolution,
    augment_features,
    cluster_centroids,
    dynamic_voxelize,
    hard_voxelize,
    propagate,
    scatter_aggregate,
    voxel_centers,
)


def make_cloud(points):
    return LabeledCloud(coords=np.asarray(points, dtype=np.float64))


def pw(values):
    return FeatureMap(torch.as_tensor(values, dtype=torch.float64), Resolution.POINT_WISE)


class TestDynamicVoxelize:
    def test_floor_division(self, unit_grid):
        cloud = make_cloud([(0.2, 0.2, 0.2), (0.7, 0.1, 0.3), (1.5, 0.2, 0.2)])
        vmap = dynamic_voxelize(cloud, unit_grid)
        assert vmap.n_voxels == 2
        np.testing.assert_array_equal(vmap.voxel_coords, [[0, 0, 0], [1, 0, 0]])
        np.testing.assert_array_equal(vmap.voxel_to_points[0], [0, 1])
        np.testing.assert_array_equal(vmap.voxel_to_points[1], [2])

    def test_single_point(self, unit_grid):
        vmap = dynamic_voxelize(make_cloud([(0.5, 0.5, 0.5)]), unit_grid)
        assert vmap.n_voxels == 1
        assert vmap.counts[0] == 1

    def test_lossless(self, unit_grid, rng):
        cloud = make_cloud(rng.uniform(0, 4, size=(1000, 3)))
        vmap = dynamic_voxelize(cloud, unit_grid)
        assert vmap.counts.sum() == 1000
        assert (vmap.point_to_voxel != DROPPED).all()
        vmap.validate()

    def test_out_of_bounds_names_point(self, unit_grid):
        cloud = make_cloud([(0.5, 0.5, 0.5), (4.5, 0.5, 0.5)])
        with pytest.raises(PointOutsideGridError, match="point 1"):
            dynamic_voxelize(cloud, unit_grid)

    def test_voxel_order_is_z_y_x_lexicographic(self, unit_grid):
        cloud = make_cloud([(3.5, 0.5, 1.5), (0.5, 0.5, 0.5), (0.5, 3.5, 0.5)])
        vmap = dynamic_voxelize(cloud, unit_grid)
        coords_zyx = vmap.voxel_coords[:, ::-1]
        assert (np.diff([tuple(c) for c in coords_zyx], axis=0) != 0).any(axis=1).all()
        order = np.lexsort((vmap.voxel_coords[:, 0], vmap.voxel_coords[:, 1], vmap.voxel_coords[:, 2]))
        np.testing.assert_array_equal(order, np.arange(vmap.n_voxels))


class TestHardVoxelize:
    def test_capacity_one_drops_to_one(self, unit_grid):
        cloud = make_cloud([(0.2, 0.2, 0.2), (0.8, 0.8, 0.8)])
        vmap = hard_voxelize(cloud, unit_grid, capacity=1, seed=0)
        assert vmap.counts[0] == 1
        assert (vmap.point_to_voxel == DROPPED).sum() == 1

    def test_large_capacity_equals_dynamic(self, unit_grid, random_cloud):
        dyn = dynamic_voxelize(random_cloud, unit_grid)
        hard = hard_voxelize(random_cloud, unit_grid, capacity=int(dyn.counts.max()), seed=3)
        np.testing.assert_array_equal(dyn.point_to_voxel, hard.point_to_voxel)

    def test_seed_determinism(self, unit_grid, random_cloud):
        a = hard_voxelize(random_cloud, unit_grid, capacity=2, seed=42)
        b = hard_voxelize(random_cloud, unit_grid, capacity=2, seed=42)
        np.testing.assert_array_equal(a.point_to_voxel, b.point_to_voxel)

    def test_drop_count(self, unit_grid, random_cloud):
        dyn = dynamic_voxelize(random_cloud, unit_grid)
        hard = hard_voxelize(random_cloud, unit_grid, capacity=1, seed=9)
        expected_drops = np.maximum(dyn.counts - 1, 0).sum()
        assert (hard.point_to_voxel == DROPPED).sum() == expected_drops
        hard.validate()


class TestCentroidsAndCenters:
    def test_shared_voxel_centroid(self, unit_grid):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(4, 4, 4), extent=(1, 1, 1))
        cloud = make_cloud([(0, 0, 0), (2, 2, 2)])
        pc = cluster_centroids(cloud, dynamic_voxelize(cloud, grid))
        np.testing.assert_allclose(pc, [[1, 1, 1], [1, 1, 1]])

    def test_singleton_identity(self, unit_grid, random_cloud):
        vmap = dynamic_voxelize(random_cloud, unit_grid)
        singles = np.concatenate([m for m in vmap.voxel_to_points if len(m) == 1]).astype(int)
        pc = cluster_centroids(random_cloud, vmap)
        np.testing.assert_allclose(pc[singles], random_cloud.coords[singles])

    def test_collinear(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(3, 1, 1), extent=(1, 1, 1))
        cloud = make_cloud([(0, 0.5, 0.5), (1, 0.5, 0.5), (2, 0.5, 0.5)])
        pc = cluster_centroids(cloud, dynamic_voxelize(cloud, grid))
        np.testing.assert_allclose(pc[:, 0], [1, 1, 1])

    def test_voxel_centers(self, unit_grid):
        cloud = make_cloud([(0.1, 0.1, 0.1), (1.2, 0.3, 0.4)])
        vmap = dynamic_voxelize(cloud, unit_grid)
        np.testing.assert_allclose(voxel_centers(vmap, unit_grid), [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])

    def test_voxel_centers_shifted_origin(self):
        grid = VoxelGrid(origin=(-1, -1, -1), voxel_size=(1, 1, 1), extent=(2, 2, 2))
        cloud = make_cloud([(-0.9, -0.9, -0.9)])
        vmap = dynamic_voxelize(cloud, grid)
        np.testing.assert_allclose(voxel_centers(vmap, grid), [[-0.5, -0.5, -0.5]])


class TestAugmentFeatures:
    def test_fixed_order_both_centroids(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(1, 1, 1))
        cloud = make_cloud([(0.2, 0.2, 0.2), (0.7, 0.1, 0.3)])
        vmap = dynamic_voxelize(cloud, grid)
        flags = AugmentFlags(use_cluster_centroid=True, use_voxel_center=True, use_l2_norm=False)
        feat = augment_features(cloud, vmap, grid, flags, dtype=torch.float64)
        assert feat.channels == 9
        np.testing.assert_allclose(
            feat.values[0].numpy(),
            [0.2, 0.2, 0.2, -0.25, 0.05, -0.05, -0.3, -0.3, -0.3],
            atol=1e-12,
        )

    def test_l2_norm_channel(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(1, 1, 1))
        cloud = make_cloud([(0.2, 0.2, 0.2)])
        vmap = dynamic_voxelize(cloud, grid)
        feat = augment_features(cloud, vmap, grid, AugmentFlags(True, True, True), dtype=torch.float64)
        assert feat.channels == 10
        assert feat.values[0, -1].item() == pytest.approx(0.34641016, abs=1e-6)

    def test_coords_only(self, unit_grid, random_cloud):
        vmap = dynamic_voxelize(random_cloud, unit_grid)
        feat = augment_features(random_cloud, vmap, unit_grid, AugmentFlags(False, False, False))
        assert feat.channels == 3
        np.testing.assert_allclose(feat.values.numpy(), random_cloud.coords, rtol=1e-6)


class TestScatterPropagate:
    def _tiny(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(2, 1, 1))
        cloud = make_cloud([(0.1, 0.5, 0.5), (0.9, 0.5, 0.5), (1.5, 0.5, 0.5)])
        return cloud, grid, dynamic_voxelize(cloud, grid)

    def test_max(self):
        _, _, vmap = self._tiny()
        out = scatter_aggregate(pw([[1.0], [5.0], [3.0]]), vmap, "max")
        np.testing.assert_array_equal(out.values.numpy(), [[5.0], [3.0]])
        np.testing.assert_array_equal(out.argmax_ids, [[1], [2]])

    def test_mean(self):
        _, _, vmap = self._tiny()
        out = scatter_aggregate(pw([[1.0], [5.0], [3.0]]), vmap, "mean")
        np.testing.assert_array_equal(out.values.numpy(), [[3.0], [3.0]])

    def test_singleton_identity(self, unit_grid, rng):
        cloud = make_cloud(rng.uniform(0, 4, (30, 3)))
        vmap = dynamic_voxelize(cloud, unit_grid)
        if not (vmap.counts == 1).all():
            cloud = make_cloud(np.unique(np.floor(cloud.coords), axis=0) + 0.5)
            vmap = dynamic_voxelize(cloud, unit_grid)
        feat = pw(rng.normal(size=(len(cloud), 4)))
        for mode in ("max", "mean", "sum"):
            out = scatter_aggregate(feat, vmap, mode)
            np.testing.assert_allclose(out.values.numpy()[vmap.point_to_voxel], feat.values.numpy())

    def test_bad_mode(self):
        _, _, vmap = self._tiny()
        with pytest.raises(ValueError, match="mode"):
            scatter_aggregate(pw([[1.0], [2.0], [3.0]]), vmap, "median")

    def test_propagate_broadcast(self):
        _, _, vmap = self._tiny()
        vox = FeatureMap(torch.tensor([[7.0], [9.0]]), Resolution.VOXEL_WISE)
        out = propagate(vox, vmap)
        np.testing.assert_array_equal(out.values.numpy(), [[7.0], [7.0], [9.0]])

    def test_propagate_after_max_not_identity(self):
        _, _, vmap = self._tiny()
        feat = pw([[1.0], [5.0], [3.0]])
        back = propagate(scatter_aggregate(feat, vmap, "max"), vmap)
        assert not torch.equal(back.values, feat.values)

    def test_roundtrip_identity_per_voxel(self, unit_grid, rng):
        cloud = make_cloud(rng.uniform(0, 4, (100, 3)))
        vmap = dynamic_voxelize(cloud, unit_grid)
        feat = pw(rng.normal(size=(100, 5)))
        for mode in ("max", "mean"):
            vox = scatter_aggregate(feat, vmap, mode)
            again = scatter_aggregate(propagate(vox, vmap), vmap, mode)
            np.testing.assert_array_equal(vox.values.numpy(), again.values.numpy())

    def test_max_ties_to_lowest_index(self):
        _, _, vmap = self._tiny()
        out = scatter_aggregate(pw([[2.0], [2.0], [1.0]]), vmap, "max")
        np.testing.assert_array_equal(out.argmax_ids, [[0], [2]])

    def test_max_gradient_routing(self):
        _, _, vmap = self._tiny()
        x = torch.tensor([[1.0], [5.0], [3.0]], requires_grad=True)
        out = scatter_aggregate(FeatureMap(x, Resolution.POINT_WISE), vmap, "max")
        out.values.sum().backward()
        np.testing.assert_array_equal(x.grad.numpy(), [[0.0], [1.0], [1.0]])

    def test_hard_dropped_points_zero(self, unit_grid):
        cloud = make_cloud([(0.2, 0.2, 0.2), (0.8, 0.8, 0.8)])
        vmap = hard_voxelize(cloud, unit_grid, capacity=1, seed=1)
        vox = scatter_aggregate(pw([[1.0], [2.0]]), vmap, "sum")
        kept = int(vmap.voxel_to_points[0][0])
        assert vox.values[0, 0].item() == float(kept + 1)
        back = propagate(vox, vmap)
        assert back.values[1 - kept, 0].item() == 0.0


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 60))
        coords = r.uniform(0, 4, (n, 3))
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(4, 4, 4))
        perm = r.permutation(n)
        a = dynamic_voxelize(make_cloud(coords), grid)
        b = dynamic_voxelize(make_cloud(coords[perm]), grid)
        feat = r.normal(size=(n, 3))
        va = scatter_aggregate(pw(feat), a, "max")
        vb = scatter_aggregate(pw(feat[perm]), b, "max")
        np.testing.assert_array_equal(a.voxel_coords, b.voxel_coords)
        np.testing.assert_array_equal(va.values.numpy(), vb.values.numpy())
        pa = propagate(va, a).values.numpy()
        pb = propagate(vb, b).values.numpy()
        np.testing.assert_array_equal(pa[perm], pb)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_translation_invariance(self, seed):
        r = np.random.default_rng(seed)
        coords = r.uniform(0.2, 3.8, (40, 3))
        shift = r.uniform(-5, 5, 3)
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(4, 4, 4))
        grid_shifted = VoxelGrid(origin=shift, voxel_size=(1, 1, 1), extent=(4, 4, 4))
        a = dynamic_voxelize(make_cloud(coords), grid)
        b = dynamic_voxelize(make_cloud(coords + shift), grid_shifted)
        np.testing.assert_array_equal(a.voxel_coords, b.voxel_coords)
        pc_a = cluster_centroids(make_cloud(coords), a) - coords
        pc_b = cluster_centroids(make_cloud(coords + shift), b) - (coords + shift)
        np.testing.assert_allclose(pc_a, pc_b, atol=1e-9)
        ctr_a = voxel_centers(a, grid)[a.point_to_voxel] - coords
        ctr_b = voxel_centers(b, grid_shifted)[b.point_to_voxel] - (coords + shift)
        np.testing.assert_allclose(ctr_a, ctr_b, atol=1e-9)
