import numpy as np
import torch

from podseg.cloud import LabeledCloud, VoxelGrid
from podseg.dvfe import DvfeCache, DvfeConfig, DynamicVoxelFeatureEncoder, VfeLayer, dvfe_forward
from podseg.nn import grad_check
from podseg.voxelize import AugmentFlags, FeatureMap, Resolution, dynamic_voxelize, scatter_aggregate


def small_setup(n=10, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    cloud = LabeledCloud(coords=rng.uniform(0.05, 2.95, (n, 3)))
    grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(3, 3, 3))
    return cloud, grid


class TestVfeLayer:
    def test_singleton_voxels_equal_fcn_output(self):
        cloud = LabeledCloud(coords=np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]))
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(2, 1, 1))
        vmap = dynamic_voxelize(cloud, grid)
        layer = VfeLayer(3, 8).double().eval()
        x = FeatureMap(torch.tensor(cloud.coords), Resolution.POINT_WISE)
        point, voxel = layer(x, vmap)
        np.testing.assert_array_equal(point.values.detach().numpy(),
                                      voxel.values.detach().numpy()[vmap.point_to_voxel])

    def test_shapes(self):
        cloud = LabeledCloud(coords=np.array(
            [[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0.5, 0.5], [1.6, 0.6, 0.5],
             [2.5, 0.1, 0.1], [2.6, 0.2, 0.1], [2.7, 0.3, 0.2]]))
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(3, 1, 1))
        vmap = dynamic_voxelize(cloud, grid)
        assert vmap.n_voxels == 3
        cfg = DvfeConfig(in_channels=3, mid_channels=16, out_channels=64)
        enc = DynamicVoxelFeatureEncoder(cfg).eval()
        feat = FeatureMap(torch.tensor(cloud.coords, dtype=torch.float32), Resolution.POINT_WISE)
        voxel_feat, cache = enc(feat, vmap)
        assert voxel_feat.values.shape == (3, 64)
        assert cache.point_features.shape == (7, 64)

    def test_permutation_leaves_voxel_features_unchanged(self):
        cloud, grid = small_setup(n=20, seed=3)
        flags = AugmentFlags()
        cfg = DvfeConfig()
        enc = DynamicVoxelFeatureEncoder(cfg).double().eval()
        out_a, vmap_a, _ = dvfe_forward(cloud, grid, flags, enc, dtype=torch.float64)
        perm = np.random.default_rng(5).permutation(len(cloud))
        out_b, vmap_b, _ = dvfe_forward(cloud.select(perm), grid, flags, enc, dtype=torch.float64)
        np.testing.assert_array_equal(vmap_a.voxel_coords, vmap_b.voxel_coords)
        assert torch.equal(out_a.values, out_b.values)


class TestDvfeForward:
    def test_gradient_end_to_end(self):
        cloud, grid = small_setup(n=10, seed=1)
        enc = DynamicVoxelFeatureEncoder(
            DvfeConfig(in_channels=9, mid_channels=6, out_channels=8)
        ).double().train()
        tensors = dict(enc.named_parameters())
        report = grad_check(
            lambda: dvfe_forward(cloud, grid, AugmentFlags(), enc, dtype=torch.float64)[0]
            .values.pow(2).sum(),
            tensors,
        )
        assert report.passed, report

    def test_coords_only_runs(self):
        cloud, grid = small_setup(n=12, seed=2)
        enc = DynamicVoxelFeatureEncoder(DvfeConfig(in_channels=3)).eval()
        out, vmap, cache = dvfe_forward(cloud, grid, AugmentFlags(False, False, False), enc)
        assert out.values.shape == (vmap.n_voxels, 64)
        assert cache.augmented.shape == (12, 3)

    def test_max_backward_routes_to_argmax_only(self):
        cloud = LabeledCloud(coords=np.array([[0.2, 0.5, 0.5], [0.7, 0.5, 0.5], [1.5, 0.5, 0.5]]))
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(2, 1, 1))
        vmap = dynamic_voxelize(cloud, grid)
        x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        voxel = scatter_aggregate(FeatureMap(x, Resolution.POINT_WISE), vmap, "max")
        gout = torch.randn(voxel.values.shape, dtype=torch.float64)
        voxel.values.backward(gout)
        # per channel, point gradients sum to the voxel gradient
        for j, members in enumerate(vmap.voxel_to_points):
            np.testing.assert_allclose(
                x.grad.numpy()[members].sum(axis=0), gout[j].numpy(), atol=1e-12
            )
        # and only one member per (voxel, channel) carries it
        nonzero = (x.grad.numpy() != 0).astype(int)
        assert nonzero[:2].sum(axis=0).max() == 1

    def test_dynamic_keeps_every_point_influential(self):
        cloud, grid = small_setup(n=8, seed=4)
        enc = DynamicVoxelFeatureEncoder(
            DvfeConfig(in_channels=9, mid_channels=6, out_channels=8)
        ).double().eval()
        out_a, _, _ = dvfe_forward(cloud, grid, AugmentFlags(), enc, dtype=torch.float64)
        for i in range(len(cloud)):
            coords = cloud.coords.copy()
            coords[i] += 1e-3
            out_b, _, _ = dvfe_forward(LabeledCloud(coords=coords), grid, AugmentFlags(), enc,
                                       dtype=torch.float64)
            assert not torch.equal(out_a.values, out_b.values), f"point {i} has no influence"

    def test_cache_contents(self):
        cloud, grid = small_setup(n=6, seed=6)
        enc = DynamicVoxelFeatureEncoder(DvfeConfig()).eval()
        _, _, cache = dvfe_forward(cloud, grid, AugmentFlags(), enc)
        assert isinstance(cache, DvfeCache)
        assert cache.augmented.shape == (6, 9)
        assert cache.point_features.shape == (6, 64)
