import numpy as np
import pytest

from link3d import (
    ConfigError,
    SparseTensor,
    build_encoder,
    count_dense_kernel_params,
    count_generator_params,
    downsample_labels,
    encoder_forward,
    erf_map,
    erf_mass_radius,
    link_module_forward,
    toy_train,
)
from link3d.net import EncoderConfig, LinKModule, SegModel, stage1_coords
from conftest import make_scene
from oracles import compare_sampled, fd_grad


def dense_slab(width, depth, channels=1, seed=0, dtype=np.float64):
    xs, ys, zs = np.meshgrid(
        np.arange(width), np.arange(width), np.arange(depth), indexing="ij"
    )
    coords = np.stack(
        [np.zeros(xs.size, dtype=np.int64), xs.ravel(), ys.ravel(), zs.ravel()],
        axis=1,
    )
    rng = np.random.default_rng(seed)
    feats = rng.uniform(0.5, 1.5, size=(coords.shape[0], channels)).astype(dtype)
    return SparseTensor(coords, feats)


def small_config(channels=4, s=3, r=2, mode="pure", groups=1, link_enabled=True,
                 norm_enabled=True, dtype=np.float64):
    return EncoderConfig(
        in_channels=1,
        stem_channels=channels,
        stage_channels=(channels,) * 4,
        block_sizes=(s,) * 4,
        neighbor_ranges=(r,) * 4,
        mode=mode,
        groups=groups,
        link_enabled=link_enabled,
        norm_enabled=norm_enabled,
        dtype=dtype,
    )


class TestLinKModule:
    def test_all_zero_params_gives_zero(self, rng):
        t = make_scene(rng, 40, 8, 4)
        module = LinKModule(4, 3, 2, "pure", 1, rng)
        for _, arr in module.named_parameters():
            arr[...] = 0.0
        # zero generator weight still yields cos(0)=1 kernels, but zero
        # pointwise and bypass weights make both branches vanish
        out = link_module_forward(t, module)
        assert (out.features == 0).all()

    def test_single_voxel_identity_composition(self, rng):
        x = np.array([[0.8, -0.4, 1.2]])
        t = SparseTensor([(0, 2, 5, -1)], x)
        module = LinKModule(3, 3, 2, "pure", 1, rng, norm_enabled=False)
        module.pointwise.weight[...] = np.eye(3)
        module.pointwise.bias[...] = 0.0
        module.bypass.conv.weights[...] = 0.0
        center = module.bypass.conv.weights.shape[0] // 2
        module.bypass.conv.weights[center] = np.eye(3)
        module.bypass.conv.bias[...] = 0.0
        out = link_module_forward(t, module)
        np.testing.assert_allclose(out.features, np.maximum(2 * x, 0), atol=1e-12)

    def test_coords_preserved(self, rng):
        t = make_scene(rng, 80, 10, 4)
        module = LinKModule(4, 3, 2, "pure", 2, rng)
        out = link_module_forward(t, module)
        assert out.coords is t.coords


class TestResidualBlockRoutes:
    def test_layer_matches_functional_composition(self, rng):
        from link3d import ResidualBlockWeights, residual_block
        from link3d.net import ResidualBlock

        t = make_scene(rng, 70, 8, 4)
        layer = ResidualBlock(4, rng)
        weights = ResidualBlockWeights(
            conv1=layer.conv1.conv,
            conv2=layer.conv2.conv,
            norm1=layer.norm1.params,
            norm2=layer.norm2.params,
        )
        np.testing.assert_array_equal(
            layer.forward(t).features, residual_block(t, weights).features
        )


class TestEncoder:
    def test_stage_extents_halve(self, rng):
        t = dense_slab(16, 16)
        enc = build_encoder(small_config(channels=2), seed=0)
        outs = encoder_forward(t, enc)
        extents = [
            int(o.coords[:, 1].max() - o.coords[:, 1].min()) + 1 for o in outs
        ]
        assert extents == [8, 4, 2, 1]

    def test_stage_coords_are_downsampled_parents(self, rng):
        t = make_scene(rng, 200, 16, 1)
        enc = build_encoder(small_config(channels=2), seed=0)
        outs = encoder_forward(t, enc)
        prev = t.coords
        for o in outs:
            down = prev.copy()
            down[:, 1:] = np.floor_divide(down[:, 1:], 2)
            expected = np.unique(down, axis=0)
            got = np.unique(o.coords, axis=0)
            assert np.array_equal(expected, got)
            prev = o.coords

    def test_segmentation_layout_kernel_extent(self):
        cfg = EncoderConfig(
            in_channels=1,
            stem_channels=64,
            stage_channels=(64, 64, 64, 64),
            block_sizes=(3,) * 4,
            neighbor_ranges=(2,) * 4,
        )
        enc = build_encoder(cfg, seed=0)
        for stage in enc.stages:
            assert stage.link_module.link.cfg.kernel_extent == 6

    def test_fewer_params_than_dense_large_kernel(self):
        cfg = small_config(channels=16, s=7, r=3, groups=2)
        enc = build_encoder(cfg, seed=0)
        total = enc.num_params()
        gen_total = sum(
            count_generator_params(st.link_module.link.generator)
            for st in enc.stages
        )
        dense_total = total - gen_total + sum(
            count_dense_kernel_params(7, c, c) for c in cfg.stage_channels
        )
        assert total < dense_total

    def test_requires_four_stages(self):
        with pytest.raises(ConfigError):
            EncoderConfig(stage_channels=(8, 8, 8))


class TestEndToEndGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_encoder_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        t = make_scene(rng, 60, 10, 1)
        enc = build_encoder(
            small_config(channels=3, mode="augmented", groups=1), seed=seed
        )
        outs = enc.forward(t)
        probes = [rng.normal(size=o.features.shape) for o in outs]

        def loss():
            return float(
                sum((o.features * p).sum() for o, p in zip(enc.forward(t), probes))
            )

        enc.zero_grads()
        enc.forward(t)
        enc.backward(probes)
        grads = dict(enc.named_grads())
        sample_rng = np.random.default_rng(seed + 100)
        for name, arr in enc.named_parameters():
            fd = fd_grad(loss, arr, sample=2, rng=sample_rng)
            assert compare_sampled(fd, grads[name]) <= 1e-3, name


class TestErf:
    def test_bypass_only_respects_theoretical_bound(self):
        # stage 1, bypass-only: stem reach 2, stage convs reach 4 at stride 2,
        # downsample window {0, 1}: support within [2v - 10, 2v + 11]
        t = dense_slab(48, 4)
        enc = build_encoder(small_config(channels=4, link_enabled=False), seed=0)
        coords, mags, seed_coord = erf_map(t, enc, 1)
        nz = mags > 0
        offsets = coords[nz, 1:] - np.asarray(seed_coord[1:]) * 2
        assert offsets.min() >= -10
        assert offsets.max() <= 11

    def test_link_extends_beyond_bypass_bound(self):
        t = dense_slab(48, 4)
        enc = build_encoder(
            small_config(channels=4, s=7, r=3, link_enabled=True), seed=0
        )
        coords, mags, seed_coord = erf_map(t, enc, 1)
        nz = mags > 0
        offsets = np.abs(coords[nz, 1:] - np.asarray(seed_coord[1:]) * 2)
        assert offsets.max() > 11

    def test_zero_input_features_zero_map(self):
        coords = dense_slab(12, 4).coords
        t = SparseTensor(coords, np.zeros((coords.shape[0], 1)))
        enc = build_encoder(small_config(channels=4), seed=0)
        _, mags, _ = erf_map(t, enc, 1)
        assert (mags == 0).all()

    def test_90_mass_radius_dominance(self):
        t = dense_slab(96, 4, dtype=np.float32)
        radii = {}
        for enabled in (False, True):
            enc = build_encoder(
                small_config(channels=8, s=7, r=3, link_enabled=enabled,
                             dtype=np.float32),
                seed=0,
            )
            coords, mags, seed_coord = erf_map(t, enc, 2)
            radii[enabled] = erf_mass_radius(coords, mags, seed_coord, 2)
        assert radii[True] > radii[False]

    def test_empty_scene_rejected(self):
        t = SparseTensor(np.zeros((0, 4), dtype=np.int64), np.zeros((0, 1)))
        enc = build_encoder(small_config(channels=2), seed=0)
        with pytest.raises(ConfigError):
            erf_map(t, enc, 1)


class TestToyTrain:
    def _scene(self, rng, n=120):
        t = make_scene(rng, n, 10, 1)
        labels = rng.integers(0, 3, size=t.num_voxels)
        return t, labels

    def test_lr_zero_constant_trace(self, rng):
        t, labels = self._scene(rng)
        trace = toy_train([t], [labels], small_config(channels=4), 5, 0.0,
                          num_classes=3, seed=0)
        assert len(trace) == 5
        assert all(x == trace[0] for x in trace)

    def test_initial_loss_near_log_num_classes(self, rng):
        t, labels = self._scene(rng)
        trace = toy_train([t], [labels], small_config(channels=4), 1, 0.1,
                          num_classes=3, seed=0)
        assert abs(trace[0] - np.log(3)) < 0.1

    def test_overfit_with_doubled_lr_search(self, rng):
        t, labels = self._scene(rng, n=90)
        cfg = small_config(channels=8)
        final = None
        lr = 0.25
        while lr <= 2.0:
            trace = toy_train([t], [labels], cfg, 150, lr, num_classes=3, seed=0)
            final = trace[-1]
            if final < 0.1:
                break
            lr *= 2
        assert final is not None and final < 0.1

    def test_label_validation(self, rng):
        t, _ = self._scene(rng)
        bad = np.full(t.num_voxels, 9)
        with pytest.raises(ConfigError):
            toy_train([t], [bad], small_config(channels=4), 1, 0.1, num_classes=4)


class TestDownsampleLabels:
    def test_majority_and_tie_break(self):
        coords = np.array(
            [(0, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 4, 4, 4)],
            dtype=np.int64,
        )
        t = SparseTensor(coords, np.zeros((4, 1)))
        out_coords = stage1_coords(t)
        labels = np.array([2, 1, 1, 3])
        down = downsample_labels(coords, labels, out_coords, 4)
        by_coord = {tuple(c): l for c, l in zip(out_coords, down)}
        assert by_coord[(0, 0, 0, 0)] == 1  # two votes for 1, one for 2
        assert by_coord[(0, 2, 2, 2)] == 3

    def test_exact_tie_takes_smaller_label(self):
        coords = np.array([(0, 0, 0, 0), (0, 1, 1, 1)], dtype=np.int64)
        t = SparseTensor(coords, np.zeros((2, 1)))
        out_coords = stage1_coords(t)
        assert out_coords.shape[0] == 1
        down = downsample_labels(coords, np.array([3, 1]), out_coords, 4)
        assert down[0] == 1


class TestSegModel:
    def test_loss_decreases_one_step(self, rng):
        t = make_scene(rng, 100, 10, 1)
        labels = rng.integers(0, 4, size=t.num_voxels)
        cfg = small_config(channels=6)
        trace = toy_train([t], [labels], cfg, 30, 0.5, num_classes=4, seed=1)
        assert trace[-1] < trace[0]

    def test_label_length_checked(self, rng):
        t = make_scene(rng, 50, 8, 1)
        model = SegModel(small_config(channels=4), 4, seed=0)
        with pytest.raises(ValueError):
            model.loss_and_grad(t, np.zeros(3, dtype=np.int64))
