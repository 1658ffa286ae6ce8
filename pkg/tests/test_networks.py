"""Architecture contracts: shapes, determinism, init stats, checkpoints."""

import numpy as np
import pytest

from voxelcycle import networks, ops
from voxelcycle.engine import Tensor, no_grad
from voxelcycle.errors import FormatError, ShapeError
from voxelcycle.gradcheck import finite_difference_gradients, relative_error
from voxelcycle.networks import (DiscriminatorNet, GeneratorNet, SegmentorNet,
                                 load_checkpoint, predict_labels, save_checkpoint)


def volume(shape, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, size=shape))


def single_weight_fd_error(net, loss_fn, param_names, entries_per_param=3, h=1e-6):
    """Worst FD-vs-autodiff error over a few individual weight entries.

    Small h keeps the difference quotient clear of ReLU kinks that a fresh
    random net inevitably has near zero pre-activations.
    """
    for p in net.parameters():
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name in param_names:
        p = net.params[name]
        flat = p.data.ravel()
        gflat = p.grad.ravel()
        idx_rng = np.random.default_rng(13)
        for i in idx_rng.choice(flat.size, size=entries_per_param, replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                hi = loss_fn().item()
                flat[i] = orig - h
                lo = loss_fn().item()
                flat[i] = orig
            numeric = (hi - lo) / (2 * h)
            worst = max(worst, relative_error(np.array([gflat[i]]), np.array([numeric])))
    return worst


class TestGenerator:
    def test_shape_and_range_contract(self):
        net = GeneratorNet(base_filters=2).init_parameters(seed=1)
        out = net(volume((1, 1, 16, 16, 16)))
        assert out.shape == (1, 1, 16, 16, 16)
        assert np.all(out.data > -1.0) and np.all(out.data < 1.0)

    def test_deterministic_forward(self):
        net = GeneratorNet(base_filters=2).init_parameters(seed=2)
        x = volume((1, 1, 16, 16, 16), seed=5)
        a = net(x).data
        b = net(x).data
        np.testing.assert_array_equal(a, b)

    def test_indivisible_dims_name_axis(self):
        net = GeneratorNet(base_filters=2).init_parameters(seed=0)
        with pytest.raises(ShapeError, match="axis H"):
            net(volume((1, 1, 16, 12, 16)))

    def test_downsampling_factor_is_eight(self):
        strides = [s.stride for s in GeneratorNet(2).layer_specs()]
        assert strides.count(2) == 3

    def test_two_convolutions_per_resolution(self):
        # encoder path: level i gets exactly two convs, same for decoder
        names = [s.name for s in GeneratorNet(2).layer_specs()]
        assert names == ["enc0a", "enc0b", "down1", "enc1", "down2", "enc2",
                         "down3", "bottleneck", "up2", "dec2", "up1", "dec1",
                         "up0", "dec0"]

    def test_minimum_extent_enforced(self):
        net = GeneratorNet(base_filters=2).init_parameters(seed=0)
        with pytest.raises(ShapeError, match="minimum"):
            net(volume((1, 1, 8, 8, 8)))

    def test_gradient_check_tiny_net(self):
        net = GeneratorNet(base_filters=2).init_parameters(seed=3)
        x = volume((1, 1, 16, 16, 16), seed=7)

        def loss_fn():
            return ops.mean_all(net(x))

        assert single_weight_fd_error(net, loss_fn, ["dec0.weight", "enc0a.weight",
                                                     "bottleneck.weight"]) < 1e-4


class TestDiscriminator:
    def test_logit_grid_matches_shape_formula(self):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        for size in [(16, 16, 16), (16, 24, 32)]:
            out = net(volume((1, 1) + size))
            assert out.shape == (1, 1) + DiscriminatorNet.logit_grid_extents(size)

    def test_logit_count_scales_with_input(self):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        small = net(volume((1, 1, 16, 16, 16))).shape
        tall = net(volume((1, 1, 32, 16, 16))).shape
        assert tall[2] >= 2 * small[2]

    def test_constant_zero_parameters_emit_bias(self):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        for name, p in net.params.items():
            p.data[...] = 0.0
        net.params["head.bias"].data[...] = 0.625
        out = net(volume((1, 1, 16, 16, 16), seed=3))
        np.testing.assert_allclose(out.data, 0.625, atol=1e-12)

    def test_receptive_field_is_local(self):
        # Translate a content blob by the total stride (8) within the far
        # half of the volume: every feature map shifts on its lattice, the
        # per-channel statistics seen by the norms stay identical, and the
        # probed corner logit must not move.
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=4)
        rng = np.random.default_rng(9)
        blob = rng.uniform(-1, 1, size=(8, 8, 8))
        before = np.zeros((1, 1, 48, 48, 48))
        before[0, 0, 24:32, 24:32, 24:32] = blob
        after = np.zeros((1, 1, 48, 48, 48))
        after[0, 0, 32:40, 32:40, 32:40] = blob
        with no_grad():
            out_before = net(Tensor(before)).data
            out_after = net(Tensor(after)).data
        assert abs(out_after[0, 0, 0, 0, 0] - out_before[0, 0, 0, 0, 0]) < 1e-9
        assert np.abs(out_after - out_before).max() > 1e-3

    def test_first_block_skips_normalization(self):
        specs = {s.name: s for s in DiscriminatorNet(2).layer_specs()}
        assert not specs["block0"].norm
        assert specs["block1"].norm and specs["block2"].norm


class TestSegmentor:
    def test_logits_shape_contract(self):
        net = SegmentorNet(base_filters=2, class_count=4).init_parameters(seed=1)
        out = net(volume((1, 1, 16, 16, 16)))
        assert out.shape == (1, 4, 16, 16, 16)
        labels = predict_labels(net, volume((1, 1, 16, 16, 16)))
        assert labels.shape == (1, 16, 16, 16)
        assert labels.min() >= 0 and labels.max() < 4

    def test_deterministic_repeat(self):
        net = SegmentorNet(base_filters=2, class_count=3).init_parameters(seed=2)
        x = volume((1, 1, 8, 8, 8), seed=11)
        np.testing.assert_array_equal(net(x).data, net(x).data)

    def test_contains_no_normalization_parameters(self):
        net = SegmentorNet(base_filters=4, class_count=4).init_parameters(seed=0)
        assert not [n for n in net.params if n.endswith((".gain", ".shift"))]

    def test_gradient_check_tiny_net(self):
        net = SegmentorNet(base_filters=2, class_count=3).init_parameters(seed=5)
        x = volume((1, 1, 8, 8, 8), seed=13)

        def loss_fn():
            return ops.mean_all(net(x))

        assert single_weight_fd_error(net, loss_fn, ["enc0a.weight", "dec0.weight",
                                                     "botb.weight"]) < 1e-4


class TestInitParameters:
    def test_same_seed_identical_bytes(self):
        a = GeneratorNet(2).init_parameters(seed=42)
        b = GeneratorNet(2).init_parameters(seed=42)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()

    def test_different_seed_differs(self):
        a = GeneratorNet(2).init_parameters(seed=42)
        b = GeneratorNet(2).init_parameters(seed=43)
        assert any(not np.array_equal(a.params[n].data, b.params[n].data)
                   for n in a.params)

    def test_weight_stddev_near_002(self):
        net = SegmentorNet(base_filters=8, class_count=4).init_parameters(seed=7)
        big = max((p for n, p in net.params.items() if n.endswith(".weight")),
                  key=lambda p: p.size)
        assert big.size >= 10_000
        assert abs(big.data.std() - 0.02) < 0.002

    def test_biases_zero_gains_one(self):
        net = GeneratorNet(2).init_parameters(seed=3)
        assert np.all(net.params["enc0a.bias"].data == 0.0)
        assert np.all(net.params["enc0a.gain"].data == 1.0)
        assert np.all(net.params["enc0a.shift"].data == 0.0)

    def test_all_kernels_cubic_3(self):
        for net in [GeneratorNet(2), DiscriminatorNet(2), SegmentorNet(2, 4)]:
            net.init_parameters(seed=0)
            for name, p in net.params.items():
                if name.endswith(".weight"):
                    assert p.shape[2:] == (3, 3, 3)


class TestCheckpoint:
    def test_roundtrip_bitwise_equal(self, tmp_path):
        net = SegmentorNet(base_filters=2, class_count=4).init_parameters(seed=9)
        path = tmp_path / "seg.vxck"
        save_checkpoint(net, path, step=17, config_hash=123456)
        loaded, step, config_hash = load_checkpoint(path)
        assert step == 17 and config_hash == 123456
        assert isinstance(loaded, SegmentorNet) and loaded.class_count == 4
        for name in net.params:
            assert loaded.params[name].data.tobytes() == net.params[name].data.tobytes()

    def test_forward_identical_after_reload(self, tmp_path):
        net = GeneratorNet(base_filters=2).init_parameters(seed=10)
        x = volume((1, 1, 16, 16, 16), seed=3)
        before = net(x).data
        path = tmp_path / "gen.vxck"
        save_checkpoint(net, path)
        loaded, _, _ = load_checkpoint(path)
        np.testing.assert_array_equal(loaded(x).data, before)

    def test_truncated_file_rejected(self, tmp_path):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        path = tmp_path / "d.vxck"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vxck"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        path = tmp_path / "d.vxck"
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        net = DiscriminatorNet(base_filters=2).init_parameters(seed=1)
        path = tmp_path / "d.vxck"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)
