import numpy as np
import pytest
import torch

from hdrforge.net import (
    CheckpointError,
    MergeNetwork,
    NumericError,
    _ResidualBlock,
    build_resnet,
    build_unet,
    forward,
    load_checkpoint,
    plan_resnet,
    plan_shapes,
    plan_unet,
    save_checkpoint,
    to_torch_input,
)
from hdrforge.radiance import ShapeError


def rand_planes(rng, k=3, size=64, batch=None):
    shape = (k, size, size, 6) if batch is None else (batch, k, size, size, 6)
    return rng.random(shape, dtype=np.float32)


class TestPlans:
    def test_unet_bottleneck_is_1x1x512(self):
        shapes = plan_shapes(plan_unet(3, 64), 3, 256)
        assert shapes["enc8"] == (1, 512)

    def test_unet_branch_channel_progression(self):
        plan = {s.name: s for s in plan_unet(3, 64)}
        assert (plan["enc1"].in_channels, plan["enc1"].out_channels) == (6, 64)
        assert (plan["enc2"].in_channels, plan["enc2"].out_channels) == (64, 128)

    def test_unet_encoder_channels_double_to_512(self):
        shapes = plan_shapes(plan_unet(3, 64), 3, 256)
        assert [shapes[f"enc{i}"][1] for i in range(3, 9)] == [256, 512, 512, 512, 512, 512]

    def test_unet_decoder_channels_halve_to_64(self):
        shapes = plan_shapes(plan_unet(3, 64), 3, 256)
        assert [shapes[f"dec{i}"][1] for i in range(1, 9)] == \
            [512, 512, 512, 512, 256, 128, 64, 64]

    def test_unet_first_layer_and_output_skip_batchnorm(self):
        plan = {s.name: s for s in plan_unet(3, 64)}
        assert not plan["enc1"].batchnorm and not plan["out"].batchnorm
        assert all(plan[f"enc{i}"].batchnorm for i in range(2, 9))
        assert all(plan[f"dec{i}"].batchnorm for i in range(1, 9))

    def test_unet_skip_concat_channels_are_consistent(self):
        k, w = 3, 64
        specs = list(plan_unet(k, w))
        shapes = plan_shapes(specs, k, 256)
        prev_out = None
        for spec in specs:
            if spec.per_branch:
                continue
            expected_in = prev_out if prev_out is not None else shapes["enc2"][1]
            if spec.skip_from is not None:
                expected_in += shapes[spec.skip_from][1]
            assert spec.in_channels == expected_in, spec.name
            prev_out = spec.out_channels

    def test_resnet_mid_block_is_32x32x256(self):
        shapes = plan_shapes(plan_resnet(3, 64), 3, 256)
        assert shapes["enc3"] == (32, 256)
        assert shapes["res9"] == (32, 256)

    def test_resnet_has_nine_blocks_with_3x3_kernels(self):
        blocks = [s for s in plan_resnet(3, 64) if s.kind == "residual_block"]
        assert len(blocks) == 9
        assert all(b.kernel == 3 for b in blocks)

    def test_all_conv_layers_use_5x5(self):
        for plan in (plan_unet(3, 64), plan_resnet(3, 64)):
            for s in plan:
                if s.kind != "residual_block":
                    assert s.kernel == 5, s.name

    def test_mirror_skips_are_size_compatible(self):
        # plan_shapes raises if a skip source's spatial size mismatches its consumer
        for patch in (256, 512):
            plan_shapes(plan_unet(3, 64), 3, patch)


class TestForward:
    def test_resnet_output_shape_and_bounds(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=0)
        out = forward(net, rand_planes(rng, size=64), mode="eval")
        assert out.shape == (64, 64, 3)
        assert 0.0 < out.min() and out.max() < 1.0

    def test_unet_output_shape_and_bounds(self, rng):
        net = build_unet(k=3, base_channels=8, seed=0)
        out = forward(net, rand_planes(rng, size=256), mode="eval")
        assert out.shape == (256, 256, 3)
        assert 0.0 < out.min() and out.max() < 1.0

    def test_all_zero_input_is_finite_and_bounded(self):
        net = build_resnet(k=3, base_channels=8, seed=1)
        out = forward(net, np.zeros((3, 64, 64, 6), dtype=np.float32))
        assert np.isfinite(out).all()
        assert 0.0 < out.min() and out.max() < 1.0

    def test_eval_mode_is_deterministic(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=2)
        x = rand_planes(rng, size=64)
        np.testing.assert_array_equal(forward(net, x), forward(net, x))

    def test_batched_input(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=3)
        out = forward(net, rand_planes(rng, size=64, batch=2))
        assert out.shape == (2, 64, 64, 3)

    def test_k5_builds_and_runs(self, rng):
        net = build_resnet(k=5, base_channels=8, seed=4)
        out = forward(net, rand_planes(rng, k=5, size=64))
        assert out.shape == (64, 64, 3)

    def test_fully_convolutional_scaling(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=5)
        out = forward(net, rand_planes(rng, size=128))
        assert out.shape == (128, 128, 3)

    def test_activation_shapes_match_plan(self, rng):
        k, w, patch = 3, 8, 64
        net = build_resnet(k=k, base_channels=w, seed=6)
        shapes = plan_shapes(net.plan, k, patch)
        seen = {}

        def hook(name):
            def fn(module, inp, out):
                seen[name] = (out.shape[-1], out.shape[1])
            return fn

        for spec in net.plan:
            unit = f"{spec.name}_b0" if spec.per_branch else spec.name
            net.units[unit].register_forward_hook(hook(spec.name))
        forward(net, rand_planes(rng, k=k, size=patch))
        for spec in net.plan:
            size, channels = shapes[spec.name]
            per_unit = channels // (k if spec.per_branch else 1)
            assert seen[spec.name] == (size, per_unit), spec.name

    def test_indivisible_size_rejected(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=7)
        with pytest.raises(ShapeError, match="divisible"):
            forward(net, rand_planes(rng, size=60))

    def test_wrong_k_rejected(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=8)
        with pytest.raises(ShapeError):
            forward(net, rand_planes(rng, k=2, size=64))

    def test_non_finite_activation_names_layer(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=9)
        with torch.no_grad():
            net.units["enc3"].conv.weight[0, 0, 0, 0] = float("inf")
        with pytest.raises(NumericError, match="enc3"):
            forward(net, rand_planes(rng, size=64))

    def test_invalid_mode_rejected(self, rng):
        net = build_resnet(k=3, base_channels=8, seed=10)
        with pytest.raises(ValueError, match="mode"):
            forward(net, rand_planes(rng, size=64), mode="test")


class TestResidualIdentity:
    @pytest.mark.parametrize("training", [False, True])
    def test_zero_weights_make_identity(self, training):
        block = _ResidualBlock(8)
        with torch.no_grad():
            block.conv1.weight.zero_()
            block.conv1.bias.zero_()
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
        block.train(training)
        x = torch.randn(2, 8, 16, 16)
        torch.testing.assert_close(block(x), x, rtol=0, atol=0)

    def test_zeroed_resnet_trunk_passes_features_through(self):
        net = build_resnet(k=3, base_channels=8, seed=11)
        with torch.no_grad():
            for i in range(1, 10):
                block = net.units[f"res{i}"]
                block.conv1.weight.zero_()
                block.conv1.bias.zero_()
                block.conv2.weight.zero_()
                block.conv2.bias.zero_()
        x = torch.rand(1, 3, 6, 64, 64)
        captured = {}
        net.units["res1"].register_forward_hook(lambda m, i, o: captured.setdefault("in", i[0]))
        net.units["res9"].register_forward_hook(lambda m, i, o: captured.setdefault("out", o))
        net.eval()
        with torch.no_grad():
            net(x)
        torch.testing.assert_close(captured["out"], captured["in"], rtol=0, atol=0)


class TestBuildValidation:
    def test_bad_variant(self):
        with pytest.raises(ValueError, match="variant"):
            MergeNetwork("vgg", k=3)

    def test_unet_patch_must_divide_256(self):
        with pytest.raises(ShapeError, match="divisible"):
            build_unet(k=3, patch=192, base_channels=8)

    def test_resnet_patch_must_divide_8(self):
        with pytest.raises(ShapeError, match="divisible"):
            build_resnet(k=3, patch=60, base_channels=8)

    def test_per_branch_encoders_have_distinct_weights(self):
        net = build_resnet(k=3, base_channels=8, seed=12)
        w0 = net.units["enc1_b0"].conv.weight
        w1 = net.units["enc1_b1"].conv.weight
        assert not torch.equal(w0, w1)

    def test_same_seed_same_weights(self):
        a = build_resnet(k=3, base_channels=8, seed=13)
        b = build_resnet(k=3, base_channels=8, seed=13)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)


class TestToTorchInput:
    def test_layout_round_trip(self, rng):
        planes = rand_planes(rng, size=8)
        x = to_torch_input(planes)
        assert x.shape == (1, 3, 6, 8, 8)
        np.testing.assert_array_equal(x[0, 1].permute(1, 2, 0).numpy(), planes[1])

    def test_rejects_bad_channel_count(self, rng):
        with pytest.raises(ShapeError):
            to_torch_input(rng.random((3, 8, 8, 5), dtype=np.float32))


class TestCheckpoint:
    def test_round_trip_preserves_state_and_outputs(self, tmp_path, rng):
        net = build_resnet(k=3, base_channels=8, seed=14)
        x = rand_planes(rng, size=64)
        before = forward(net, x)
        path = tmp_path / "net.hdrw"
        save_checkpoint(path, net, iteration=17)
        loaded, meta = load_checkpoint(path)
        assert meta["iteration"] == 17
        assert meta["variant"] == "resnet"
        for (na, pa), (nb, pb) in zip(net.state_dict().items(), loaded.state_dict().items()):
            assert na == nb
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)
        np.testing.assert_array_equal(forward(loaded, x), before)

    def test_unet_round_trip(self, tmp_path, rng):
        net = build_unet(k=2, base_channels=8, seed=15)
        path = tmp_path / "u.hdrw"
        save_checkpoint(path, net)
        loaded, meta = load_checkpoint(path)
        assert loaded.variant == "unet" and loaded.k == 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.hdrw"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_optimizer_state_round_trips(self, tmp_path, rng):
        import hdrforge.train as trainmod

        net = build_resnet(k=3, base_channels=8, seed=16)
        cfg = trainmod.TrainConfig(variant="resnet", k=3, base_channels=8, patch_size=64,
                                   learning_rate=1e-3, batch_size=1, iterations=1)
        opt = trainmod.make_optimizer(net, cfg)
        inputs = rand_planes(rng, size=64, batch=1)
        targets = rng.random((1, 64, 64, 3), dtype=np.float32)
        trainmod.train_step(net, opt, inputs, targets, cfg)
        path = tmp_path / "opt.hdrw"
        save_checkpoint(path, net, iteration=1, optimizer=opt)
        loaded, meta = load_checkpoint(path)
        assert "optimizer" in meta
        opt2 = trainmod.make_optimizer(loaded, cfg)
        from hdrforge.net import restore_optimizer

        restore_optimizer(opt2, loaded, meta["optimizer"])
        params = [p for _, p in sorted(net.named_parameters())]
        params2 = [p for _, p in sorted(loaded.named_parameters())]
        for p, p2 in zip(params, params2):
            torch.testing.assert_close(opt.state[p]["exp_avg"], opt2.state[p2]["exp_avg"],
                                       rtol=0, atol=0)
            assert opt.state[p]["step"].item() == opt2.state[p2]["step"].item()
