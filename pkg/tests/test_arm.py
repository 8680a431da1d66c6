import numpy as np
import pytest

from arm_lab.arm import (
    ArmConfig,
    ArmHead,
    GenericFeatureState,
    Network,
    affinity_backward,
    affinity_forward,
    affinity_update,
    arm_param_count,
    arm_shape_trace,
    build_network,
    load_checkpoint,
    save_checkpoint,
)
from arm_lab.errors import ConfigError, DataError, KernelTooLargeError, UninitializedStateError
from arm_lab.tensor import Tensor


class TestArmConfig:
    def test_reference_defaults(self):
        cfg = ArmConfig(channels=512, height=7, width=7, classes=7)
        assert cfg.ratio == 16
        assert cfg.da_kernel == 32
        assert cfg.da_stride == 8
        assert cfg.shuffle_spec.out_channels == 2
        assert (cfg.feature_height, cfg.feature_width) == (11, 11)
        assert cfg.feature_count == 121

    def test_desk_scale_defaults(self):
        cfg = ArmConfig(channels=32, height=4, width=4, classes=7)
        assert cfg.ratio == 4
        assert cfg.da_kernel == 8
        assert cfg.da_stride == 2
        assert cfg.shuffle_spec.out_channels == 2
        assert cfg.feature_count == 25

    def test_explicit_ratio_must_divide(self):
        with pytest.raises(Exception):
            ArmConfig(channels=32, height=4, width=4, classes=7, ratio=3)

    def test_kernel_must_fit(self):
        with pytest.raises(KernelTooLargeError):
            ArmConfig(channels=32, height=4, width=4, classes=7, da_kernel=99)

    def test_smoothing_range(self):
        with pytest.raises(ConfigError):
            ArmConfig(channels=32, height=4, width=4, classes=7, smoothing_init=1.5)

    def test_round_trips_through_dict(self):
        cfg = ArmConfig(channels=32, height=4, width=4, classes=5)
        again = ArmConfig(**cfg.to_dict())
        assert again == cfg


class TestParamCounts:
    def test_reference_golden(self):
        cfg = ArmConfig(channels=512, height=7, width=7, classes=7)
        counts = arm_param_count(cfg)
        assert counts == {
            "arrangement": 0,
            "de_albino": 1024,
            "batchnorm": 4,
            "mean": 0,
            "affinity": 1,
            "fc": 854,
            "total": 1883,
        }

    def test_counts_match_allocated_tensors(self):
        cfg = ArmConfig(channels=32, height=4, width=4, classes=7)
        head = ArmHead(np.random.default_rng(0), cfg)
        allocated = sum(t.size for _, t in head.params())
        assert allocated == arm_param_count(cfg)["total"]

    def test_frozen_smoothing_drops_the_parameter(self):
        cfg = ArmConfig(
            channels=32, height=4, width=4, classes=7, smoothing_learnable=False
        )
        assert arm_param_count(cfg)["affinity"] == 0
        head = ArmHead(np.random.default_rng(0), cfg)
        assert "smoothing" not in dict(head.params())


class TestShapeTrace:
    def test_reference_trace(self):
        cfg = ArmConfig(channels=512, height=7, width=7, classes=7)
        trace = dict(arm_shape_trace(cfg))
        assert trace["input"] == (512, 7, 7)
        assert trace["arranged"] == (2, 112, 112)
        assert trace["weighted"] == (2, 11, 11)
        assert trace["pooled"] == (11, 11)
        assert trace["flattened"] == (121,)
        assert trace["logits"] == (7,)

    def test_trace_matches_actual_forward(self):
        cfg = ArmConfig(channels=32, height=4, width=4, classes=7)
        head = ArmHead(np.random.default_rng(1), cfg)
        x = Tensor(np.random.default_rng(2).standard_normal((3, 32, 4, 4)).astype(np.float32))
        logits, cache = head.forward(x, mode="train", update_state=True)
        trace = dict(arm_shape_trace(cfg))
        assert cache["arranged"].shape == (3,) + trace["arranged"]
        assert cache["pooled_shape"] == (3,) + trace["pooled"]
        assert cache["flat"].shape == (3,) + trace["flattened"]
        assert logits.shape == (3, 7)


class TestAffinitySplit:
    def test_ema_blend_golden(self):
        state = GenericFeatureState.create(0.3, True)
        affinity_update(state, np.full((2, 2), 1.0))  # first call initializes
        affinity_update(state, np.full((2, 2), 2.0))
        assert np.allclose(state.feature.data, 1.3, atol=1e-7)

    def test_smoothing_zero_keeps_the_buffer_exactly(self):
        state = GenericFeatureState.create(0.0, False)
        affinity_update(state, np.full((2, 2), 0.5))
        before = state.feature.data.copy()
        affinity_update(state, np.full((2, 2), 123.0))
        assert np.array_equal(state.feature.data, before)

    def test_smoothing_one_tracks_the_batch_exactly(self):
        state = GenericFeatureState.create(1.0, False)
        affinity_update(state, np.full((2, 2), 0.5))
        affinity_update(state, np.full((2, 2), 0.25))
        assert np.all(state.feature.data == 0.25)

    def test_first_batch_subtracts_its_own_mean(self):
        state = GenericFeatureState.create(0.3, True)
        rng = np.random.default_rng(0)
        features = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out, _ = affinity_forward(state, features, "train", update_state=True)
        expected = features - features.mean(axis=0, dtype=np.float64)[None].astype(np.float32)
        assert np.abs(out - expected).max() <= 1e-6
        assert state.initialized

    def test_train_blends_batch_mean_with_buffer(self):
        state = GenericFeatureState.create(0.25, True)
        buffer = np.full((2, 2), 1.0, np.float32)
        state.feature = Tensor(buffer)
        state.initialized = True
        features = np.full((3, 2, 2), 5.0, np.float32)
        out, cache = affinity_forward(state, features, "train", update_state=False)
        # mixed estimate: 0.25*5 + 0.75*1 = 2.0, so output is 5 - 2 = 3
        assert np.all(out == 3.0)
        assert np.array_equal(state.feature.data, buffer)  # stateless pass
        out2, _ = affinity_forward(state, features, "train", update_state=True)
        assert np.all(out2 == 3.0)
        assert np.all(state.feature.data == 2.0)  # buffer moved to the blend

    def test_eval_subtracts_frozen_buffer(self):
        state = GenericFeatureState.create(0.3, True)
        state.feature = Tensor(np.full((2, 2), 1.5, np.float32))
        state.initialized = True
        out, _ = affinity_forward(state, np.full((1, 2, 2), 2.0, np.float32), "eval")
        assert np.all(out == 0.5)

    def test_eval_before_any_batch_is_an_error(self):
        state = GenericFeatureState.create(0.3, True)
        with pytest.raises(UninitializedStateError):
            affinity_forward(state, np.zeros((1, 2, 2), np.float32), "eval")

    def test_stateless_train_needs_a_primed_buffer(self):
        state = GenericFeatureState.create(0.3, True)
        with pytest.raises(UninitializedStateError):
            affinity_forward(state, np.zeros((2, 2, 2), np.float32), "train", False)

    def test_out_of_range_coefficient_is_clamped_at_use(self):
        state = GenericFeatureState.create(0.3, True)
        state.smoothing.data[0] = 1.7
        assert state.clamped_smoothing() == 1.0
        state.smoothing.data[0] = -0.2
        assert state.clamped_smoothing() == 0.0
        state.clamp_param()
        assert state.smoothing.data[0] == 0.0

    def test_smoothing_gradient_sign(self):
        # raising the coefficient moves the estimate toward the batch mean;
        # if the batch mean exceeds the buffer, outputs drop, so d(sum out)/d(lam) < 0
        state = GenericFeatureState.create(0.5, True)
        state.feature = Tensor(np.zeros((2, 2), np.float32))
        state.initialized = True
        features = np.full((2, 2, 2), 1.0, np.float32)
        _, cache = affinity_forward(state, features, "train", update_state=False)
        _, grad_lam = affinity_backward(np.ones((2, 2, 2), np.float32), cache)
        assert grad_lam == -8.0  # sum over 2 samples x 4 cells of (mean - buffer) = 1

    def test_eval_backward_passes_through(self):
        state = GenericFeatureState.create(0.3, True)
        state.feature = Tensor(np.zeros((2, 2), np.float32))
        state.initialized = True
        _, cache = affinity_forward(state, np.ones((2, 2, 2), np.float32), "eval")
        g = np.random.default_rng(0).standard_normal((2, 2, 2)).astype(np.float32)
        grad_features, grad_lam = affinity_backward(g, cache)
        assert np.array_equal(grad_features, g)
        assert grad_lam == 0.0


class TestNetworks:
    def make_desc(self, kind, **extra):
        desc = {
            "type": kind,
            "input_extent": 16,
            "backbone_widths": [4, 8],
            "classes": 3,
        }
        if kind == "arm":
            desc["arm"] = {"channels": 8, "height": 4, "width": 4, "classes": 3}
        desc.update(extra)
        return desc

    def test_build_is_seed_deterministic(self):
        a = build_network(self.make_desc("arm"), seed=4)
        b = build_network(self.make_desc("arm"), seed=4)
        for (name_a, ta), (name_b, tb) in zip(a.params(), b.params()):
            assert name_a == name_b
            assert np.array_equal(ta.data, tb.data)

    def test_head_backbone_shape_mismatch_rejected(self):
        desc = self.make_desc("arm")
        desc["arm"]["channels"] = 16
        with pytest.raises(ConfigError, match="backbone"):
            build_network(desc)

    def test_unknown_type_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            build_network(self.make_desc("mystery"))

    @pytest.mark.parametrize("kind", ["arm", "gap", "sweep"])
    def test_forward_backward_runs(self, kind):
        desc = self.make_desc(kind, kernel=2) if kind == "sweep" else self.make_desc(kind)
        net = build_network(desc, seed=0)
        rng = np.random.default_rng(1)
        # prime stateful buffers on a separate batch so every later gradient,
        # the smoothing coefficient's included, is comfortably nonzero
        net.forward(rng.standard_normal((4, 1, 16, 16)).astype(np.float32), mode="train")
        x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
        logits, cache = net.forward(x, mode="train")
        assert logits.shape == (4, 3)
        net.zero_grads()
        grad_x = net.backward(Tensor(np.ones((4, 3), np.float32)), cache)
        assert grad_x.shape == (4, 1, 16, 16)
        for name, tensor in net.params():
            assert tensor.grad is not None, name
            assert np.abs(tensor.grad).sum() > 0, name

    def test_checkpoint_round_trip(self, tmp_path):
        net = build_network(self.make_desc("arm"), seed=2)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
        net.forward(x, mode="train")  # initialize affinity buffer and BN stats
        eval_before, _ = net.forward(x, mode="eval")
        save_checkpoint(tmp_path / "ckpt", net, extra={"note": "test"})
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["extra"]["note"] == "test"
        eval_after, _ = loaded.forward(x, mode="eval")
        assert np.array_equal(eval_before.data, eval_after.data)
        state_a = net.state_dict()
        state_b = loaded.state_dict()
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            assert np.array_equal(state_a[key], state_b[key]), key

    def test_checkpoint_without_state_stays_uninitialized(self, tmp_path):
        net = build_network(self.make_desc("arm"), seed=2)
        save_checkpoint(tmp_path / "fresh", net)
        loaded, _ = load_checkpoint(tmp_path / "fresh")
        with pytest.raises(UninitializedStateError):
            loaded.forward(np.zeros((1, 1, 16, 16), np.float32), mode="eval")

    def test_corrupt_checkpoint_shape_rejected(self, tmp_path):
        from arm_lab.tensor import Tensor as T, save_tensor

        net = build_network(self.make_desc("gap"), seed=0)
        save_checkpoint(tmp_path / "ckpt", net)
        save_tensor(tmp_path / "ckpt" / "head_fc_bias.ten", T(np.zeros(99, np.float32)))
        with pytest.raises(DataError, match="head.fc_bias"):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_checkpoint(tmp_path)
