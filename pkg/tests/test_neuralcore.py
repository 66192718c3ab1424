"""Model-core tests: parameter init, filter inflation, sequence assembly,
forward invariants, finite-difference gradient checks, and checkpoints."""

import numpy as np
import pytest

from taskvol import autodiff as ad
from taskvol import kernels
from taskvol.config import ModelConfig, desk_preset
from taskvol.errors import GridShapeError, NumericFault
from taskvol.losses import bce_with_logits, focal_loss
from taskvol.maskpatch import flatten_token_grid
from taskvol.neuralcore import (ATTENTION_MASK_VALUE, ParameterStore,
                                TaskModel, grad_check, inflate_2d_to_3d,
                                load_checkpoint, save_checkpoint)
from taskvol.taskbank import PAD_ID

TINY = ModelConfig(input_shape=(8, 8, 8), downsample=4, intermediate=2,
                   hidden=16, layers=2, heads=2, max_text_len=4,
                   vocab_size=32)


def tiny_model(dtype=np.float64, seed=0):
    cfg = ModelConfig(input_shape=TINY.input_shape, downsample=4,
                      intermediate=2, hidden=16, layers=2, heads=2,
                      max_text_len=4, vocab_size=32, seed=seed)
    store = ParameterStore(cfg, dtype=dtype)
    return TaskModel(cfg, params=store)


class TestParameterStore:
    def test_seeded_init_is_reproducible(self):
        a = ParameterStore(TINY)
        b = ParameterStore(TINY)
        assert sorted(a.names()) == sorted(b.names())
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seed_differs(self):
        other = ModelConfig(input_shape=(8, 8, 8), downsample=4,
                            intermediate=2, hidden=16, layers=2, heads=2,
                            max_text_len=4, vocab_size=32, seed=7)
        a, b = ParameterStore(TINY), ParameterStore(other)
        assert any(not np.array_equal(a[n].data, b[n].data)
                   for n in a.names())

    def test_everything_finite_and_counted(self):
        store = ParameterStore(TINY)
        assert store.all_finite()
        assert store.total_count == sum(t.data.size
                                        for t in store.tensors.values())
        assert store.total_count > 0

    def test_position_table_covers_max_sequence(self):
        store = ParameterStore(TINY)
        assert store["embed.positions"].data.shape == (TINY.max_seq_len,
                                                       TINY.hidden)
        assert store["head.seg.w"].data.shape == \
            (TINY.hidden, TINY.intermediate ** 3)

    def test_state_dict_round_trip_and_mismatch(self):
        store = ParameterStore(TINY)
        state = store.state_dict()
        fresh = ParameterStore(TINY)
        fresh.load_state_dict(state)
        for name in store.names():
            np.testing.assert_array_equal(fresh[name].data, store[name].data)
        bad = dict(state)
        bad.pop("head.cls.w")
        with pytest.raises(GridShapeError):
            fresh.load_state_dict(bad)
        bad = dict(state)
        bad["head.cls.w"] = np.zeros((3, 3))
        with pytest.raises(GridShapeError):
            fresh.load_state_dict(bad)


class TestInflation:
    def test_depth_one_is_exact_copy(self):
        rng = np.random.default_rng(0)
        w2 = rng.standard_normal((4, 2, 3, 3))
        w3 = inflate_2d_to_3d(w2, 1)
        assert w3.shape == (4, 2, 1, 3, 3)
        np.testing.assert_array_equal(w3[:, :, 0], w2)

    def test_depth_slices_are_bitwise_identical(self):
        rng = np.random.default_rng(1)
        w2 = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        w3 = inflate_2d_to_3d(w2, 3)
        assert w3.shape == (5, 3, 3, 3, 3)
        for dz in range(3):
            np.testing.assert_array_equal(w3[:, :, dz], w2)

    def test_depth_constant_input_scales_2d_response(self):
        # On a volume constant along depth, each valid 3-deep window sums
        # k_d identical planar responses: conv3d == 3 * conv2d, interior.
        rng = np.random.default_rng(2)
        plane = rng.standard_normal((7, 9))
        vol = np.broadcast_to(plane, (11,) + plane.shape).copy()
        w2 = rng.standard_normal((2, 1, 3, 3))
        w3 = inflate_2d_to_3d(w2, 3)
        out3 = kernels.conv3d_forward(vol[None].astype(np.float64),
                                      w3, None, stride=1, pad=0)
        # brute-force valid 2D convolution (correlation convention)
        oy, ox = plane.shape[0] - 2, plane.shape[1] - 2
        out2 = np.zeros((2, oy, ox))
        for c in range(2):
            for i in range(oy):
                for j in range(ox):
                    out2[c, i, j] = np.sum(plane[i:i + 3, j:j + 3] * w2[c, 0])
        for dz in range(out3.shape[1]):
            np.testing.assert_allclose(out3[:, dz], 3.0 * out2,
                                       rtol=1e-12, atol=1e-12)

    def test_bad_inputs_rejected(self):
        with pytest.raises(GridShapeError):
            inflate_2d_to_3d(np.zeros((3, 3)), 3)
        with pytest.raises(GridShapeError):
            inflate_2d_to_3d(np.zeros((1, 1, 3, 3)), 0)


class TestVisionEncode:
    def test_desk_scale_token_rows(self):
        cfg = desk_preset()["model"]
        model = TaskModel(cfg, dtype=np.float32)
        e_v = model.vision_encode(np.zeros(cfg.input_shape, dtype=np.float32))
        assert e_v.shape == (160, cfg.hidden)
        assert np.all(np.isfinite(e_v.data))

    def test_distinct_inputs_give_distinct_rows(self):
        model = tiny_model()
        rng = np.random.default_rng(3)
        a = model.vision_encode(rng.normal(size=(8, 8, 8)))
        b = model.vision_encode(rng.normal(size=(8, 8, 8)))
        assert not np.allclose(a.data, b.data)

    def test_wrong_shape_rejected(self):
        model = tiny_model()
        with pytest.raises(GridShapeError):
            model.vision_encode(np.zeros((8, 8, 4)))

    def test_row_order_matches_mask_token_order(self):
        # Re-run the encoder stages with the same primitives, but flatten
        # the final feature grid through the mask module's canonical
        # flattener: rows must agree exactly.
        model = tiny_model()
        rng = np.random.default_rng(4)
        vol = rng.normal(size=(8, 8, 8))
        expected = model.vision_encode(vol).data

        p = model.params
        x = vol.reshape((1, 8, 8, 8))
        for i in range(2):
            t = ad.conv3d(ad.Tensor(x), p[f"encoder.stage{i}.w"],
                          p[f"encoder.stage{i}.b"], stride=2, pad=1)
            c = t.shape[0]
            flat = t.reshape(c, -1).transpose(1, 0)
            flat = ad.layer_norm(flat, p[f"encoder.stage{i}.norm_gain"],
                                 p[f"encoder.stage{i}.norm_bias"])
            x = flat.transpose(1, 0).reshape(*t.shape).gelu().data
        grid = np.moveaxis(x, 0, -1)          # (gx, gy, gz, channels)
        rows = flatten_token_grid(grid)
        manual = rows @ p["encoder.proj.w"].data + p["encoder.proj.b"].data
        np.testing.assert_array_equal(manual, expected)


class TestSequenceAssembly:
    def test_desk_length_with_six_tokens(self):
        cfg = desk_preset()["model"]
        model = TaskModel(cfg, dtype=np.float32)
        e_v = ad.Tensor(np.zeros((cfg.token_count, cfg.hidden),
                                 dtype=np.float32))
        z, mask = model.assemble_sequence(e_v, [4, 9, 2, 17, 3, 8])
        assert cfg.token_count == 160
        assert z.shape == (168, cfg.hidden)
        assert mask.shape == (168,)

    def test_minimum_length_without_text(self):
        model = tiny_model()
        e_v = ad.Tensor(np.zeros((8, 16)))
        z, _ = model.assemble_sequence(e_v, [])
        assert z.shape == (10, 16)

    def test_zeroed_positions_expose_vision_rows(self):
        model = tiny_model()
        model.params["embed.positions"].data[:] = 0.0
        rng = np.random.default_rng(5)
        e_v = ad.Tensor(rng.normal(size=(8, 16)))
        z, _ = model.assemble_sequence(e_v, [3, 1])
        np.testing.assert_array_equal(z.data[1:9], e_v.data)
        np.testing.assert_array_equal(z.data[0],
                                      model.params["embed.cls"].data[0])

    def test_mask_marks_exactly_the_pad_positions(self):
        model = tiny_model()
        e_v = ad.Tensor(np.zeros((8, 16)))
        _, mask = model.assemble_sequence(e_v, [5, PAD_ID, 9, PAD_ID])
        expected = np.zeros(14)
        expected[11] = ATTENTION_MASK_VALUE
        expected[13] = ATTENTION_MASK_VALUE
        np.testing.assert_array_equal(mask, expected)

    def test_out_of_vocabulary_id_rejected(self):
        model = tiny_model()
        e_v = ad.Tensor(np.zeros((8, 16)))
        with pytest.raises(GridShapeError):
            model.assemble_sequence(e_v, [31, 32])


class TestForward:
    def test_output_shapes_and_determinism(self):
        model = tiny_model()
        rng = np.random.default_rng(6)
        vol = rng.normal(size=(8, 8, 8))
        c1, s1 = model.forward(vol, [5, 9])
        c2, s2 = model.forward(vol, [5, 9])
        assert c1.shape == ()
        assert s1.shape == (8, 8)
        np.testing.assert_array_equal(c1.data, c2.data)
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_zero_volume_is_finite(self):
        model = tiny_model()
        c, s = model.forward(np.zeros((8, 8, 8)), [5])
        assert np.isfinite(c.data)
        assert np.all(np.isfinite(s.data))

    def test_trailing_padding_does_not_change_outputs(self):
        model = tiny_model()
        rng = np.random.default_rng(7)
        vol = rng.normal(size=(8, 8, 8))
        c_short, s_short = model.forward(vol, [5, 9])
        c_pad, s_pad = model.forward(vol, [5, 9, PAD_ID, PAD_ID])
        np.testing.assert_allclose(c_pad.data, c_short.data,
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(s_pad.data, s_short.data,
                                   rtol=1e-12, atol=1e-12)

    def test_swapping_two_pad_slots_is_identity(self):
        model = tiny_model()
        rng = np.random.default_rng(8)
        vol = rng.normal(size=(8, 8, 8))
        a = model.forward(vol, [5, PAD_ID, 9, PAD_ID])
        b = model.forward(vol, [5, PAD_ID, 9, PAD_ID])
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_head_gradients_are_isolated(self):
        model = tiny_model()
        store = model.params
        rng = np.random.default_rng(9)
        vol = rng.normal(size=(8, 8, 8))

        store.zero_grad()
        cls_logit, _ = model.forward(vol, [5, 9])
        cls_logit.backward()
        assert store["head.cls.w"].grad is not None
        assert store["head.seg.w"].grad is None
        assert store["head.seg.b"].grad is None

        store.zero_grad()
        _, seg_logits = model.forward(vol, [5, 9])
        seg_logits.sum().backward()
        assert store["head.seg.w"].grad is not None
        assert store["head.cls.w"].grad is None
        assert store["head.cls.b"].grad is None

    def test_poisoned_parameters_raise_numeric_fault(self):
        model = tiny_model()
        model.params["layer0.attn.wq"].data[0, 0] = np.nan
        with pytest.raises(NumericFault):
            model.forward(np.zeros((8, 8, 8)), [5])


class TestGradCheck:
    def test_linear_head_alone(self):
        store = ParameterStore(TINY, dtype=np.float64)
        rng = np.random.default_rng(10)
        feat = ad.Tensor(rng.normal(size=(16,)))

        def loss_fn():
            logit = (feat @ store["head.cls.w"]
                     + store["head.cls.b"]).reshape(())
            return bce_with_logits(logit, 1)

        err = grad_check(loss_fn, {"head.cls.w": store["head.cls.w"],
                                   "head.cls.b": store["head.cls.b"]},
                         sample=8)
        assert err < 1e-6

    def test_full_tiny_model(self):
        model = tiny_model()
        rng = np.random.default_rng(11)
        vol = rng.normal(size=(8, 8, 8))
        seg_target = (rng.random((8, 8)) < 0.3).astype(np.uint8)

        def loss_fn():
            cls_logit, seg_logits = model.forward(vol, [5, 9, PAD_ID])
            return bce_with_logits(cls_logit, 1) \
                + focal_loss(seg_logits, seg_target)

        err = grad_check(loss_fn, dict(model.params.tensors), sample=4)
        assert err < 1e-4

    def test_zero_loss_gives_zero_gradients(self):
        store = ParameterStore(TINY, dtype=np.float64)

        def loss_fn():
            return (store["head.cls.w"] * 0.0).sum()

        err = grad_check(loss_fn, {"head.cls.w": store["head.cls.w"]},
                         sample=8)
        assert err == 0.0


class TestCheckpoints:
    def test_round_trip_state_and_metadata(self, tmp_path):
        store = ParameterStore(TINY, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, step=42, val_metric=0.875,
                        config_dict={"hidden": 16})
        state, header = load_checkpoint(path)
        assert header["step"] == 42
        assert header["val_metric"] == pytest.approx(0.875)
        assert header["config"] == {"hidden": 16}
        assert set(state) == set(store.names())
        for name in store.names():
            np.testing.assert_array_equal(state[name], store[name].data)

    def test_reloaded_model_reproduces_outputs(self, tmp_path):
        model = tiny_model(dtype=np.float32, seed=3)
        rng = np.random.default_rng(12)
        vol = rng.normal(size=(8, 8, 8)).astype(np.float32)
        c_ref, s_ref = model.forward(vol, [5, 9])

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model.params, step=1)
        fresh = tiny_model(dtype=np.float32, seed=8)  # different init
        state, _ = load_checkpoint(path)
        fresh.params.load_state_dict(state)
        c_new, s_new = fresh.forward(vol, [5, 9])
        np.testing.assert_array_equal(c_new.data, c_ref.data)
        np.testing.assert_array_equal(s_new.data, s_ref.data)

    def test_truncated_file_rejected(self, tmp_path):
        store = ParameterStore(TINY, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, step=0)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(GridShapeError):
            load_checkpoint(clipped)
        tiny = tmp_path / "tiny.ckpt"
        tiny.write_bytes(b"\x01")
        with pytest.raises(GridShapeError):
            load_checkpoint(tiny)
