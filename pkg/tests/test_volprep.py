"""Preprocessing chain tests: file I/O, centering, cropping, resampling."""

import gzip
import struct
import warnings
from collections import deque

import numpy as np
import pytest

from taskvol import volprep
from taskvol.config import FrameSpec, desk_preset
from taskvol.errors import CenteringError, IngestionError
from taskvol.volprep import (AugmentParams, VolumeGrid, apply_augment,
                             augment, body_center, clip_hu, crop_z_to_lung,
                             finalize_input, load_cache, load_volume,
                             resample_and_frame, sample_augment_params,
                             save_cache, save_volume)


def make_grid(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = spacing
    return VolumeGrid(data=data, spacing=spacing, affine=aff)


def write_nifti_by_hand(path, data, spacing, datatype=16, scl=(1.0, 0.0),
                        srow=None, magic=b"n+1\x00", dim0=3, dim4=1):
    """Build header bytes directly — independent of the package writer."""
    nx, ny, nz = data.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, dim0, nx, ny, nz, dim4, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, {4: 16, 16: 32}[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, scl[0])
    struct.pack_into("<f", hdr, 116, scl[1])
    if srow is None:
        srow = [[spacing[0], 0, 0, 0], [0, spacing[1], 0, 0],
                [0, 0, spacing[2], 0]]
    struct.pack_into("<4f", hdr, 280, *srow[0])
    struct.pack_into("<4f", hdr, 296, *srow[1])
    struct.pack_into("<4f", hdr, 312, *srow[2])
    hdr[344:348] = magic
    np_dtype = {4: "<i2", 16: "<f4"}[datatype]
    body = np.asarray(data, dtype=np_dtype).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4 + body)


class TestVolumeIO:
    def test_round_trip_through_own_writer(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.normal(0, 200, (16, 16, 16)).astype(np.float32)
        vol = make_grid(data, spacing=(1.0, 1.0, 1.0))
        path = tmp_path / "vol.nii"
        save_volume(path, vol)
        loaded = load_volume(path)
        assert loaded.dims == (16, 16, 16)
        assert loaded.spacing == (1.0, 1.0, 1.0)
        np.testing.assert_array_equal(loaded.data, data)

    def test_gzip_round_trip(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        path = tmp_path / "vol.nii.gz"
        save_volume(path, make_grid(data))
        with open(path, "rb") as fh:
            assert fh.read(2) == b"\x1f\x8b"  # actually gzipped
        np.testing.assert_array_equal(load_volume(path).data, data)

    def test_hand_written_header_spacing_preserved(self, tmp_path):
        data = np.zeros((4, 5, 6), dtype=np.float32)
        path = tmp_path / "aniso.nii"
        write_nifti_by_hand(path, data, spacing=(0.7, 0.7, 1.5))
        loaded = load_volume(path)
        np.testing.assert_allclose(loaded.spacing, (0.7, 0.7, 1.5), rtol=1e-6)
        assert loaded.dims == (4, 5, 6)

    def test_int16_with_scaling(self, tmp_path):
        data = np.array([[[-1024, 0], [512, 2000]]], dtype=np.int16).reshape(1, 2, 2)
        path = tmp_path / "ct.nii"
        write_nifti_by_hand(path, data, spacing=(1, 1, 1), datatype=4,
                            scl=(2.0, -10.0))
        loaded = load_volume(path)
        np.testing.assert_allclose(loaded.data,
                                   data.astype(np.float64) * 2.0 - 10.0)

    def test_fortran_axis_order(self, tmp_path):
        # x varies fastest on disk; check a marked voxel lands at [x, y, z]
        data = np.zeros((3, 4, 5), dtype=np.float32)
        data[2, 1, 3] = 99.0
        path = tmp_path / "order.nii"
        write_nifti_by_hand(path, data, spacing=(1, 1, 1))
        loaded = load_volume(path)
        assert loaded.data[2, 1, 3] == 99.0
        assert loaded.data.sum() == 99.0

    def test_non_invertible_affine_rejected(self, tmp_path):
        path = tmp_path / "bad_affine.nii"
        write_nifti_by_hand(path, np.zeros((2, 2, 2), dtype=np.float32),
                            spacing=(1, 1, 1),
                            srow=[[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0]])
        with pytest.raises(IngestionError, match="affine"):
            load_volume(path)

    def test_multi_channel_rejected(self, tmp_path):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        path = tmp_path / "multi.nii"
        write_nifti_by_hand(path, data, spacing=(1, 1, 1), dim0=4, dim4=3)
        with pytest.raises(IngestionError, match="multi-channel"):
            load_volume(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        path = tmp_path / "f64.nii"
        data = np.zeros((2, 2, 2), dtype=np.float32)
        write_nifti_by_hand(path, data, spacing=(1, 1, 1))
        raw = bytearray(path.read_bytes())
        struct.pack_into("<h", raw, 70, 64)  # float64 code, outside subset
        path.write_bytes(bytes(raw))
        with pytest.raises(IngestionError, match="datatype"):
            load_volume(path)

    def test_truncated_and_missing_files(self, tmp_path):
        path = tmp_path / "trunc.nii"
        write_nifti_by_hand(path, np.zeros((4, 4, 4), dtype=np.float32),
                            spacing=(1, 1, 1))
        path.write_bytes(path.read_bytes()[:400])
        with pytest.raises(IngestionError, match="truncated"):
            load_volume(path)
        with pytest.raises(IngestionError, match="exist"):
            load_volume(tmp_path / "nope.nii")

    def test_garbage_header_rejected(self, tmp_path):
        path = tmp_path / "junk.nii"
        path.write_bytes(b"\x12\x34" * 400)
        with pytest.raises(IngestionError):
            load_volume(path)

    def test_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        vol = make_grid(rng.normal(size=(5, 6, 7)).astype(np.float32),
                        spacing=(1.0, 1.5, 2.0))
        save_cache(tmp_path / "c" / "item", vol)
        loaded = load_cache(tmp_path / "c" / "item")
        np.testing.assert_array_equal(loaded.data, vol.data)
        assert loaded.spacing == (1.0, 1.5, 2.0)


class TestClip:
    def test_clamps_both_ends(self):
        vol = make_grid(np.array([[[2500.0, -3000.0, 17.0]]]))
        out = clip_hu(vol)
        np.testing.assert_array_equal(out.data.ravel(), [1000.0, -1000.0, 17.0])

    def test_idempotent_and_bitwise_stable(self):
        rng = np.random.default_rng(2)
        vol = make_grid(rng.uniform(-900, 900, (4, 4, 4)).astype(np.float32))
        once = clip_hu(vol)
        twice = clip_hu(once)
        assert once.data.tobytes() == twice.data.tobytes()


def brute_force_largest_component(mask):
    """BFS over 26-neighborhoods; returns the largest component as a bool
    array.  Independent of the scipy-based path."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    best = None
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               for dz in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)]
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            x, y, z = queue.popleft()
            comp.append((x, y, z))
            for dx, dy, dz in offsets:
                p = (x + dx, y + dy, z + dz)
                if (0 <= p[0] < mask.shape[0] and 0 <= p[1] < mask.shape[1]
                        and 0 <= p[2] < mask.shape[2]
                        and mask[p] and not seen[p]):
                    seen[p] = True
                    queue.append(p)
        if best is None or len(comp) > len(best):
            best = comp
    out = np.zeros_like(mask)
    for p in best or []:
        out[p] = True
    return out


class TestBodyCenter:
    def test_centered_cuboid_analytic(self):
        data = np.full((40, 48, 8), -1000.0, dtype=np.float32)
        data[15:26, 19:30, :] = 0.0  # soft tissue; centroid (20, 24)
        cx, cy = body_center(make_grid(data))
        assert abs(cx - 20.0) <= 0.5
        assert abs(cy - 24.0) <= 0.5

    def test_largest_component_wins(self):
        data = np.full((20, 20, 6), -1000.0, dtype=np.float32)
        data[2:7, 2:7, 1:5] = 0.0     # 100 voxels
        data[14:19, 14:16, 2] = 0.0   # 10 voxels, far corner
        tissue = (data >= -150) & (data <= 250)
        comp = brute_force_largest_component(tissue)
        xs, ys, _ = np.nonzero(comp)
        cx, cy = body_center(make_grid(data))
        assert abs(cx - xs.mean()) <= 0.5
        assert abs(cy - ys.mean()) <= 0.5
        # sanity: the small blob would pull the centroid well past 0.5
        assert cx < 8

    def test_hull_fill_covers_concavities(self):
        # A hollow ring of tissue: the hull fill must include the cavity,
        # so the centroid stays at the ring center.
        data = np.full((21, 21, 4), -1000.0, dtype=np.float32)
        data[4:17, 4:17, :] = 0.0
        data[8:13, 8:13, :] = -1000.0  # punch out the middle (air)
        cx, cy = body_center(make_grid(data))
        assert abs(cx - 10.0) <= 0.5
        assert abs(cy - 10.0) <= 0.5

    def test_translation_equivariance(self):
        base = np.full((32, 32, 6), -1000.0, dtype=np.float32)
        base[5:12, 7:14, 1:5] = 100.0
        cx0, cy0 = body_center(make_grid(base))
        shifted = np.roll(base, shift=(9, 6), axis=(0, 1))
        cx1, cy1 = body_center(make_grid(shifted))
        assert abs((cx1 - cx0) - 9) <= 0.5
        assert abs((cy1 - cy0) - 6) <= 0.5

    def test_empty_volume_raises(self):
        vol = make_grid(np.full((8, 8, 8), -1000.0, dtype=np.float32))
        with pytest.raises(CenteringError):
            body_center(vol)


class TestZCrop:
    def _vol_with_lung(self, nz=60, lung=(10, 40), spacing_z=1.0):
        vol = make_grid(np.zeros((6, 6, nz), dtype=np.float32),
                        spacing=(1.0, 1.0, spacing_z))
        mask = np.zeros((6, 6, nz), dtype=np.uint8)
        mask[2:4, 2:4, lung[0]:lung[1] + 1] = 1
        return vol, mask

    def test_margin_keeps_five_mm(self):
        vol, mask = self._vol_with_lung()
        out = crop_z_to_lung(vol, mask, margin_mm=5)
        assert out.dims[2] == 45 - 5 + 1

    def test_margin_zero_exact_extent(self):
        vol, mask = self._vol_with_lung()
        out = crop_z_to_lung(vol, mask, margin_mm=0)
        assert out.dims[2] == 40 - 10 + 1

    def test_clamped_at_bounds(self):
        vol, mask = self._vol_with_lung(nz=42, lung=(0, 41))
        out = crop_z_to_lung(vol, mask, margin_mm=5)
        assert out.dims == vol.dims

    def test_anisotropic_spacing(self):
        # 2 mm slices: a 5 mm margin is 2.5 slices -> floor/ceil to 3
        vol, mask = self._vol_with_lung(spacing_z=2.0)
        out = crop_z_to_lung(vol, mask, margin_mm=5)
        assert out.dims[2] == (40 + 3) - (10 - 3) + 1

    def test_empty_mask_passthrough_with_warning(self):
        vol, mask = self._vol_with_lung()
        with pytest.warns(RuntimeWarning, match="empty lung mask"):
            out = crop_z_to_lung(vol, np.zeros_like(mask))
        assert out.dims == vol.dims

    def test_shape_mismatch_rejected(self):
        vol, _ = self._vol_with_lung()
        with pytest.raises(IngestionError):
            crop_z_to_lung(vol, np.zeros((2, 2, 2), dtype=np.uint8))


FRAME_SMALL = FrameSpec(frame_mm=(24, 20, 16), crop_mm=(16, 16, 16),
                        input_shape=(8, 8, 8))


class TestResampleAndFrame:
    def test_identity_when_already_framed(self):
        rng = np.random.default_rng(3)
        data = rng.uniform(-500, 500, (24, 20, 16))
        vol = make_grid(data)
        center = ((24 - 1) / 2, (20 - 1) / 2)
        out = resample_and_frame(vol, center, FRAME_SMALL)
        np.testing.assert_allclose(out.data, data, atol=1e-9)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_constant_volume_any_spacing(self):
        vol = make_grid(np.full((10, 12, 9), 321.0), spacing=(0.8, 1.3, 2.1))
        out = resample_and_frame(vol, (4.5, 5.5), FrameSpec(
            frame_mm=(6, 6, 6), crop_mm=(6, 6, 6), input_shape=(6, 6, 6)))
        np.testing.assert_allclose(out.data, 321.0, atol=1e-9)

    def test_linear_ramp_halved_increment(self):
        nx = 40
        data = np.tile(np.arange(nx, dtype=np.float64)[:, None, None],
                       (1, 8, 8))
        vol = make_grid(data, spacing=(2.0, 1.0, 1.0))
        frame = FrameSpec(frame_mm=(32, 8, 8), crop_mm=(32, 8, 8),
                          input_shape=(32, 8, 8))
        cx, cy = (nx - 1) / 2, 3.5
        out = resample_and_frame(vol, (cx, cy), frame)
        offsets = np.arange(32) - (32 - 1) / 2
        expected = cx + offsets / 2.0  # 2 mm input spacing halves the slope
        interior = out.data[:, 4, 4]
        np.testing.assert_allclose(interior, expected, atol=1e-6)
        increments = np.diff(interior)
        np.testing.assert_allclose(increments, 0.5, atol=1e-6)

    def test_mask_resample_stays_binary(self):
        rng = np.random.default_rng(4)
        mask = (rng.random((9, 11, 7)) < 0.4).astype(np.uint8)
        vol = make_grid(mask, spacing=(1.7, 0.9, 1.2))
        out = resample_and_frame(vol, (4.0, 5.0), FRAME_SMALL, mask=True)
        assert set(np.unique(out.data)) <= {0.0, 1.0}

    def test_padding_fills_with_air(self):
        vol = make_grid(np.zeros((4, 4, 4), dtype=np.float32))
        out = resample_and_frame(vol, (1.5, 1.5), FRAME_SMALL)
        assert out.data.min() == -1000.0
        assert out.dims == (24, 20, 16)


class TestAugment:
    def _vol(self, seed=5, shape=(16, 12, 8)):
        rng = np.random.default_rng(seed)
        return make_grid(rng.uniform(-800, 800, shape).astype(np.float32))

    def test_deterministic_given_seed(self):
        vol = self._vol()
        a = augment(vol, seed=123)
        b = augment(vol, seed=123)
        assert a.data.tobytes() == b.data.tobytes()
        c = augment(vol, seed=124)
        assert a.data.tobytes() != c.data.tobytes()

    def test_forced_identity_params(self):
        vol = self._vol()
        params = AugmentParams(angle_deg=0.0, zoom=1.0, noise_sigma=0.0,
                               offset=0.0, noise_seed=0)
        out = apply_augment(vol, params)
        np.testing.assert_allclose(out.data, vol.data, atol=1e-5)

    def test_noise_and_offset_statistics(self):
        shape = (24, 24, 24)
        n = np.prod(shape)
        vol = make_grid(np.zeros(shape, dtype=np.float32))
        params = AugmentParams(angle_deg=0.0, zoom=1.0, noise_sigma=20.0,
                               offset=30.0, noise_seed=99)
        out = apply_augment(vol, params)
        assert abs(out.data.mean() - 30.0) < 3 * 20.0 / np.sqrt(n)
        assert abs(out.data.std() - 20.0) < 1.0

    def test_mask_path_geometric_only(self):
        rng = np.random.default_rng(6)
        mask = (rng.random((16, 16, 8)) < 0.5).astype(np.uint8)
        vol = make_grid(mask)
        params = sample_augment_params(7)
        out = apply_augment(vol, params, mask=True)
        assert set(np.unique(out.data)) <= {0, 1}
        # same geometry twice -> identical (no noise on masks)
        out2 = apply_augment(vol, params, mask=True)
        np.testing.assert_array_equal(out.data, out2.data)

    def test_rotation_moves_offcenter_feature(self):
        data = np.full((32, 32, 4), -1000.0, dtype=np.float32)
        data[24:27, 15:18, :] = 500.0
        vol = make_grid(data)
        params = AugmentParams(angle_deg=15.0, zoom=1.0, noise_sigma=0.0,
                               offset=0.0, noise_seed=0)
        out = apply_augment(vol, params)
        moved = np.argwhere(out.data.max(axis=2) > -400)
        orig = np.argwhere(data.max(axis=2) > -400)
        assert moved.size and not np.array_equal(moved, orig)


class TestFinalize:
    def test_desk_shape_contract(self):
        frame = desk_preset()["frame"]
        vol = make_grid(np.zeros(tuple(int(v) for v in frame.frame_mm),
                                 dtype=np.float32))
        out = finalize_input(vol, frame)
        assert out.shape == tuple(frame.input_shape)
        assert out.dtype == np.float32

    def test_constant_rescaled(self):
        vol = make_grid(np.full((24, 20, 16), 500.0, dtype=np.float32))
        out = finalize_input(vol, FRAME_SMALL)
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_intensity_rescale_extremes(self):
        data = np.full((24, 20, 16), -1000.0, dtype=np.float32)
        data[:12] = 1000.0
        out = finalize_input(make_grid(data), FRAME_SMALL)
        assert out.max() == pytest.approx(1.0)
        assert out.min() == pytest.approx(-1.0)

    def test_bright_voxel_stays_centered(self):
        data = np.full((24, 20, 16), -1000.0, dtype=np.float32)
        data[12, 10, 8] = 1000.0  # frame center
        out = finalize_input(make_grid(data), FRAME_SMALL)
        peak = np.unravel_index(np.argmax(out), out.shape)
        center = tuple(s // 2 for s in out.shape)
        assert all(abs(p - c) <= 1 for p, c in zip(peak, center))

    def test_mask_path_binary_no_rescale(self):
        mask = np.zeros((24, 20, 16), dtype=np.float32)
        mask[8:16, 6:14, 4:12] = 1.0
        out = finalize_input(make_grid(mask), FRAME_SMALL, mask=True)
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert out.any()

    def test_unframed_volume_rejected(self):
        vol = make_grid(np.zeros((10, 10, 10), dtype=np.float32))
        with pytest.raises(IngestionError):
            finalize_input(vol, FRAME_SMALL)


class TestPipelineProperties:
    def test_fuzzed_shapes_always_reach_input_shape(self):
        rng = np.random.default_rng(8)
        frame = FRAME_SMALL
        for _ in range(25):
            dims = tuple(int(rng.integers(3, 30)) for _ in range(3))
            spacing = tuple(float(rng.uniform(0.5, 3.0)) for _ in range(3))
            vol = make_grid(
                rng.uniform(-1200, 1200, dims).astype(np.float32), spacing)
            vol = clip_hu(vol)
            try:
                center = body_center(vol)
            except CenteringError:
                center = ((dims[0] - 1) / 2, (dims[1] - 1) / 2)
            framed = resample_and_frame(vol, center, frame)
            out = finalize_input(framed, frame)
            assert out.shape == tuple(frame.input_shape)
            assert np.all(np.isfinite(out))
            assert out.min() >= -1.0 - 1e-6 and out.max() <= 1.0 + 1e-6

    def test_eval_path_bit_deterministic(self):
        rng = np.random.default_rng(9)
        data = rng.uniform(-1500, 1500, (18, 14, 11)).astype(np.float32)
        runs = []
        for _ in range(2):
            vol = clip_hu(make_grid(data.copy(), spacing=(1.1, 0.9, 1.4)))
            try:
                center = body_center(vol)
            except CenteringError:
                center = (8.5, 6.5)
            framed = resample_and_frame(vol, center, FRAME_SMALL)
            runs.append(finalize_input(framed, FRAME_SMALL).tobytes())
        assert runs[0] == runs[1]
