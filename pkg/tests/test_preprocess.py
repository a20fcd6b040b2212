import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meniseg.preprocess import (
    CropBox,
    Image2D,
    Slice2D,
    compute_crop_box,
    crop,
    extract_slices,
    prepare_backbone_input,
    restore_slice_mask,
    stack_slices,
    window_rescale,
)
from meniseg.volume import BinaryMask, Volume


def volume_of(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing)


def mask_of(data, spacing=(1.0, 1.0, 1.0)):
    return BinaryMask(np.asarray(data, dtype=np.uint8), spacing)


class TestWindowRescale:
    def test_midpoint(self):
        v = volume_of(np.full((2, 2, 2), 0.0025))
        out = window_rescale(v, 0.0, 0.005)
        assert out.data == pytest.approx(0.5)

    def test_clipping(self):
        v = volume_of([[[0.01, -0.001]]])
        out = window_rescale(v, 0.0, 0.005)
        assert out.data[0, 0, 0] == 1.0
        assert out.data[0, 0, 1] == 0.0

    def test_idempotent_on_unit_window(self, rng):
        v = volume_of(rng.random((4, 4, 4)))
        once = window_rescale(v, 0.0, 1.0)
        twice = window_rescale(once, 0.0, 1.0)
        np.testing.assert_array_equal(once.data, twice.data)

    def test_rejects_bad_window(self, rng):
        with pytest.raises(ValueError, match="lo < hi"):
            window_rescale(volume_of(rng.random((2, 2, 2))), 1.0, 1.0)

    @given(
        data=arrays(
            np.float32,
            st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
            elements=st.floats(-1, 1, width=32),
        )
    )
    def test_monotone_into_unit_interval(self, data):
        out = window_rescale(volume_of(data), -0.5, 0.5).data
        assert out.min() >= 0.0 and out.max() <= 1.0
        flat_in = data.ravel()
        flat_out = out.ravel()
        order = np.argsort(flat_in, kind="stable")
        assert (np.diff(flat_out[order]) >= 0).all()


class TestCropBox:
    def test_margin_arithmetic(self):
        data = np.zeros((384, 8, 8))
        data[100:151, 2:5, 2:5] = 1
        box = compute_crop_box([mask_of(data)], margin_voxels=20)
        assert box.start[0] == 80
        assert box.stop[0] == 171

    def test_clamps_at_zero(self):
        data = np.zeros((32, 8, 8))
        data[0:4, 2:5, 2:5] = 1
        box = compute_crop_box([mask_of(data)], margin_voxels=20)
        assert box.start[0] == 0
        assert box.stop[0] == 24

    def test_oai_configuration_target(self):
        # union bbox chosen so the 20-voxel margin rule lands on 200 x 256 x 160
        data = np.zeros((384, 384, 160), dtype=np.uint8)
        data[100, 60, 0] = 1
        data[259, 275, 159] = 1
        box = compute_crop_box([mask_of(data)], margin_voxels=20)
        assert box.extents == (200, 256, 160)
        assert box.start == (80, 40, 0)

    def test_union_over_masks(self):
        a = np.zeros((16, 16, 16))
        b = np.zeros((16, 16, 16))
        a[2, 2, 2] = 1
        b[12, 12, 12] = 1
        box = compute_crop_box([mask_of(a), mask_of(b)], margin_voxels=1)
        assert box.start == (1, 1, 1)
        assert box.stop == (14, 14, 14)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least one"):
            compute_crop_box([], 20)
        with pytest.raises(ValueError, match="background"):
            compute_crop_box([mask_of(np.zeros((8, 8, 8)))], 20)

    @given(
        data=arrays(
            np.uint8,
            st.tuples(st.integers(3, 10), st.integers(3, 10), st.integers(3, 10)),
            elements=st.integers(0, 1),
        ),
        margin=st.integers(0, 5),
    )
    def test_box_contains_all_foreground(self, data, margin):
        if not data.any():
            return
        box = compute_crop_box([mask_of(data)], margin)
        for axis in range(3):
            coords = np.argwhere(data)[:, axis]
            assert box.start[axis] <= coords.min()
            assert box.stop[axis] > coords.max()

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            CropBox((0, 0, 0), (0, 4, 4))


class TestCrop:
    def test_identity(self, rng):
        v = volume_of(rng.random((6, 7, 8)))
        box = CropBox((0, 0, 0), (6, 7, 8))
        np.testing.assert_array_equal(crop(v, box).data, v.data)

    def test_extents_and_values(self, rng):
        v = volume_of(rng.random((384, 384, 160)))
        box = CropBox((80, 40, 0), (280, 296, 160))
        out = crop(v, box)
        assert out.shape == (200, 256, 160)
        np.testing.assert_array_equal(out.data, v.data[80:280, 40:296, :])
        assert out.spacing == v.spacing

    def test_out_of_bounds(self, rng):
        v = volume_of(rng.random((6, 6, 6)))
        with pytest.raises(ValueError, match="exceeds"):
            crop(v, CropBox((0, 0, 0), (7, 6, 6)))

    def test_preserves_mask_type(self, rng):
        m = mask_of((rng.random((6, 6, 6)) > 0.5).astype(np.uint8))
        out = crop(m, CropBox((1, 1, 1), (5, 5, 5)))
        assert isinstance(out, BinaryMask)


class TestSlices:
    def test_sagittal_extraction_counts(self, rng):
        v = volume_of(rng.random((200, 256, 160)).astype(np.float32))
        slices = extract_slices(v)
        assert len(slices) == 160
        assert slices[0].data.shape == (200, 256)
        assert slices[37].index == 37
        np.testing.assert_array_equal(slices[37].data, v.data[:, :, 37])

    def test_slice_count_bookkeeping_matches_protocol(self, rng):
        # 160 slices per volume: split sizes (120, 28, 28) give
        # (19200, 4480, 4480) training/validation/test slices.
        v = volume_of(rng.random((4, 4, 160)))
        per_volume = len(extract_slices(v))
        assert per_volume == 160
        counts = tuple(n * per_volume for n in (120, 28, 28))
        assert counts == (19200, 4480, 4480)

    def test_invalid_axis(self, rng):
        with pytest.raises(ValueError, match="axis"):
            extract_slices(volume_of(rng.random((4, 4, 4))), axis=3)

    def test_roundtrip_exact(self, rng):
        m = mask_of((rng.random((9, 7, 5)) > 0.5).astype(np.uint8))
        rebuilt = stack_slices(extract_slices(m), like=m)
        np.testing.assert_array_equal(rebuilt.data, m.data)
        assert rebuilt.spacing == m.spacing

    @given(
        data=arrays(
            np.uint8,
            st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
            elements=st.integers(0, 1),
        ),
        axis=st.integers(0, 2),
    )
    def test_roundtrip_any_axis(self, data, axis):
        m = mask_of(data)
        rebuilt = stack_slices(extract_slices(m, axis=axis), like=m, axis=axis)
        np.testing.assert_array_equal(rebuilt.data, m.data)

    def test_stack_count_mismatch(self, rng):
        m = mask_of((rng.random((4, 4, 4)) > 0.5).astype(np.uint8))
        slices = extract_slices(m)[:-1]
        with pytest.raises(ValueError, match="3 slices"):
            stack_slices(slices, like=m)

    def test_stack_order_matters(self, rng):
        m = mask_of((rng.random((4, 4, 4)) > 0.5).astype(np.uint8))
        slices = extract_slices(m)
        reordered = [slices[i] for i in (1, 0, 2, 3)]
        rebuilt = stack_slices(reordered, like=m)
        if not np.array_equal(m.data[:, :, 0], m.data[:, :, 1]):
            assert not np.array_equal(rebuilt.data, m.data)


class TestBackbonePrep:
    def test_oai_slice_geometry(self, rng):
        s = Slice2D(rng.random((200, 256)).astype(np.float32), (0.365, 0.456), 0)
        img = prepare_backbone_input(s, target=1024)
        assert img.data.shape == (1024, 1024, 3)
        assert img.scale == 4.0
        assert img.scaled_shape == (800, 1024)
        assert img.padding == (224, 0)
        # padded rows at the high-index end are zero
        assert not img.data[800:].any()
        # channels replicated
        np.testing.assert_array_equal(img.data[..., 0], img.data[..., 2])

    def test_all_zero_slice(self):
        s = Slice2D(np.zeros((20, 26), dtype=np.float32), (1.0, 1.0), 3)
        img = prepare_backbone_input(s, target=128)
        assert img.data.shape == (128, 128, 3)
        assert not img.data.any()
        assert img.index == 3

    def test_square_slice_has_no_padding(self, rng):
        s = Slice2D(rng.random((256, 256)).astype(np.float32), (1.0, 1.0), 0)
        img = prepare_backbone_input(s, target=1024)
        assert img.padding == (0, 0)

    def test_degenerate_slice(self):
        with pytest.raises(ValueError):
            prepare_backbone_input(Slice2D(np.zeros((0, 4), dtype=np.float32), (1, 1), 0))

    def test_restore_constant_fields(self, rng):
        s = Slice2D(rng.random((30, 40)).astype(np.float32), (1.0, 1.0), 0)
        meta = prepare_backbone_input(s, target=256)
        ones = restore_slice_mask(np.ones((256, 256), dtype=np.float32), meta)
        zeros = restore_slice_mask(np.zeros((256, 256), dtype=np.float32), meta)
        assert (ones == 1).all() and ones.shape == (30, 40)
        assert not zeros.any()

    def test_restore_shape_mismatch(self, rng):
        s = Slice2D(rng.random((30, 40)).astype(np.float32), (1.0, 1.0), 0)
        meta = prepare_backbone_input(s, target=256)
        with pytest.raises(ValueError, match="backbone size"):
            restore_slice_mask(np.ones((128, 128)), meta)

    def test_prepare_restore_roundtrip_on_random_8x10(self, rng):
        # binary slices with no sub-voxel structure recover exactly
        for _ in range(200):
            data = (rng.random((8, 10)) > rng.uniform(0.2, 0.8)).astype(np.float32)
            s = Slice2D(data, (1.0, 1.0), 0)
            meta = prepare_backbone_input(s, target=1024)
            binary = (meta.data[..., 0] >= 0.5).astype(np.float32)
            restored = restore_slice_mask(binary, meta)
            np.testing.assert_array_equal(restored, data.astype(np.uint8))

    @given(
        data=arrays(
            np.uint8,
            st.tuples(st.integers(4, 32), st.integers(4, 32)),
            elements=st.integers(0, 1),
        ),
        target=st.sampled_from([128, 256]),
    )
    @settings(max_examples=60)
    def test_prepare_restore_identity_property(self, data, target):
        s = Slice2D(data.astype(np.float32), (1.0, 1.0), 0)
        meta = prepare_backbone_input(s, target=target)
        binary = (meta.data[..., 0] >= 0.5).astype(np.float32)
        restored = restore_slice_mask(binary, meta)
        np.testing.assert_array_equal(restored, data)

    def test_image2d_invariants(self):
        with pytest.raises(ValueError, match="square"):
            Image2D(np.zeros((4, 5, 3), dtype=np.float32), 1.0, (0, 0), (4, 5))
        with pytest.raises(ValueError, match="padding"):
            Image2D(np.zeros((4, 4, 3), dtype=np.float32), 1.0, (-1, 0), (4, 4))
