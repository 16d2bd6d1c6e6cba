import numpy as np
import pytest

from models.backbone import (
    NUM_CLASSES,
    STRIDES,
    FeaturePyramid,
    RoiBox,
    crop_roi,
    init_unet,
    locate_stomach,
    normalize_volume,
    pad_to_multiple,
    paste_roi,
    roi_from_mask,
    segment_volume,
    stomach_box,
    unet_forward,
    unet_widths,
)
from models.params import ModelParams
from models.presets import get_preset
from phantoms.phantom import VolumeSample
from tensor.core import Tensor
from training.cases import predict_case, prepare, segment_case
from utils.errors import ShapeError


@pytest.fixture
def unet(rng):
    return init_unet(ModelParams(), rng, prefix="backbone", base_width=2)


def _cube_sample(extents=(16, 16, 16), low=4, high=9):
    labels = np.zeros(extents, dtype=np.uint8)
    labels[low:high, low:high, low:high] = 1
    image = np.arange(np.prod(extents), dtype=np.float32).reshape((1,) + tuple(extents))
    return VolumeSample(image=image, labels=labels, label=0, id="cube")


class TestRoi:
    def test_box_of_stomach_cube_with_margin(self):
        box, fallback = stomach_box(_cube_sample().labels, margin=(2, 2, 1))
        assert not fallback
        assert box.low == (2, 2, 3)
        assert box.high == (11, 11, 10)

    def test_full_mask_margin_zero_is_identity_crop(self):
        sample = _cube_sample(low=0, high=16)
        box, _ = stomach_box(sample.labels, margin=(0, 0, 0))
        cropped = crop_roi(sample, box)
        np.testing.assert_array_equal(cropped.image, sample.image)

    def test_margin_is_clamped_to_volume(self):
        mask = np.zeros((16, 16, 16), dtype=bool)
        mask[0:3, 14:16, 5] = True
        box = roi_from_mask(mask, (4, 4, 4))
        assert box.low == (0, 10, 1)
        assert box.high == (7, 16, 10)

    def test_empty_mask_falls_back_to_full_volume(self):
        box, fallback = stomach_box(np.zeros((16, 16, 16), dtype=np.uint8), (1, 2, 2))
        assert fallback
        assert box.low == (0, 0, 0) and box.high == (16, 16, 16)

    def test_crop_paste_round_trip(self):
        sample = _cube_sample()
        box, _ = stomach_box(sample.labels, (2, 2, 1))
        cropped = crop_roi(sample, box)
        assert cropped.meta["roi_offset"] == [2, 2, 3]
        restored = paste_roi(cropped.image, box, sample.extents)
        np.testing.assert_array_equal(restored[(slice(None),) + box.slices], sample.image[(slice(None),) + box.slices])
        assert restored.sum() == cropped.image.sum()

    @pytest.mark.parametrize("preset", ["cimt", "unet-s4c"])
    def test_crop_predict_paste_matches_prediction_on_crop(self, tiny_dims, rng, preset):
        model = get_preset(preset, tiny_dims)
        params = model.init_params(np.random.default_rng(3))
        sample = _cube_sample()
        sample.image = rng.normal(size=sample.image.shape).astype(np.float32)
        box, _ = stomach_box(sample.labels, (2, 2, 1))
        assert box.extents == (9, 9, 7)

        full, prob = segment_case(model, params, sample, box)
        on_crop, crop_prob = predict_case(model, params, prepare(crop_roi(sample, box)))

        assert full.shape == sample.extents
        np.testing.assert_array_equal(full[box.slices], on_crop)
        outside = np.ones(sample.extents, dtype=bool)
        outside[box.slices] = False
        assert not full[outside].any()
        assert prob == crop_prob

    def test_segment_case_without_box_covers_full_volume(self, tiny_dims, rng):
        model = get_preset("unet-s4c", tiny_dims)
        params = model.init_params(np.random.default_rng(3))
        sample = _cube_sample()
        sample.image = rng.normal(size=sample.image.shape).astype(np.float32)
        full, prob = segment_case(model, params, sample)
        expected, _ = predict_case(model, params, prepare(sample))
        np.testing.assert_array_equal(full, expected)
        assert prob is None

    def test_crop_outside_volume_rejected(self):
        with pytest.raises(ShapeError):
            crop_roi(_cube_sample(), RoiBox(low=(0, 0, 0), high=(17, 16, 16)))

    def test_empty_box_rejected(self):
        with pytest.raises(ShapeError):
            RoiBox(low=(3, 0, 0), high=(3, 4, 4))

    def test_contains_fraction(self):
        mask = np.zeros((8, 8, 8), dtype=bool)
        mask[0:4] = True
        box = RoiBox(low=(0, 0, 0), high=(2, 8, 8))
        assert box.contains_fraction(mask) == pytest.approx(0.5)


class TestNormalize:
    def test_two_values_map_to_plus_minus_one(self):
        out = normalize_volume(np.array([0.0, 2.0], dtype=np.float32))
        np.testing.assert_allclose(out, [-1.0, 1.0])

    def test_constant_volume_is_zero(self):
        out = normalize_volume(np.full((1, 4, 4, 4), 3.0, dtype=np.float32))
        assert not out.any()

    def test_moments(self, rng):
        out = normalize_volume(Tensor(rng.normal(5.0, 3.0, size=(1, 8, 8, 8))))
        assert isinstance(out, Tensor)
        assert abs(float(out.data.mean())) < 1e-5
        assert abs(float(out.data.var()) - 1.0) < 1e-4


class TestPadding:
    def test_pads_high_end_to_multiple(self):
        image = np.ones((1, 17, 16, 20), dtype=np.float32)
        labels = np.ones((17, 16, 20), dtype=np.uint8)
        padded, padded_labels, extents = pad_to_multiple(image, labels, 8)
        assert padded.shape == (1, 24, 16, 24)
        assert padded_labels.shape == (24, 16, 24)
        assert extents == (17, 16, 20)
        assert padded[0, 17:].sum() == 0

    def test_aligned_input_untouched(self):
        image = np.ones((1, 8, 8, 8), dtype=np.float32)
        padded, labels, _ = pad_to_multiple(image)
        assert padded is image and labels is None


class TestUnet:
    def test_output_shapes(self, unet, rng):
        x = Tensor(rng.normal(size=(1, 16, 16, 16)))
        pyramid, logits = unet_forward(x, unet)
        assert logits.shape == (NUM_CLASSES, 16, 16, 16)
        assert pyramid.strides == STRIDES
        widths = unet_widths(unet)
        assert widths == [2, 4, 8, 16]
        assert pyramid.coarsest.shape == (16, 2, 2, 2)
        assert pyramid.finest.shape == (2, 16, 16, 16)
        assert [lvl.shape[1] for lvl in pyramid.levels] == [16 // s for s in STRIDES]

    def test_zero_params_zero_input_give_zero_logits(self, unet):
        zeros = ModelParams({n: Tensor(np.zeros(t.shape), requires_grad=True) for n, t in unet.items()})
        pyramid, logits = unet_forward(Tensor(np.zeros((1, 8, 8, 8))), zeros)
        assert not logits.data.any()
        assert all(not level.data.any() for level in pyramid.levels)

    def test_indivisible_extents_ask_for_padding(self, unet):
        with pytest.raises(ShapeError, match="pad_to_multiple"):
            unet_forward(Tensor(np.zeros((1, 12, 16, 16))), unet)

    def test_independent_inputs(self, unet, rng):
        a, b = rng.normal(size=(2, 1, 8, 8, 8))
        _, la = unet_forward(Tensor(a), unet)
        _, lb = unet_forward(Tensor(b), unet)
        _, la_again = unet_forward(Tensor(a), unet)
        np.testing.assert_array_equal(la.data, la_again.data)
        assert not np.array_equal(la.data, lb.data)

    def test_coarsest_level_follows_stride_aligned_shift(self, float64, rng):
        params = init_unet(ModelParams(), np.random.default_rng(8), base_width=4)
        volume = np.zeros((1, 8, 8, 128))
        volume[..., :120] = rng.normal(size=(1, 8, 8, 120))
        # zero tail, so rolling by 8 is a shift with constant padding
        shifted = np.roll(volume, 8, axis=-1)
        base, _ = unet_forward(Tensor(volume), params)
        moved, _ = unet_forward(Tensor(shifted), params)
        assert base.coarsest.shape == (32, 1, 1, 16)
        # coarse columns 5..9 see input 10..109 only, clear of zero padding in both volumes
        np.testing.assert_allclose(moved.coarsest.data[..., 6:11], base.coarsest.data[..., 5:10],
                                   rtol=1e-7, atol=1e-9)

    def test_segment_volume_handles_unaligned_extents(self, unet, rng):
        labels = segment_volume(rng.normal(size=(1, 10, 9, 16)).astype(np.float32), unet)
        assert labels.shape == (10, 9, 16)
        assert labels.dtype == np.uint8

    def test_pyramid_strides_must_decrease(self):
        with pytest.raises(ShapeError):
            FeaturePyramid(levels=[Tensor(np.zeros(1))] * 2, strides=(2, 4))


class TestLocateStomach:
    def test_oracle_mode_returns_ground_truth_box(self):
        sample = _cube_sample()
        box, fallback = locate_stomach(sample.image, None, (2, 2, 1), oracle_labels=sample.labels)
        assert (box.low, box.high, fallback) == ((2, 2, 3), (11, 11, 10), False)

    def test_localizer_predicting_nothing_falls_back(self, rng):
        params = init_unet(ModelParams(), rng, prefix="localizer", base_width=2)
        # background bias dominates every voxel
        params["localizer.head.conv.b"].data[...] = [100.0, -100.0, -100.0]
        box, fallback = locate_stomach(rng.normal(size=(1, 16, 16, 16)).astype(np.float32), params, (1, 2, 2))
        assert fallback
        assert box.extents == (16, 16, 16)
