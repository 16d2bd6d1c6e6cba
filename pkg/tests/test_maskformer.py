import numpy as np
import pytest

from models.backbone import unet_forward
from models.maskformer import (
    _feed_forward,
    _self_attention,
    ClusterAssignment,
    assign,
    cimt_forward,
    cluster_classes,
    cross_attention_logits,
    decoder_stage,
    decoder_stages,
    init_cimt,
    init_decoder,
    permute_clusters,
    run_decoder,
    segment,
)
from models.params import ModelDims, ModelParams
from tensor import ops
from tensor.core import Tensor, backward, no_grad
from utils.errors import ConfigError


@pytest.fixture
def cimt(tiny_dims):
    return init_cimt(np.random.default_rng(5), tiny_dims)


@pytest.fixture
def volume():
    return Tensor(np.random.default_rng(6).normal(size=(1, 8, 8, 8)))


class TestInit:
    def test_one_stage_per_pyramid_level(self, cimt):
        assert decoder_stages(cimt) == 4
        assert cimt["decoder.queries"].shape == (3, 4)
        assert cimt["head.cls.fc1.w"].shape == (4 + 3, 4)
        assert cimt["head.ck.fc2.w"].shape == (4, 3)

    def test_single_query_rejected(self):
        with pytest.raises(ConfigError):
            init_decoder(ModelParams(), np.random.default_rng(0), ModelDims(n_queries=1), [8])

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            init_decoder(ModelParams(), np.random.default_rng(0), ModelDims(channels=6, heads=4), [8])

    def test_level_count_must_match_stages(self, tiny_dims, volume):
        params = init_cimt(np.random.default_rng(5), tiny_dims, stages=3)
        pyramid, _ = unet_forward(volume, params)
        with pytest.raises(ConfigError):
            run_decoder(pyramid, params, tiny_dims)


class TestCrossAttention:
    def test_all_voxels_on_cluster_zero_sum_into_row_zero(self):
        logits = np.full((3, 5), -1.0)
        logits[0] = 1.0
        values = Tensor(np.arange(10.0).reshape(5, 2))
        update = ops.hard_assign(Tensor(logits)) @ values
        np.testing.assert_array_equal(update.data[0], values.data.sum(axis=0))
        assert not update.data[1:].any()

    def test_zero_value_projection_passes_centers_through(self, cimt, tiny_dims, volume):
        pyramid, _ = unet_forward(volume, cimt)
        cimt["decoder.stage0.xattn.v.w"].data[...] = 0.0
        cimt["decoder.stage0.xattn.v.b"].data[...] = 0.0
        centers = cimt["decoder.queries"]
        with no_grad():
            updated, _ = decoder_stage(centers, pyramid.levels[0], cimt, 0, tiny_dims)
            expected = _feed_forward(_self_attention(centers, cimt, "decoder.stage0", tiny_dims.heads),
                                     cimt, "decoder.stage0")
        np.testing.assert_allclose(updated.data, expected.data, rtol=1e-6)

    def test_logits_shape_and_scaling(self, cimt, volume):
        pyramid, _ = unet_forward(volume, cimt)
        centers = cimt["decoder.queries"]
        scaled, values = cross_attention_logits(centers, pyramid.levels[1], cimt, 1, scale=True)
        raw, _ = cross_attention_logits(centers, pyramid.levels[1], cimt, 1, scale=False)
        assert scaled.shape == (3, 8)
        assert values.shape == (8, 4)
        np.testing.assert_allclose(scaled.data, raw.data / 2.0, rtol=1e-6)

    def test_single_center_rejected(self, cimt, tiny_dims, volume):
        pyramid, _ = unet_forward(volume, cimt)
        with pytest.raises(ConfigError):
            decoder_stage(cimt["decoder.queries"][0:1], pyramid.levels[0], cimt, 0, tiny_dims)


class TestForward:
    def test_prediction_contract(self, cimt, tiny_dims, volume):
        pred, state, assignment = cimt_forward(volume, cimt, tiny_dims)
        assert pred.seg_logits.shape == (3, 512)
        assert pred.seg_volume().shape == (3, 8, 8, 8)
        assert pred.cls_logits.shape == (2,)
        assert pred.cluster_path.shape == (4,)
        assert state.centers.shape == (3, 4)
        assert [r.shape for r in state.per_stage_logits] == [(3, 1), (3, 8), (3, 64), (3, 512)]
        assert state.stage_extents[-1] == (8, 8, 8)

    def test_assignment_columns_sum_to_one(self, cimt, tiny_dims, volume):
        _, _, assignment = cimt_forward(volume, cimt, tiny_dims)
        np.testing.assert_allclose(assignment.probs.data.sum(axis=0), 1.0, atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(100))
    def test_assignment_columns_sum_to_one_over_seeds(self, tiny_dims, seed):
        params = init_cimt(np.random.default_rng(seed), tiny_dims)
        x = Tensor(np.random.default_rng(10_000 + seed).normal(size=(1, 8, 8, 8)))
        with no_grad():
            _, state, assignment = cimt_forward(x, params, tiny_dims)
            for logits in state.per_stage_logits:
                np.testing.assert_allclose(ops.softmax_axis(logits, axis=0).data.sum(axis=0), 1.0, atol=1e-6)
                np.testing.assert_array_equal(ops.hard_assign(logits, axis=0).data.sum(axis=0), 1.0)
        np.testing.assert_allclose(assignment.probs.data.sum(axis=0), 1.0, atol=1e-6)

    def test_per_voxel_logit_shift_changes_nothing(self, float64, tiny_dims):
        params = init_cimt(np.random.default_rng(13), tiny_dims)
        x = Tensor(np.random.default_rng(14).normal(size=(1, 8, 8, 8)))
        with no_grad():
            pred, state, assignment = cimt_forward(x, params, tiny_dims)
            ck = cluster_classes(state.centers, params)
            offsets = np.random.default_rng(15).normal(scale=20.0, size=(1, assignment.logits.shape[1]))
            logits = Tensor(assignment.logits.data + offsets)
            shifted = ClusterAssignment(logits=logits, probs=ops.softmax_axis(logits, axis=0))
            seg = segment(shifted, state.centers, params, ck=ck)
        np.testing.assert_allclose(shifted.probs.data, assignment.probs.data, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(seg.data, pred.seg_logits.data, rtol=1e-9, atol=1e-12)
        np.testing.assert_array_equal(seg.data.argmax(axis=0), pred.seg_logits.data.argmax(axis=0))
        np.testing.assert_array_equal(ops.hard_assign(logits, axis=0).data,
                                      ops.hard_assign(assignment.logits, axis=0).data)

    def test_pixel_path_is_exact_max(self, cimt, tiny_dims, volume):
        pred, _, assignment = cimt_forward(volume, cimt, tiny_dims)
        np.testing.assert_array_equal(pred.pixel_path.data, assignment.logits.data.max(axis=1))

    def test_segmentation_is_class_mixture_of_clusters(self, cimt, tiny_dims, volume):
        pred, state, assignment = cimt_forward(volume, cimt, tiny_dims)
        ck = cluster_classes(state.centers, cimt).data
        np.testing.assert_allclose(pred.seg_logits.data, ck.T @ assignment.probs.data, rtol=1e-5, atol=1e-6)

    def test_cluster_permutation_invariance(self, float64, tiny_dims):
        params = init_cimt(np.random.default_rng(11), tiny_dims)
        x = Tensor(np.random.default_rng(12).normal(size=(1, 8, 8, 8)))
        with no_grad():
            base, _, _ = cimt_forward(x, params, tiny_dims)
            permuted, _, _ = cimt_forward(x, permute_clusters(params, [2, 0, 1]), tiny_dims)
        np.testing.assert_allclose(permuted.seg_logits.data, base.seg_logits.data, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(permuted.cls_logits.data, base.cls_logits.data, rtol=1e-5, atol=1e-8)

    def test_permute_rejects_non_permutation(self, cimt):
        with pytest.raises(ValueError):
            permute_clusters(cimt, [0, 0, 1])

    def test_assign_shape_check(self):
        from utils.errors import ShapeError

        with pytest.raises(ShapeError):
            assign(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 10))))

    def test_backbone_receives_gradient(self, cimt, tiny_dims, volume):
        pred, _, _ = cimt_forward(volume, cimt, tiny_dims)
        backward(ops.sum(pred.seg_logits) + ops.sum(pred.cls_logits))
        assert cimt["backbone.enc0.conv1.w"].grad is not None
        assert np.abs(cimt["backbone.enc0.conv1.w"].grad).sum() > 0
        assert cimt["decoder.stage3.xattn.v.w"].grad is not None
