import numpy as np
import pytest

from models.params import ModelParams
from training.radam import RAdam, radam_update, rectification, rho_inf


def _store(**arrays):
    params = ModelParams()
    for name, data in arrays.items():
        params.add(name.replace("_", "."), np.asarray(data, dtype=np.float64))
    return params


class TestRectification:
    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_early_steps_are_momentum_only(self, t):
        assert rectification(t, 0.999) is None

    def test_rectified_later(self):
        r = rectification(10, 0.999)
        assert r is not None and 0.0 < r < 1.0

    def test_tends_to_one(self):
        assert rectification(10 ** 6, 0.999) == pytest.approx(1.0, abs=1e-3)

    def test_rho_inf(self):
        assert rho_inf(0.999) == pytest.approx(1999.0)


class TestUpdate:
    def test_first_step_is_bias_corrected_momentum(self):
        param, m, v = np.zeros(2), np.zeros(2), np.zeros(2)
        radam_update(param, np.array([2.0, -1.0]), m, v, t=1, lr=0.1)
        np.testing.assert_allclose(param, [-0.2, 0.1])
        np.testing.assert_allclose(m, [0.2, -0.1])
        np.testing.assert_allclose(v, [0.004, 0.001])

    def test_rectified_step_is_normalized(self):
        param = np.zeros(1)
        m, v = np.zeros(1), np.zeros(1)
        for t in range(1, 11):
            radam_update(param, np.array([5.0]), m, v, t=t, lr=0.01)
        # constant gradient: m_hat / sqrt(v_hat) is 1
        before = param.copy()
        radam_update(param, np.array([5.0]), m, v, t=11, lr=0.01)
        assert before[0] - param[0] == pytest.approx(0.01 * rectification(11, 0.999), rel=1e-4)


class TestOptimizer:
    def test_longest_prefix_multiplier(self):
        opt = RAdam(ModelParams(), lr=1.0, multipliers={"backbone.": 0.1, "backbone.enc0.": 0.5})
        assert opt.lr_for("backbone.enc0.conv1.w") == 0.5
        assert opt.lr_for("backbone.dec1.conv1.w") == pytest.approx(0.1)
        assert opt.lr_for("decoder.queries") == 1.0

    def test_group_multiplier_scales_updates_exactly(self, float64):
        params = _store(backbone_w=[1.0, -2.0], head_w=[1.0, -2.0])
        opt = RAdam(params, lr=1e-2, multipliers={"backbone.": 0.1})
        grads = [np.array([0.3, -1.2]), np.array([0.5, 0.4]), np.array([-0.2, 0.9])] * 3
        for g in grads:
            before = {n: params[n].data.copy() for n in ("backbone.w", "head.w")}
            params["backbone.w"].grad = g.copy()
            params["head.w"].grad = g.copy()
            opt.step()
            head_step = params["head.w"].data - before["head.w"]
            backbone_step = params["backbone.w"].data - before["backbone.w"]
            np.testing.assert_allclose(head_step, 10.0 * backbone_step, rtol=1e-9)

    def test_only_tensors_with_gradients_move(self, float64):
        params = _store(a_w=[1.0, 1.0], b_w=[1.0])
        params["a.w"].grad = np.array([1.0, -1.0])
        opt = RAdam(params, lr=0.1)
        assert opt.step()
        np.testing.assert_allclose(params["a.w"].data, [0.9, 1.1])
        np.testing.assert_array_equal(params["b.w"].data, [1.0])
        assert opt.state_meta()["t"] == {"a.w": 1}

    def test_frozen_tensors_are_skipped(self, float64):
        params = _store(a_w=[1.0])
        params["a.w"].grad = np.array([1.0])
        params.freeze("a.")
        RAdam(params, lr=0.1).step()
        assert params["a.w"].data[0] == 1.0

    def test_non_finite_gradient_skips_whole_step(self, float64):
        params = _store(a_w=[1.0], b_w=[1.0])
        params["a.w"].grad = np.array([1.0])
        params["b.w"].grad = np.array([np.nan])
        opt = RAdam(params, lr=0.1)
        assert opt.step() is False
        assert params["a.w"].data[0] == 1.0
        assert opt.state.skipped == 1
        assert opt.state_meta()["t"] == {}

    def test_state_round_trip_continues_identically(self, float64):
        grads = [np.array([0.5, -2.0]), np.array([1.0, 0.3]), np.array([-0.7, 0.1])]
        a = _store(x_w=[0.0, 0.0])
        opt_a = RAdam(a, lr=0.05)
        for g in grads[:2]:
            a["x.w"].grad = g
            opt_a.step()

        b = a.copy()
        opt_b = RAdam(b, lr=0.05)
        opt_b.load_state({k: v.copy() for k, v in opt_a.state_arrays().items()}, opt_a.state_meta())

        a["x.w"].grad = grads[2]
        b["x.w"].grad = grads[2]
        opt_a.step()
        opt_b.step()
        np.testing.assert_array_equal(a["x.w"].data, b["x.w"].data)
        assert opt_b.state.t["x.w"] == 3
