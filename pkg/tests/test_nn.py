import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silofl import nn
from conftest import fd_grads, random_mlp, rel_err


def identity_dense_params(d):
    return nn.ParamSet({"dense00": (np.eye(d), np.zeros(d))})


class TestForward:
    def test_identity_dense(self):
        spec = nn.NetworkSpec((nn.Dense(2, 2),))
        out = nn.forward(spec, identity_dense_params(2), np.array([[3.0, 1.0]]))
        np.testing.assert_array_equal(out, [[3.0, 1.0]])

    def test_relu_clamps_negative(self):
        spec = nn.NetworkSpec((nn.Dense(2, 1), nn.Relu()))
        params = nn.ParamSet({"dense00": (np.array([[1.0], [1.0]]), np.zeros(1))})
        out = nn.forward(spec, params, np.array([[-1.0, -2.0]]))
        np.testing.assert_array_equal(out, [[0.0]])

    def test_deterministic_recomputation(self, rng):
        spec, params, batch, _ = random_mlp(rng, max_layers=2)
        a = nn.forward(spec, params, batch)
        b = nn.forward(spec, params, batch)
        assert np.array_equal(a, b)

    def test_shape_mismatch_names_layer(self, rng):
        spec = nn.mlp((4, 3, 2))
        params = nn.init_params(spec, rng)
        with pytest.raises(nn.ShapeMismatchError) as exc:
            nn.forward(spec, params, np.ones((1, 5)))
        assert exc.value.layer_id == "dense00"

    def test_spec_rejects_incompatible_dims(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((nn.Dense(2, 3), nn.Dense(4, 2)))

    def test_spec_needs_dense(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((nn.Relu(),))


class TestLossAndGrad:
    def test_uniform_logits_loss_is_log_c(self, rng):
        spec = nn.mlp((4, 10))
        params = nn.zeros_like(nn.init_params(spec, rng))
        batch = rng.normal(size=(3, 4))
        loss, _ = nn.loss_and_grad(spec, params, batch, np.array([1, 5, 9]))
        assert loss == pytest.approx(math.log(10.0), abs=1e-12)

    def test_matches_finite_differences(self, rng):
        for _ in range(10):
            spec, params, batch, labels = random_mlp(rng)
            _, grads = nn.loss_and_grad(spec, params, batch, labels)
            ref = fd_grads(spec, params, batch, labels)
            for lid, (gw, gb) in grads.items():
                rw, rb = ref[lid]
                assert rel_err(gw, rw) < 1e-4
                if gb is not None:
                    assert rel_err(gb, rb) < 1e-4

    def test_zero_net_bias_grad_is_softmax_minus_onehot(self, rng):
        spec = nn.mlp((3, 4))
        params = nn.zeros_like(nn.init_params(spec, rng))
        _, grads = nn.loss_and_grad(spec, params, rng.normal(size=(1, 3)), np.array([2]))
        _, gb = grads["dense00"]
        onehot = np.eye(4)[2]
        np.testing.assert_allclose(gb, 0.25 - onehot, atol=1e-12)

    def test_label_out_of_range(self, rng):
        spec = nn.mlp((3, 4))
        params = nn.init_params(spec, rng)
        with pytest.raises(ValueError):
            nn.loss_and_grad(spec, params, np.ones((1, 3)), np.array([4]))

    def test_input_gradient_matches_fd(self, rng):
        spec = nn.mlp((4, 6, 3))
        params = nn.init_params(spec, rng)
        x = rng.normal(size=(1, 4))
        dlogits = np.ones((1, 3))
        _, gx = nn.backprop(spec, params, x, dlogits)
        h = 1e-5
        for j in range(4):
            xp = x.copy()
            xp[0, j] += h
            plus = nn.forward(spec, params, xp).sum()
            xp[0, j] -= 2 * h
            minus = nn.forward(spec, params, xp).sum()
            assert rel_err(gx[0, j], (plus - minus) / (2 * h)) < 1e-4


class TestOptimizers:
    def test_sgd_zero_lr(self, rng):
        spec, params, batch, labels = random_mlp(rng)
        _, grads = nn.loss_and_grad(spec, params, batch, labels)
        out = nn.sgd_step(params, grads, 0.0)
        for lid, (w, _) in out.items():
            np.testing.assert_array_equal(w, params[lid][0])

    def test_sgd_arithmetic(self):
        params = nn.ParamSet({"dense00": (np.array([[2.0]]), None)})
        grads = nn.ParamSet({"dense00": (np.array([[4.0]]), None)})
        out = nn.sgd_step(params, grads, 0.5)
        assert out["dense00"][0][0, 0] == 0.0

    def test_sgd_fixed_grad_composition(self):
        p = nn.ParamSet({"dense00": (np.array([[1.7]]), None)})
        g1 = nn.ParamSet({"dense00": (np.array([[0.3]]), None)})
        g2 = nn.ParamSet({"dense00": (np.array([[-0.9]]), None)})
        lr = 0.25
        two_steps = nn.sgd_step(nn.sgd_step(p, g1, lr), g2, lr)
        direct = 1.7 - lr * 0.3 - lr * (-0.9)
        assert two_steps["dense00"][0][0, 0] == pytest.approx(direct, rel=1e-12)

    def test_sgd_incongruent_errors(self):
        p = nn.ParamSet({"dense00": (np.ones((2, 2)), None)})
        g = nn.ParamSet({"dense00": (np.ones((3, 2)), None)})
        with pytest.raises(nn.CongruenceError):
            nn.sgd_step(p, g, 0.1)

    def test_adam_first_step_is_signed_lr(self):
        params = nn.ParamSet({"dense00": (np.array([[2.0, -3.0]]), None)})
        grads = nn.ParamSet({"dense00": (np.array([[0.5, -1.5]]), None)})
        state = nn.make_optimizer("adam", params)
        state, out = nn.adam_step(state, params, grads, lr=0.1)
        np.testing.assert_allclose(
            params["dense00"][0] - out["dense00"][0], 0.1 * np.sign(grads["dense00"][0]), atol=1e-6
        )
        assert state.step == 1

    def test_adam_zero_grad_no_move(self):
        params = nn.ParamSet({"dense00": (np.array([[2.0]]), np.array([1.0]))})
        grads = nn.zeros_like(params)
        state = nn.make_optimizer("adam", params)
        _, out = nn.adam_step(state, params, grads, lr=0.1)
        np.testing.assert_array_equal(out["dense00"][0], params["dense00"][0])
        np.testing.assert_array_equal(out["dense00"][1], params["dense00"][1])

    def test_adam_deterministic(self, rng):
        spec, params, batch, labels = random_mlp(rng)
        _, grads = nn.loss_and_grad(spec, params, batch, labels)

        def run():
            st_ = nn.make_optimizer("adam", params)
            p = params
            for _ in range(3):
                st_, p = nn.adam_step(st_, p, grads, 0.01)
            return p.flat()

        assert np.array_equal(run(), run())


class TestEma:
    def test_endpoints(self, rng):
        spec, params, _, _ = random_mlp(rng)
        other = nn.init_params(spec, np.random.default_rng(99))
        np.testing.assert_array_equal(nn.ema_update(params, other, 1.0).flat(), params.flat())
        np.testing.assert_array_equal(nn.ema_update(params, other, 0.0).flat(), other.flat())

    def test_midpoint(self):
        a = nn.ParamSet({"dense00": (np.array([[2.0]]), None)})
        b = nn.ParamSet({"dense00": (np.array([[4.0]]), None)})
        assert nn.ema_update(a, b, 0.5)["dense00"][0][0, 0] == 3.0

    @pytest.mark.parametrize("zeta", [-0.1, 1.1])
    def test_rejects_bad_momentum(self, zeta):
        a = nn.ParamSet({"dense00": (np.ones((1, 1)), None)})
        with pytest.raises(ValueError):
            nn.ema_update(a, a, zeta)

    @given(
        zeta=st.floats(0.0, 1.0),
        x=st.floats(-1e6, 1e6),
        y=st.floats(-1e6, 1e6),
    )
    @settings(max_examples=200, deadline=None)
    def test_betweenness(self, zeta, x, y):
        a = nn.ParamSet({"dense00": (np.array([[x]]), None)})
        b = nn.ParamSet({"dense00": (np.array([[y]]), None)})
        out = nn.ema_update(a, b, zeta)["dense00"][0][0, 0]
        assert min(x, y) - 1e-9 <= out <= max(x, y) + 1e-9


class TestCosineLr:
    def test_cycle_start_is_max(self):
        assert nn.cosine_lr(1, 30, 3, 3e-4, 1e-5) == 3e-4

    def test_midcycle_is_mean(self):
        # total 10, 1 cycle: p = 0.5 at t = 6
        assert nn.cosine_lr(6, 10, 1, 1.0, 0.2) == pytest.approx(0.6, abs=1e-12)

    def test_restart_rounds(self):
        vals = [nn.cosine_lr(t, 30, 3, 1.0, 0.0) for t in range(1, 31)]
        restarts = [t for t, v in zip(range(1, 31), vals) if v == 1.0]
        assert restarts == [1, 11, 21]

    def test_monotone_within_cycle(self):
        for t in range(1, 10):
            assert nn.cosine_lr(t, 10, 1, 1.0, 0.1) >= nn.cosine_lr(t + 1, 10, 1, 1.0, 0.1)

    @pytest.mark.parametrize(
        "args", [(0, 10, 1, 1.0, 0.1), (11, 10, 1, 1.0, 0.1), (1, 10, 0, 1.0, 0.1), (1, 10, 1, 0.1, 1.0)]
    )
    def test_rejects_bad_ranges(self, args):
        with pytest.raises(ValueError):
            nn.cosine_lr(*args)


class TestParamSet:
    def test_sorted_iteration(self):
        ps = nn.ParamSet(
            {"dense02": (np.ones((1, 1)), None), "dense00": (np.zeros((1, 1)), None)}
        )
        assert ps.ids() == ["dense00", "dense02"]

    def test_combine_weighted_sum(self):
        a = nn.ParamSet({"dense00": (np.array([[1.0]]), None)})
        b = nn.ParamSet({"dense00": (np.array([[3.0]]), None)})
        out = nn.combine([a, b], [0.25, 0.75])
        assert out["dense00"][0][0, 0] == pytest.approx(2.5)

    def test_grad_norm(self):
        g = nn.ParamSet({"dense00": (np.array([[3.0]]), np.array([4.0]))})
        assert nn.grad_norm(g) == pytest.approx(5.0)

    def test_init_bounded(self, rng):
        spec = nn.mlp((8, 4))
        params = nn.init_params(spec, rng)
        bound = math.sqrt(6.0 / 12.0)
        w, b = params["dense00"]
        assert np.all(np.abs(w) <= bound)
        np.testing.assert_array_equal(b, np.zeros(4))
