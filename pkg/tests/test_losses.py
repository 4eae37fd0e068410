import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uoda import autodiff as ad
from uoda.autodiff import ContractError, Graph
from uoda.losses import (
    HyperParams,
    LossBundle,
    compute_losses,
    cross_entropy,
    mean_entropy,
    objective_f1,
    objective_f2,
    objective_g,
)
from uoda.models import bind, init_model

from gradcheck import numeric_grad, rel_error


def lp_node(probs):
    g = Graph()
    return g.constant(np.log(np.asarray(probs, dtype=np.float64)))


def bundle(**values):
    g = Graph()
    return LossBundle(**{k: g.constant(v) for k, v in values.items()})


class TestCrossEntropy:
    def test_perfect_prediction(self):
        g = Graph()
        lp = ad.log_softmax(g.constant([[100.0, -100.0], [-100.0, 100.0]]))
        assert float(cross_entropy(lp, [0, 1]).value) == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        lp = lp_node(np.full((4, 3), 1 / 3))
        assert float(cross_entropy(lp, [0, 1, 2, 2]).value) == pytest.approx(math.log(3), abs=1e-12)

    def test_hand_value(self):
        assert float(cross_entropy(lp_node([[0.7, 0.3]]), [0]).value) == pytest.approx(0.35667, abs=1e-5)

    @pytest.mark.parametrize("labels", [[2], [-1], [0.5]])
    def test_invalid_labels(self, labels):
        with pytest.raises(ContractError):
            cross_entropy(lp_node([[0.5, 0.5]]), labels)


class TestEntropy:
    def test_uniform_k2(self):
        assert float(mean_entropy(lp_node([[0.5, 0.5]] * 3)).value) == pytest.approx(0.6931, abs=1e-4)

    def test_one_hot(self):
        g = Graph()
        lp = ad.log_softmax(g.constant([[800.0, 0.0, 0.0]]))
        assert float(mean_entropy(lp).value) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        val = float(mean_entropy(lp_node([[0.9, 0.1]])).value)
        assert val == pytest.approx(expected, abs=1e-15)
        assert val == pytest.approx(0.32508, abs=1e-5)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)), elements=st.floats(-20, 20)),
           st.randoms())
    def test_row_permutation_invariance(self, z, rnd):
        g = Graph()
        perm = list(range(z.shape[1]))
        rnd.shuffle(perm)
        a = float(mean_entropy(ad.log_softmax(g.constant(z))).value)
        b = float(mean_entropy(ad.log_softmax(g.constant(z[:, perm]))).value)
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)), elements=st.floats(-20, 20)))
    def test_argmax_labels_bound(self, z):
        g = Graph()
        lp = ad.log_softmax(g.constant(z))
        ce = float(cross_entropy(lp, np.argmax(z, axis=1)).value)
        assert ce <= math.log(z.shape[1]) + 1e-12


class TestObjectives:
    def test_f1_symmetric_alpha(self):
        b = bundle(L_src_1=1.2, L_tar_1=0.4, H_src=0.3)
        h = HyperParams(alpha=0.5, beta=0.0)
        assert float(objective_f1(b, h).value) == pytest.approx(0.8)

    def test_f1_alpha_one(self):
        b = bundle(L_src_1=1.2, L_tar_1=0.4, H_src=0.3)
        h = HyperParams(alpha=1.0, beta=0.1)
        assert float(objective_f1(b, h).value) == pytest.approx(1.2 + 0.03)

    def test_f1_arithmetic(self):
        b = bundle(L_src_1=1.0, L_tar_1=2.0, H_src=0.5)
        assert float(objective_f1(b, HyperParams(alpha=0.75, beta=0.1)).value) == pytest.approx(1.30, abs=1e-12)

    def test_f2_arithmetic(self):
        b = bundle(L_src_2=1.0, L_tar_2=2.0, H_tar=0.6)
        assert float(objective_f2(b, HyperParams(alpha=0.75, lam=0.1)).value) == pytest.approx(1.69, abs=1e-12)

    def test_f2_mirrors_f1(self):
        h = HyperParams(alpha=0.5, beta=0.0, lam=0.0)
        b1 = bundle(L_src_1=0.9, L_tar_1=0.2, H_src=0.4)
        b2 = bundle(L_src_2=0.9, L_tar_2=0.2, H_tar=0.4)
        assert float(objective_f1(b1, h).value) == float(objective_f2(b2, h).value)

    def test_f2_minimized_at_max_entropy(self):
        h = HyperParams(alpha=0.75, lam=0.1)
        low = objective_f2(bundle(L_src_2=1.0, L_tar_2=1.0, H_tar=0.1), h).value
        high = objective_f2(bundle(L_src_2=1.0, L_tar_2=1.0, H_tar=math.log(2)), h).value
        assert high < low

    def test_g_arithmetic(self):
        b = bundle(L_src_1=1.0, L_tar_2=2.0, H_src=0.5, H_tar=0.6)
        assert float(objective_g(b, HyperParams(beta=0.1, lam=0.1)).value) == pytest.approx(3.01, abs=1e-12)

    def test_g_without_entropy(self):
        b = bundle(L_src_1=1.0, L_tar_2=2.0, H_src=0.5, H_tar=0.6)
        assert float(objective_g(b, HyperParams(beta=0.0, lam=0.0)).value) == pytest.approx(3.0)

    def test_g_all_heads(self):
        b = bundle(L_src_1=1.0, L_tar_1=0.5, L_src_2=0.25, L_tar_2=2.0, H_src=0.5, H_tar=0.6)
        h = HyperParams(beta=0.0, lam=0.0, generator_supervision="all_heads")
        assert float(objective_g(b, h).value) == pytest.approx(3.75)

    def test_uda_variants(self):
        b = bundle(L_src_1=1.0, L_src_2=0.8, H_src=0.5, H_tar=0.6)
        h = HyperParams(beta=0.1, lam=0.2, mode="uda")
        assert float(objective_f1(b, h).value) == pytest.approx(1.05)
        assert float(objective_f2(b, h).value) == pytest.approx(0.8 - 0.12)
        assert float(objective_g(b, h).value) == pytest.approx(1.0 - 0.05 + 0.12)

    def test_entropy_sign_opposes_between_f1_and_g(self):
        h = HyperParams(beta=0.3, lam=0.0)
        base = dict(L_src_1=1.0, L_tar_1=1.0, L_tar_2=1.0, H_tar=0.0)
        f1_a = float(objective_f1(bundle(**base, H_src=0.0), h).value)
        f1_b = float(objective_f1(bundle(**base, H_src=1.0), h).value)
        g_a = float(objective_g(bundle(**base, H_src=0.0), h).value)
        g_b = float(objective_g(bundle(**base, H_src=1.0), h).value)
        assert f1_b - f1_a == pytest.approx(0.3)
        assert g_b - g_a == pytest.approx(-0.3)

    def test_linear_in_coefficients(self):
        b = bundle(L_src_1=0.7, L_tar_1=1.3, L_tar_2=0.9, H_src=0.41, H_tar=0.27)
        d = float(objective_f1(b, HyperParams(beta=0.6)).value) - float(objective_f1(b, HyperParams(beta=0.5)).value)
        assert d / 0.1 == pytest.approx(0.41, abs=1e-12)
        d = float(objective_g(b, HyperParams(lam=0.6)).value) - float(objective_g(b, HyperParams(lam=0.5)).value)
        assert d / 0.1 == pytest.approx(0.27, abs=1e-12)

    def test_missing_term_is_an_error(self):
        with pytest.raises(ContractError):
            objective_f1(bundle(L_src_1=1.0, H_src=0.1), HyperParams())

    def test_ent_only_minimizes_target_entropy_on_head(self):
        b = bundle(L_src_2=1.0, L_tar_2=1.0, H_tar=0.5)
        h = HyperParams.preset("ent_only")
        assert float(objective_f2(b, h).value) == pytest.approx(0.25 + 0.75 + 0.05)

    def test_s_plus_t_is_plain_supervision(self):
        b = bundle(L_src_1=1.0, L_tar_1=2.0, L_src_2=3.0, L_tar_2=4.0, H_src=0.5, H_tar=0.6)
        h = HyperParams.preset("s_plus_t")
        assert float(objective_f1(b, h).value) == 3.0
        assert float(objective_f2(b, h).value) == 7.0
        assert float(objective_g(b, h).value) == 10.0


class TestHyperParams:
    def test_default_coefficients(self):
        h = HyperParams()
        assert (h.alpha, h.beta, h.lam) == (0.75, 0.1, 0.1)
        assert (h.lr, h.momentum, h.weight_decay) == (0.01, 0.9, 0.0005)

    @pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(beta=-1), dict(momentum=1.0), dict(mode="x"),
                                    dict(method="mme"), dict(generator_supervision="x")])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            HyperParams(**kw)

    def test_preset_constraints(self):
        with pytest.raises(ContractError):
            HyperParams.preset("s_plus_t", beta=0.1)
        with pytest.raises(ContractError):
            HyperParams.preset("ent_only", lam=0.0)
        assert HyperParams.preset("s_plus_t").lam == 0.0


def random_batches(rng, d_in, k, n=8):
    return (rng.uniform(-2, 2, (n, d_in)), rng.integers(0, k, n),
            rng.uniform(-2, 2, (n, d_in)), rng.integers(0, k, n), rng.uniform(-2, 2, (n, d_in)))


class TestObjectiveGradients:
    @pytest.mark.parametrize("k", [2, 3])
    @pytest.mark.parametrize("mode", ["ssda", "uda"])
    @pytest.mark.parametrize("which", ["f1", "f2", "g"])
    def test_matches_finite_differences(self, k, mode, which):
        rng = np.random.default_rng(k * 10 + len(mode))
        model = init_model(2, [6], 2, k, seed=k)
        xs, ys, xt, yt, xu = random_batches(rng, 2, k)
        h = HyperParams(beta=0.3, lam=0.2, mode=mode)
        obj = {"f1": objective_f1, "f2": objective_f2, "g": objective_g}[which]

        def loss_of(m):
            g = Graph()
            params = bind(m, g)
            b = compute_losses(m, params, xs, ys, xt, yt, xu, mode=mode)
            return g, obj(b, h)

        g, loss = loss_of(model)
        grads = ad.backward(g, loss)
        for name, value in model.params.items():
            num = numeric_grad(lambda v: float(loss_of(model.with_params({name: v}))[1].value), value)
            assert rel_error(grads[name], num) <= 1e-4, name

    def test_scattering_sign_on_generator(self):
        rng = np.random.default_rng(1)
        model = init_model(2, [6], 2, 2, seed=1)
        xs, ys, xt, yt, xu = random_batches(rng, 2, 2)

        def grad_of(obj, h):
            g = Graph()
            params = bind(model, g, trainable=("G",))
            return ad.backward(g, obj(compute_losses(model, params, xs, ys, xt, yt, xu), h))

        h_ent = grad_of(lambda b, h: b.H_src, HyperParams())
        zero = dict(alpha=1.0, lam=0.0)
        g_with = grad_of(objective_g, HyperParams(beta=0.4, **zero))
        g_without = grad_of(objective_g, HyperParams(beta=0.0, **zero))
        for name in h_ent:
            np.testing.assert_allclose(g_with[name] - g_without[name], -0.4 * h_ent[name], atol=1e-12)

        # head-side: objective_f1 carries +beta H_src
        g = Graph()
        params = bind(model, g, trainable=("F1",))
        b = compute_losses(model, params, xs, ys, xt, yt, xu, heads=(1,))
        f1_ent = ad.backward(g, b.H_src)
        g = Graph()
        params = bind(model, g, trainable=("F1",))
        b = compute_losses(model, params, xs, ys, xt, yt, xu, heads=(1,))
        f1_with = ad.backward(g, objective_f1(b, HyperParams(beta=0.4, **zero)))
        g = Graph()
        params = bind(model, g, trainable=("F1",))
        b = compute_losses(model, params, xs, ys, xt, yt, xu, heads=(1,))
        f1_without = ad.backward(g, objective_f1(b, HyperParams(beta=0.0, **zero)))
        for name in f1_ent:
            np.testing.assert_allclose(f1_with[name] - f1_without[name], 0.4 * f1_ent[name], atol=1e-12)

    def test_frozen_features_block_generator_gradient(self):
        rng = np.random.default_rng(2)
        model = init_model(2, [6], 2, 2, seed=2)
        xs, ys, xt, yt, xu = random_batches(rng, 2, 2)
        g = Graph()
        params = bind(model, g)
        b = compute_losses(model, params, xs, ys, xt, yt, xu, freeze_features=True)
        grads = ad.backward(g, objective_f1(b, HyperParams()))
        assert all(np.all(grads[n] == 0) for n in model.group("G"))
        assert any(np.any(grads[n] != 0) for n in model.group("F1"))
