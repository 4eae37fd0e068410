import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uoda.autodiff import ContractError
from uoda.data import LabeledSet, gen_two_moons_pair, split_kshot
from uoda.evaluation import (
    FeatureSnapshot,
    accuracy,
    accuracy_from_log_probs,
    assemble_bound,
    bound_report,
    default_gamma_grid,
    divergence_from_entropies,
    estimate_divergence,
    snapshot_features,
)
from uoda.models import init_model

from divergence_oracle import brute_force


def fixed_model(w1, w2=None):
    """Identity generator on 2-D inputs with linear heads."""
    m = init_model(2, [], 2, 2, seed=0)
    w1 = np.asarray(w1, dtype=np.float64)
    return m.with_params({"G.0.W": np.eye(2), "F1.0.W": w1,
                          "F2.0.W": w1 if w2 is None else np.asarray(w2, dtype=np.float64)})


class TestAccuracy:
    def test_perfect_and_zero(self):
        m = fixed_model([[-1.0, 1.0], [0.0, 0.0]])
        x = np.array([[-2.0, 0.0], [3.0, 1.0]])
        assert accuracy(m, 1, LabeledSet(x, [0, 1])) == 1.0
        assert accuracy(m, 1, LabeledSet(x, [1, 0])) == 0.0

    def test_pairs_and_fraction(self):
        m = fixed_model([[-1.0, 1.0], [0.0, 0.0]])
        pairs = [([-1.0, 0.0], 0), ([1.0, 0.0], 1), ([2.0, 0.0], 0), ([-2.0, 0.0], 0)]
        assert accuracy(m, 1, pairs) == 0.75

    def test_half_correct(self):
        m = fixed_model([[-1.0, 1.0], [0.0, 0.0]])
        assert accuracy(m, 1, [([-1.0, 0.0], 0), ([1.0, 0.0], 0), ([2.0, 0.0], 1), ([-2.0, 0.0], 1)]) == 0.5

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 5)), elements=st.floats(-10, 10)),
           st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
    def test_invariant_under_monotone_rowwise_transform(self, z, a, b):
        labels = np.arange(len(z)) % z.shape[1]
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        assert accuracy_from_log_probs(lp, labels) == accuracy_from_log_probs(a * lp + b, labels)

    def test_ties_go_to_lowest_index(self):
        m = fixed_model([[0.0, 0.0], [0.0, 0.0]])
        assert accuracy(m, 2, [([5.0, 5.0], 0)]) == 1.0

    def test_empty_rejected(self):
        m = fixed_model(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            accuracy(m, 1, [])

    def test_bad_head(self):
        m = fixed_model(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            accuracy(m, 3, [([0.0, 0.0], 0)])


class TestDivergence:
    def test_hand_case(self):
        r = divergence_from_entropies([0.1, 0.2], [0.5, 0.7], [0.3])
        assert r.frac_src == [0.0] and r.frac_tar == [1.0] and r.d_hat == [2.0] and r.d_hat_max == 2.0

    def test_reverse_case_is_negative(self):
        r = divergence_from_entropies([0.5, 0.7], [0.1, 0.2], [0.3])
        assert r.d_hat_max == -2.0

    def test_tie_counts_as_exceeding(self):
        r = divergence_from_entropies([0.3], [0.3, 0.1], [0.3])
        assert r.frac_src == [1.0] and r.frac_tar == [0.5]

    def test_extreme_separation(self):
        # head 1 certain on S, head 2 uniform on U
        m = fixed_model([[-50.0, 50.0], [0.0, 0.0]], np.zeros((2, 2)))
        xs = np.array([[-1.0, 0.0], [1.0, 0.0], [2.0, 3.0]])
        r = estimate_divergence(m, xs, np.random.default_rng(0).normal(size=(5, 2)))
        assert r.d_hat == [2.0] * 20

    def test_identical_model_same_inputs_is_zero(self):
        m = fixed_model([[1.0, -0.5], [0.3, 0.2]])
        x = np.random.default_rng(0).normal(size=(30, 2))
        r = estimate_divergence(m, x, x)
        assert all(d == 0.0 for d in r.d_hat)

    def test_default_grid(self):
        g = default_gamma_grid(3)
        assert len(g) == 20 and g[0] > 0 and g[-1] < math.log(3)
        np.testing.assert_allclose(np.diff(g), math.log(3) / 21)

    @pytest.mark.parametrize("grid", [[0.0], [math.log(2)], [-0.1], []])
    def test_grid_outside_open_interval(self, grid):
        m = fixed_model(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            estimate_divergence(m, np.zeros((2, 2)), np.zeros((2, 2)), grid)

    def test_empty_samples(self):
        m = fixed_model(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            estimate_divergence(m, np.zeros((0, 2)), np.zeros((2, 2)))

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            k = int(rng.integers(2, 5))
            d = int(rng.integers(1, 4))
            m = init_model(d, [int(rng.integers(1, 5))], 2, k, seed=int(rng.integers(1 << 30)))
            m = m.with_params({n: rng.normal(scale=2.0, size=v.shape) for n, v in m.params.items()})
            xs = rng.normal(size=(int(rng.integers(1, 12)), d))
            xu = rng.normal(size=(int(rng.integers(1, 12)), d))
            r = estimate_divergence(m, xs, xu)
            for (cs, cu), fs, fu in zip(brute_force(m.params, xs, xu, r.gamma), r.frac_src, r.frac_tar):
                assert fs * len(xs) == cs and fu * len(xu) == cu
                assert fs == cs / len(xs) and fu == cu / len(xu)

    def test_fractions_non_increasing(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            r = divergence_from_entropies(rng.uniform(0, 1, 20), rng.uniform(0, 1, 15),
                                          np.sort(rng.uniform(0, 1, 10)))
            assert np.all(np.diff(r.frac_src) <= 0) and np.all(np.diff(r.frac_tar) <= 0)

    def test_invariant_to_order_and_duplication(self):
        rng = np.random.default_rng(3)
        hs, hu = rng.uniform(0, 1, 17), rng.uniform(0, 1, 11)
        grid = np.linspace(0.05, 0.95, 9)
        base = divergence_from_entropies(hs, hu, grid)
        shuffled = divergence_from_entropies(rng.permutation(hs), rng.permutation(hu), grid)
        doubled = divergence_from_entropies(np.tile(hs, 2), np.tile(hu, 3), grid)
        assert base.d_hat == shuffled.d_hat == doubled.d_hat

    def test_report_json(self, tmp_path):
        r = divergence_from_entropies([0.1, 0.2], [0.5, 0.7], [0.3, 0.6])
        r.write_json(tmp_path / "d.json")
        blob = json.loads((tmp_path / "d.json").read_text())
        assert blob["d_hat"] == [2.0, 1.0] and blob["d_hat_max"] == 2.0


class TestBound:
    def test_arithmetic(self):
        b = assemble_bound(0.1, 0.4)
        assert b.bound_partial == pytest.approx(0.3, abs=1e-15)
        assert b.to_json()["delta"] == "unknown"

    def test_perfect_classifier_no_divergence(self):
        assert assemble_bound(0.0, 0.0).bound_partial == 0.0

    def test_from_model(self):
        m = fixed_model([[-1.0, 1.0], [0.0, 0.0]])
        src = LabeledSet(np.array([[-3.0, 0.0], [3.0, 0.0], [4.0, 0.0]]), [0, 1, 0])
        b = bound_report(m, src, np.array([[0.0, 0.0]]))
        assert b.empirical_source_risk == pytest.approx(1 / 3)
        assert b.bound_partial == pytest.approx(b.empirical_source_risk + b.d_hat_max / 2)


@pytest.fixture(scope="module")
def ds():
    src, tgt = gen_two_moons_pair(60, 30, 0.1, seed=0)
    return split_kshot(src, tgt, k=2, test_fraction=0.3, seed=0)


class TestSnapshot:
    def test_rows_and_dimension(self, ds):
        m = init_model(2, [4], 3, 2, seed=0)
        snap = snapshot_features(m, ds, epoch=4)
        assert len(snap) == len(ds.source) + len(ds.target_labeled) + len(ds.target_unlabeled)
        assert snap.feature_dim == 3 and snap.epoch == 4
        assert snap.domain.count("target_labeled") == 4
        assert np.all(snap.label[np.array(snap.domain) == "target_unlabeled"] == -1)

    def test_zero_generator_gives_zero_features(self, ds):
        m = init_model(2, [4], 2, 2, seed=0)
        m = m.with_params({n: np.zeros_like(v) for n, v in m.params.items() if n.startswith("G.")})
        np.testing.assert_array_equal(snapshot_features(m, ds, 0).features, 0.0)

    def test_csv_round_trip(self, ds, tmp_path):
        m = init_model(2, [4], 2, 2, seed=1)
        snap = snapshot_features(m, ds, epoch=2)
        snap.write_csv(tmp_path / "s.csv")
        back = FeatureSnapshot.read_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.features, snap.features)
        assert back.domain == snap.domain and back.epoch == 2
        np.testing.assert_array_equal(back.pred2, snap.pred2)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            FeatureSnapshot(0, np.zeros((2, 2)), ["source"], [0], [0], [0])
