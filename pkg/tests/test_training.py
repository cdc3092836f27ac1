import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odgpssm.exceptions import ContractError
from odgpssm.kernels import KernelParams, sparse_gp_predict
from odgpssm.model import GPSSMParams, Trajectory
from odgpssm.training import (AdamState, TrainConfig, TrainingAborted, adam_step, checkpoint_dict,
                              elbo_terms, fit_kernel_hyperparameters, grad_elbo, load_checkpoint,
                              pack, params_from_checkpoint, pretrain_transition, save_checkpoint,
                              train, trainable_mask, unpack)

from dense import random_params

seeds = st.integers(0, 2**32 - 1)


def small_problem(rng, T=5, x0=None, d_c=0):
    p = random_params(rng, d_x=2, d_y=1, Q=2, m=5, d_c=d_c, x0=x0)
    y = rng.normal(size=(T, 1))
    c = rng.normal(size=(T, d_c)) if d_c else None
    return p, Trajectory(y, c)


def leaves(p: GPSSMParams):
    net = p.recognition
    return [p.coreg.A, p.signal_variance, p.lengthscales, p.inducing.z, p.inducing.means,
            p.inducing.chol_factors, p.process_noise, p.obs_noise, net.W1, net.b1, net.W2, net.b2]


class TestPacking:
    @given(seeds, st.booleans())
    def test_round_trip(self, seed, known):
        r = np.random.default_rng(seed)
        p = random_params(r, d_x=int(r.integers(1, 4)), Q=int(r.integers(1, 3)), m=int(r.integers(1, 5)),
                          x0=None)
        if known:
            p = p.with_changes(x0=r.normal(size=p.state_dim))
        back = unpack(pack(p).values, pack(p).layout)
        for a, b in zip(leaves(p), leaves(back)):
            np.testing.assert_allclose(np.asarray(b), np.asarray(a), atol=1e-14, rtol=1e-14)
        if known:
            np.testing.assert_array_equal(back.x0, p.x0)

    def test_positive_segments_logged(self, rng):
        p = random_params(rng)
        flat = pack(p)
        np.testing.assert_allclose(flat.segment("obs_noise"), np.log(np.asarray(p.obs_noise)))

    def test_any_vector_gives_valid_model(self, rng):
        p = random_params(rng)
        flat = pack(p)
        q = unpack(rng.normal(size=flat.values.size) * 3, flat.layout)
        assert np.all(np.asarray(q.signal_variance) > 0)
        assert np.all(np.asarray(q.process_noise) > 0)
        assert np.all(np.diagonal(np.asarray(q.inducing.chol_factors), axis1=1, axis2=2) > 0)

    def test_wrong_length_rejected(self, rng):
        from odgpssm.training import FlatParams

        flat = pack(random_params(rng))
        with pytest.raises(ContractError):
            FlatParams(flat.values[:-1], flat.layout)


class TestGradient:
    def test_finite_differences(self, rng):
        p, tr = small_problem(rng)
        flat = pack(p)
        eps = rng.normal(size=2 * 6 * 2)
        g = grad_elbo(flat, tr, eps)
        h = 1e-5
        idx = rng.choice(flat.values.size, size=25, replace=False)
        for i in idx:
            up, dn = flat.values.copy(), flat.values.copy()
            up[i] += h
            dn[i] -= h
            fu = elbo_terms(type(flat)(up, flat.layout), tr, eps)["elbo"]
            fd = elbo_terms(type(flat)(dn, flat.layout), tr, eps)["elbo"]
            num = (fu - fd) / (2 * h)
            assert abs(num - g[i]) <= 1e-4 * max(1.0, abs(num)), flat.layout.segment_of(int(i))

    def test_finite_differences_with_controls(self, rng):
        p, tr = small_problem(rng, d_c=1)
        flat = pack(p)
        eps = rng.normal(size=6 * 2)
        g = grad_elbo(flat, tr, eps)
        h = 1e-5
        for i in rng.choice(flat.values.size, size=10, replace=False):
            up, dn = flat.values.copy(), flat.values.copy()
            up[i] += h
            dn[i] -= h
            num = (elbo_terms(type(flat)(up, flat.layout), tr, eps)["elbo"]
                   - elbo_terms(type(flat)(dn, flat.layout), tr, eps)["elbo"]) / (2 * h)
            assert abs(num - g[i]) <= 1e-4 * max(1.0, abs(num))

    def test_known_x0_recognition_gradient_is_zero(self, rng):
        p, tr = small_problem(rng, x0=[0.2, -0.1])
        flat = pack(p)
        g = grad_elbo(flat, tr, rng.normal(size=12))
        offsets = flat.layout.offsets()
        for name in ("rec_W1", "rec_b1", "rec_W2", "rec_b2"):
            a, b = offsets[name]
            assert np.all(g[a:b] == 0.0)

    def test_terms_returned(self, rng):
        p, tr = small_problem(rng)
        g, terms = grad_elbo(pack(p), tr, rng.normal(size=12), return_terms=True)
        assert g.shape == pack(p).values.shape
        assert terms["elbo"] == pytest.approx(terms["expectation"] - terms["kl_u"] - terms["kl_x0"])

    def test_eps_size_checked(self, rng):
        p, tr = small_problem(rng)
        with pytest.raises(ContractError):
            grad_elbo(pack(p), tr, np.zeros(11))


class TestAdam:
    def test_zero_gradient_is_a_no_op(self, rng):
        w = rng.normal(size=4)
        _, w2 = adam_step(AdamState.zeros(4), w, np.zeros(4))
        np.testing.assert_array_equal(w2, w)

    def test_first_step_moves_by_learning_rate(self):
        _, w = adam_step(AdamState.zeros(2, learning_rate=0.01), np.zeros(2), np.array([3.0, -0.5]))
        np.testing.assert_allclose(w, [0.01, -0.01], rtol=1e-6)

    def test_quadratic_oracle(self):
        # maximize -w^2/2 from w = 1
        state, w = AdamState.zeros(1, learning_rate=0.01), np.array([1.0])
        for _ in range(2000):
            state, w = adam_step(state, w, -w)
        assert abs(w[0]) < 1e-3

    def test_length_checked(self):
        with pytest.raises(ContractError):
            adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))

    def test_flat_params_preserved(self, rng):
        flat = pack(random_params(rng))
        _, out = adam_step(AdamState.zeros(flat.values.size), flat, np.ones(flat.values.size))
        assert out.layout == flat.layout


class TestTrain:
    def test_zero_epochs_returns_initial(self, rng):
        p, tr = small_problem(rng)
        out, log = train(TrainConfig(epochs=0), tr, 0, p)
        assert out is p and log.rows == []

    def test_deterministic(self, rng):
        p, tr = small_problem(rng)
        a, la = train(TrainConfig(epochs=5, n_samples=2), tr, 3, p)
        b, lb = train(TrainConfig(epochs=5, n_samples=2), tr, 3, p)
        np.testing.assert_array_equal(pack(a).values, pack(b).values)
        np.testing.assert_array_equal(la.elbo, lb.elbo)

    def test_seed_changes_noise(self, rng):
        p, tr = small_problem(rng)
        _, la = train(TrainConfig(epochs=3, n_samples=1), tr, 3, p)
        _, lb = train(TrainConfig(epochs=3, n_samples=1), tr, 4, p)
        assert la.elbo[0] != lb.elbo[0]

    def test_log_rows(self, rng, tmp_path):
        p, tr = small_problem(rng)
        _, log = train(TrainConfig(epochs=4, n_samples=1), tr, 0, p)
        assert [r[0] for r in log.rows] == [0, 1, 2, 3]
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(log.COLUMNS) and len(lines) == 5

    @settings(max_examples=5)
    @given(seeds)
    def test_positivity_preserved(self, seed):
        r = np.random.default_rng(seed)
        p, tr = small_problem(r)
        out, _ = train(TrainConfig(epochs=10, n_samples=1, learning_rate=0.2), tr, seed, p)
        out.validate()
        assert np.all(np.asarray(out.obs_noise) > 0)
        assert np.all(np.asarray(out.process_noise) > 0)

    def test_frozen_segment_unchanged(self, rng):
        p, tr = small_problem(rng)
        out, _ = train(TrainConfig(epochs=5, n_samples=1, frozen=("A",)), tr, 0, p)
        np.testing.assert_allclose(np.asarray(out.coreg.A), np.asarray(p.coreg.A), atol=1e-15)
        assert not np.allclose(np.asarray(out.obs_noise), np.asarray(p.obs_noise))

    def test_unknown_frozen_segment(self, rng):
        with pytest.raises(ContractError):
            trainable_mask(pack(random_params(rng)).layout, ("B",))

    def test_improves_the_objective(self, rng):
        p, tr = small_problem(rng, T=8)
        out, _ = train(TrainConfig(epochs=150, n_samples=4, learning_rate=0.05), tr, 0, p)
        eps = np.random.default_rng(99).normal(size=64 * 9 * 2)
        assert elbo_terms(pack(out), tr, eps)["elbo"] > elbo_terms(pack(p), tr, eps)["elbo"]

    def test_non_finite_objective_aborts(self, rng):
        p, _ = small_problem(rng)
        tr = Trajectory(np.full((5, 1), 1e200))
        with pytest.raises(TrainingAborted) as info:
            train(TrainConfig(epochs=3, n_samples=1), tr, 0, p)
        assert info.value.log.status == "aborted"
        assert isinstance(info.value.params, GPSSMParams)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(epochs=-1)
        with pytest.raises(ContractError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ContractError):
            TrainConfig(n_samples=0)

    def test_control_mismatch(self, rng):
        p, _ = small_problem(rng, d_c=1)
        with pytest.raises(ContractError):
            train(TrainConfig(epochs=1), Trajectory(np.zeros((5, 1))), 0, p)


class TestPretraining:
    def test_marginal_likelihood_recovers_smooth_function(self, rng):
        X = rng.uniform(-3, 3, size=(40, 1))
        y = np.sin(X[:, 0])
        s2, ell, noise = fit_kernel_hyperparameters(X, y, steps=500)
        assert s2 > 0 and noise < 0.05 and 0.3 < ell[0] < 5

    def test_identity_map(self, rng):
        X = rng.uniform(-2, 2, size=(50, 2))
        p = GPSSMParams.initial(2, 1, 2, 25, rng=rng, independent=True)
        p = pretrain_transition(p, X, X, rng=rng)
        test = rng.uniform(-1.5, 1.5, size=(10, 2))
        for q in range(2):
            kp = KernelParams(float(p.signal_variance[q]), np.asarray(p.lengthscales[q]))
            for x in test:
                mean, _ = sparse_gp_predict(kp, p.inducing, q, x)
                assert abs(float(mean) - x[q]) < 0.1

    def test_inducing_inputs_are_pair_inputs_when_counts_match(self, rng):
        X = rng.normal(size=(6, 2))
        p = GPSSMParams.initial(2, 1, 2, 6, rng=rng, independent=True)
        out = pretrain_transition(p, X, 0.5 * X, steps=20, rng=rng)
        z = np.asarray(out.inducing.z)
        assert sorted(map(tuple, z)) == sorted(map(tuple, X))

    def test_fewer_pairs_than_inducing_points(self, rng):
        X = rng.normal(size=(3, 2))
        p = GPSSMParams.initial(2, 1, 2, 6, rng=rng, independent=True)
        out = pretrain_transition(p, X, X, steps=20, rng=rng)
        out.inducing.check_distinct()
        out.validate()

    def test_dimension_checks(self, rng):
        p = GPSSMParams.initial(2, 1, 2, 4, rng=rng)
        with pytest.raises(ContractError):
            pretrain_transition(p, np.zeros((5, 3)), np.zeros((5, 2)))
        with pytest.raises(ContractError):
            pretrain_transition(p, np.zeros((5, 2)), np.zeros((4, 2)))


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        p = random_params(rng, d_c=1, x0=[0.1, 0.2])
        save_checkpoint(p, tmp_path / "ck.json")
        back = load_checkpoint(tmp_path / "ck.json")
        # re-packing applies log(exp(.)), hence the one-ulp tolerance
        np.testing.assert_allclose(pack(back).values, pack(p).values, atol=1e-14, rtol=0)
        np.testing.assert_array_equal(back.x0, p.x0)

    def test_document_fields(self, rng):
        doc = checkpoint_dict(random_params(rng))
        assert doc["kernel"] == "squared_exponential_ard"
        assert doc["schema_version"] == 1
        json.dumps(doc)

    def test_schema_checked(self, rng):
        doc = checkpoint_dict(random_params(rng))
        doc["schema_version"] = 99
        with pytest.raises(ContractError):
            params_from_checkpoint(doc)
