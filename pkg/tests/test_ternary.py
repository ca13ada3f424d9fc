import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import uniform_mass
from tnasnn import snn
from tnasnn.errors import ConfigurationError, ContractError
from tnasnn.tensor import Tensor, backward, matmul, precision
from tnasnn.ternary import (TernaryPolicy, activate_compression, binarize_sign, sparsity_report,
                            ternarize, tna_ternary_handoff)


def cifarnet(num_classes=10):
    return snn.parse_architecture(snn.CIFARNET, (3, 32, 32), num_classes)


def lazy_params(spec, seed=0, scale=0.2):
    """Cheap stand-in for CIFARNet weights: uniform values with the right shapes."""
    rng = np.random.default_rng(seed)
    return {name: Tensor(rng.uniform(-scale, scale, size=shape).astype(np.float32))
            for name, shape in spec.param_shapes().items()}


class TestTernarize:
    @pytest.mark.parametrize("w,expected", [(0.05, 0.0), (-0.3, -1.0), (0.1, 0.0), (-0.1, 0.0),
                                            (0.1000001, 1.0), (7.0, 1.0), (0.0, 0.0)])
    def test_hand_cases(self, w, expected):
        assert ternarize(np.array([w]), 0.1)[0] == expected

    def test_random_million_properties(self):
        rng = np.random.default_rng(7)
        w = rng.normal(scale=0.2, size=10 ** 6)
        for delta in (0.01, 0.1, 0.5):
            t = ternarize(w, delta)
            assert np.all(np.isin(t, (-1.0, 0.0, 1.0)))
            assert np.array_equal(ternarize(t, delta), t)
            big = np.abs(w) > delta
            assert np.array_equal(np.sign(t[big]), np.sign(w[big]))
            assert np.all(t[~big] == 0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50),
           st.floats(1e-3, 0.999))
    def test_idempotent_property(self, values, delta):
        w = np.array(values)
        t = ternarize(w, delta)
        assert np.array_equal(ternarize(t, delta), t)

    def test_monotone_sparsity(self):
        w = np.random.default_rng(1).normal(size=20000)
        fractions = [np.mean(ternarize(w, d) == 0) for d in np.linspace(0.01, 3.0, 40)]
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))

    def test_delta_must_be_positive(self):
        with pytest.raises(ContractError):
            ternarize(np.ones(3), 0.0)

    def test_binarize_sign(self):
        out = binarize_sign(np.array([-2.0, -1e-9, 0.0, 3.0]))
        assert out.tolist() == [-1.0, -1.0, 1.0, 1.0]


class TestActivation:
    def test_before_start_is_noop(self):
        spec = cifarnet()
        params = lazy_params(spec)
        before = {k: v.data.copy() for k, v in params.items()}
        state = activate_compression(spec, params, TernaryPolicy(start_epoch=150), epoch=149)
        assert not state.active
        assert state.forward_params(params) is params
        for k, v in params.items():
            assert np.array_equal(v.data, before[k])
        with pytest.raises(ContractError):
            sparsity_report(state)

    def test_cifarnet_at_start(self):
        spec = cifarnet()
        params = lazy_params(spec)
        before = {k: v.data.tobytes() for k, v in params.items()}
        state = activate_compression(spec, params, TernaryPolicy(start_epoch=150), epoch=150)
        weighted = [snn.weight_name(spec, i) for i in spec.weighted_layers()]
        assert set(state.views) == set(weighted[1:-1])
        live = state.deployed_params(params)
        for name in weighted[1:-1]:
            assert np.all(np.isin(live[name].data, (-1.0, 0.0, 1.0)))
        for name in (weighted[0], weighted[-1]):
            assert live[name].data.tobytes() == before[name]
        for name, tensor in params.items():
            assert tensor.data.tobytes() == before[name]  # latents untouched

    def test_binary_sign_mode(self):
        spec = cifarnet()
        params = lazy_params(spec)
        state = activate_compression(spec, params, TernaryPolicy(start_epoch=0, mode="binary_sign"), 0)
        for view in state.views.values():
            assert np.all(np.isin(view.deployed, (-1.0, 1.0)))
        assert len(state.views) == len(spec.weighted_layers()) - 2

    def test_all_exempt_rejected(self):
        spec = snn.parse_architecture("8FC-Out", (4,), 3)
        with pytest.raises(ConfigurationError):
            activate_compression(spec, snn.kaiming_init(spec, 0), TernaryPolicy(start_epoch=0), 0)

    def test_exempt_out_of_range(self):
        spec = snn.parse_architecture("8FC-8FC-Out", (4,), 3)
        with pytest.raises(ConfigurationError):
            activate_compression(spec, snn.kaiming_init(spec, 0),
                                 TernaryPolicy(start_epoch=0, exempt_layers={5}), 0)

    def test_custom_exemptions(self):
        spec = snn.parse_architecture("8FC-8FC-Out", (4,), 3)
        state = activate_compression(spec, snn.kaiming_init(spec, 0),
                                     TernaryPolicy(start_epoch=0, exempt_layers={0}), 0)
        weighted = [snn.weight_name(spec, i) for i in spec.weighted_layers()]
        assert set(state.views) == set(weighted[1:])

    def test_bad_policy(self):
        with pytest.raises(ConfigurationError):
            TernaryPolicy(delta=0.0)
        with pytest.raises(ConfigurationError):
            TernaryPolicy(mode="quinary")


class TestStraightThrough:
    def test_latent_gradient_equals_deployed_gradient(self):
        rng = np.random.default_rng(3)
        with precision(np.float64):
            spec = snn.parse_architecture("5FC-6FC-Out", (4,), 3, dropout_p=0.0)
            params = snn.kaiming_init(spec, 2)
            state = activate_compression(spec, params, TernaryPolicy(delta=0.2, start_epoch=0), 0)
            (name,) = state.views
            x = rng.normal(size=(7, 5))
            coeff = rng.normal(size=(7, 6))
            live = state.forward_params(params)
            backward((matmul(Tensor(x), live[name]) * Tensor(coeff)).sum())
        # loss = sum(c * (x @ D)) so dL/dD = x^T c, whatever the deployed values are
        np.testing.assert_allclose(params[name].grad, x.T @ coeff, rtol=1e-12)

    def test_refresh_keeps_deployed_ternary_through_updates(self):
        rng = np.random.default_rng(5)
        spec = snn.parse_architecture("16FC-16FC-Out", (8,), 4)
        params = snn.kaiming_init(spec, 0)
        state = activate_compression(spec, params, TernaryPolicy(delta=0.1, start_epoch=0), 0)
        for _ in range(50):
            for view in state.views.values():
                view.latent.data = view.latent.data + rng.normal(scale=0.05, size=view.latent.shape)
            state.refresh()
            for view in state.views.values():
                assert np.all(np.isin(view.deployed, (-1.0, 0.0, 1.0)))
                assert np.array_equal(view.deployed, ternarize(view.latent.data, 0.1))


class TestHandoff:
    def test_twin_stays_full_precision(self):
        spec = snn.parse_architecture("32FC-32FC-Out", (16,), 4)
        base, twin = snn.kaiming_init(spec, 0), snn.kaiming_init(spec, 1)
        state = tna_ternary_handoff(spec, base, twin, TernaryPolicy(start_epoch=3, delta=0.05), "tna", 3)
        for name, view in state.views.items():
            assert np.all(np.isin(view.deployed, (-1.0, 0.0, 1.0)))
            assert not np.all(np.isin(twin[name].data, (-1.0, 0.0, 1.0)))

    def test_handoff_preconditions(self):
        spec = snn.parse_architecture("32FC-32FC-Out", (16,), 4)
        base, twin = snn.kaiming_init(spec, 0), snn.kaiming_init(spec, 1)
        policy = TernaryPolicy(start_epoch=3)
        with pytest.raises(ConfigurationError):
            tna_ternary_handoff(spec, base, twin, policy, "baseline", 3)
        with pytest.raises(ContractError):
            tna_ternary_handoff(spec, base, twin, policy, "tna", 2)
        with pytest.raises(ConfigurationError):
            tna_ternary_handoff(spec, base, base, policy, "tna", 3)


class TestSparsityReport:
    def _state(self, weights, delta):
        spec = snn.parse_architecture(f"{weights.shape[1]}FC-{weights.shape[1]}FC-Out",
                                      (weights.shape[0],), 2)
        params = snn.kaiming_init(spec, 0)
        mid = snn.weight_name(spec, spec.weighted_layers()[1])
        params[mid] = Tensor(np.resize(weights, params[mid].shape).astype(np.float32))
        return activate_compression(spec, params, TernaryPolicy(delta=delta, start_epoch=0), 0), mid

    def test_all_plus_minus_one(self):
        signs = np.where(np.random.default_rng(0).random((6, 6)) < 0.5, -1.0, 1.0)
        state, mid = self._state(signs, 0.1)
        assert sparsity_report(state)[mid] == 0.0

    def test_huge_delta(self):
        state, mid = self._state(np.random.default_rng(0).normal(size=(6, 6)), 1e9)
        assert sparsity_report(state)[mid] == 1.0

    @pytest.mark.parametrize("fan_in,fan_out", [(512, 256), (64, 2048)])
    def test_kaiming_mass_matches_closed_form(self, fan_in, fan_out):
        # 512 inputs give a bound below delta, so every weight falls to zero
        spec = snn.parse_architecture(f"{fan_in}FC-{fan_out}FC-Out", (16,), 2)
        params = snn.kaiming_init(spec, 11)
        state = activate_compression(spec, params, TernaryPolicy(delta=0.1, start_epoch=0), 0)
        (name,) = state.views
        assert params[name].data.size >= 10 ** 5
        observed = sparsity_report(state)[name]
        assert abs(observed - uniform_mass(np.sqrt(1.0 / fan_in), 0.1)) <= 0.03
