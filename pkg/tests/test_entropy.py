import numpy as np
import pytest
from conftest import fd_max_rel_err

from splitcomp import entropy as E
from splitcomp import layers as Ly
from splitcomp import tensor as T
from splitcomp.tensor import ParameterDomainError, ShapeError, Tensor

RNG = np.random.default_rng(3)


def test_standard_gaussian_center_mass():
    # erf oracle: Phi(0.5) - Phi(-0.5)
    assert E.probability_mass(0, 0.0, 1.0, "gaussian") == pytest.approx(0.38292, abs=1e-5)


def test_standard_logistic_center_mass():
    # sigmoid(0.5) - sigmoid(-0.5)
    want = 1 / (1 + np.exp(-0.5)) - 1 / (1 + np.exp(0.5))
    assert E.probability_mass(0, 0.0, 1.0, "logistic") == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(0.24492, abs=1e-5)


def test_mass_floor_and_domain():
    assert E.probability_mass(40, 0.0, 1.0, "gaussian") == E.P_MIN
    with pytest.raises(ParameterDomainError):
        E.probability_mass(0, 0.0, 0.0)


def test_quantize_train_noise_and_identity_gradient():
    z = T.parameter(RNG.normal(size=(2, 3, 4, 4)), "z")
    z_n = E.quantize_train(z, np.random.default_rng(0))
    assert np.all(np.abs(z_n.data - z.data) <= 0.5)
    T.sum_all(z_n).backward()
    assert np.array_equal(z.grad, np.ones_like(z.data))


def test_round_half_away_ties():
    x = np.array([0.5, -0.5, 2.5, -2.5, 1.4999])
    assert np.array_equal(E.round_half_away(x), [1, -1, 3, -3, 1])


def test_quantize_infer_clamps_to_alphabet():
    z = np.array([-300.0, -0.4, 0.6, 2.0e9])
    assert np.array_equal(E.quantize_infer(z, 64), [-64, 0, 1, 64])


def test_factorized_rate_gradient():
    prior = E.FactorizedPrior(3, family="logistic")
    prior.mu.data[:] = RNG.normal(size=3) * 0.3
    prior.log_s.data[:] = RNG.normal(size=3) * 0.2
    z = T.parameter(RNG.normal(size=(2, 3, 4, 4)), "z")
    err = fd_max_rel_err(lambda: prior.rate_bits(z), [z, prior.mu, prior.log_s])
    assert err < 1e-4


def test_factorized_channel_masses_cover_alphabet():
    prior = E.FactorizedPrior(4, family="gaussian")
    prior.log_s.data[:] = [0.0, 1.0, -1.0, 1.9]
    masses = prior.channel_masses()
    assert masses.shape == (4, 2 * prior.L + 1)
    assert np.all(masses.sum(axis=1) >= 1 - 1e-6)


def test_factorized_project_clamps_log_scale():
    prior = E.FactorizedPrior(2)
    prior.log_s.data[:] = [-100.0, 100.0]
    prior.project()
    assert np.all(prior.log_s.data >= E.LOG_S_MIN)
    assert np.all(prior.log_s.data <= E.LOG_S_MAX)


def _hyper(shape=(1, 3, 8, 8)):
    rng = np.random.default_rng(1)
    return E.build_hyperprior(shape[1], shape, 2, rng)


def test_hyperprior_infer_round_trip_yields_integer_symbols():
    hp = _hyper()
    z = Tensor(RNG.normal(size=(2, 3, 8, 8)) * 2)
    rt = hp.round_trip(z, E.QuantizerMode.INFER_ROUND)
    resid = rt.z_q.data - rt.means.data
    assert np.allclose(resid, np.round(resid))
    assert np.all(rt.scales.data >= E.SCALE_MIN)
    assert np.allclose(rt.z_h_q.data, np.round(rt.z_h_q.data))


def test_hyperprior_rate_gradient():
    hp = _hyper()
    z = T.parameter(RNG.normal(size=(1, 3, 8, 8)), "z")
    params = [z] + [p for _, p in hp.params()]

    def loss():
        rt = hp.round_trip(z, E.QuantizerMode.TRAIN_NOISE, np.random.default_rng(5))
        return hp.rate_bits(rt)

    # the rng is re-seeded per call so the noise draw is identical
    err = fd_max_rel_err(loss, params, samples=3)
    assert err < 1e-4


def test_hyperprior_train_mode_requires_rng():
    hp = _hyper()
    with pytest.raises(ValueError):
        hp.round_trip(Tensor(np.zeros((1, 3, 8, 8))), E.QuantizerMode.TRAIN_NOISE)


def test_hyperprior_rejects_wrong_decoder_width():
    rng = np.random.default_rng(0)
    enc = [Ly.Conv2d(3, 2, 3, stride=2, padding=1, rng=rng),
           Ly.Conv2d(2, 2, 3, stride=2, padding=1, rng=rng)]
    dec = [Ly.Upsample2x(), Ly.Upsample2x(),
           Ly.Conv2d(2, 5, 3, stride=1, padding=1, rng=rng)]  # needs 6 channels
    with pytest.raises(ShapeError):
        E.HyperpriorModel(3, enc, dec, probe_shape=(1, 3, 8, 8))


def test_hyperprior_spatial_extent_restriction():
    with pytest.raises(ShapeError):
        E.build_hyperprior(2, (1, 2, 6, 6), 2, np.random.default_rng(0))


def test_conditional_mass_validates_shapes_and_domain():
    x = Tensor(np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        E.conditional_gaussian_mass(x, Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 2))))
    with pytest.raises(ParameterDomainError):
        E.conditional_gaussian_mass(x, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))


def test_bits_from_mass_floors_tiny_masses():
    p = Tensor(np.array([1e-30, 0.5]))
    bits = E.bits_from_mass(p).item()
    assert bits == pytest.approx(24.0 + 1.0)  # floor at 2^-24 plus one bit
