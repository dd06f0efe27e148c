import numpy as np
import pytest
from scipy import integrate, stats

from padflow.core import ShapeError
from padflow.layers import Squeeze, standard_normal_logp
from padflow.model import (
    FlowModel,
    ModelConfig,
    bits_per_dim,
    load_model,
    save_model,
)
from padflow.tensorio import TensorFormatError
from padflow.training import fd_param_gradients, gradient_errors


def identity_model(h=4, w=4, c=1, levels=2, depth=2, coupling="quad", squeeze=True):
    config = ModelConfig(h, w, c, levels=levels, depth=depth, coupling=coupling,
                         hidden=8, squeeze=squeeze, init="identity")
    return FlowModel(config)


def randomized_model(rng, h=4, w=4, c=1, levels=2, depth=2, coupling="quad",
                     hidden=8, squeeze=True, scale=0.1):
    config = ModelConfig(h, w, c, levels=levels, depth=depth, coupling=coupling,
                         hidden=hidden, squeeze=squeeze, init="identity")
    model = FlowModel(config, rng)
    for _, p in model.named_params():
        p += rng.normal(0.0, scale, size=p.shape)
    return model


class TestConstruction:
    def test_channel_validation(self):
        with pytest.raises(ShapeError):
            FlowModel(ModelConfig(4, 4, 1, levels=1, depth=1, coupling="quad", squeeze=False))
        with pytest.raises(ShapeError):
            FlowModel(ModelConfig(4, 4, 3, levels=1, depth=1, coupling="affine", squeeze=False))
        FlowModel(ModelConfig(4, 4, 1, levels=2, depth=1, coupling="quad", init="identity"))

    def test_odd_spatial_rejected_with_squeeze(self):
        with pytest.raises(ShapeError):
            FlowModel(ModelConfig(5, 4, 1, init="identity"))

    def test_unknown_coupling_rejected(self):
        with pytest.raises(ValueError):
            FlowModel(ModelConfig(4, 4, 1, coupling="cubic"))

    def test_latent_shapes_partition_input(self):
        model = identity_model(8, 8, 1, levels=2, depth=1)
        total = sum(np.prod(s) for s in model.latent_shapes)
        assert total == 8 * 8 * 1


class TestLogprob:
    def test_identity_model_scores_under_prior(self):
        rng = np.random.default_rng(0)
        model = identity_model()
        x = rng.normal(size=(3, 4, 4, 1))
        logp, zs = model.logprob(x)
        # identity layers leave only the squeezes, which preserve values
        squeezed, _ = Squeeze().forward(x)
        np.testing.assert_allclose(logp, standard_normal_logp(squeezed), atol=1e-12)
        flat_from_zs = np.concatenate([z.reshape(3, -1) for z in zs], axis=1)
        assert flat_from_zs.shape == (3, 16)

    def test_shape_mismatch_rejected(self):
        model = identity_model()
        with pytest.raises(ShapeError):
            model.logprob(np.zeros((2, 4, 4, 2)))

    def test_unbatched_input_gives_scalar(self):
        model = identity_model()
        logp, zs = model.logprob(np.zeros((4, 4, 1)))
        assert np.isscalar(logp)
        assert zs[0].ndim == 3

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        model = randomized_model(rng)
        x = rng.normal(size=(2, 4, 4, 1))
        a, _ = model.logprob(x)
        b, _ = model.logprob(x)
        np.testing.assert_array_equal(a, b)


class TestInverseAndSample:
    def test_inverse_of_logprob_latents(self):
        rng = np.random.default_rng(2)
        model = randomized_model(rng)
        x = rng.normal(size=(2, 4, 4, 1))
        _, zs = model.logprob(x)
        back = model.inverse(zs)
        assert np.max(np.abs(back - x)) < 1e-8

    def test_forward_after_inverse(self):
        rng = np.random.default_rng(3)
        model = randomized_model(rng)
        zs = [rng.normal(size=(2, *shape)) for shape in model.latent_shapes]
        x = model.inverse(zs)
        logp1, zs_back = model.logprob(x)
        for z, zb in zip(zs, zs_back):
            np.testing.assert_allclose(zb, z, atol=1e-8)
        logp2, _ = model.logprob(model.inverse(zs_back))
        np.testing.assert_allclose(logp1, logp2, atol=1e-8)

    def test_identity_model_zero_temperature_is_zero(self):
        model = identity_model()
        x = model.sample(2, temperature=0.0, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(x, 0.0)

    def test_identity_model_samples_standard_normal(self):
        model = identity_model(4, 4, 1, levels=1, depth=1)
        x = model.sample(1000, rng=np.random.default_rng(4))
        _, p = stats.normaltest(x.reshape(-1))
        assert p > 0.01
        assert x.reshape(-1).std() == pytest.approx(1.0, abs=0.05)

    def test_sample_logprob_finite(self):
        rng = np.random.default_rng(5)
        model = randomized_model(rng)
        x = model.sample(100, rng=rng)
        logp, _ = model.logprob(x)
        assert np.all(np.isfinite(logp))

    def test_temperature_shrinks_spread(self):
        rng = np.random.default_rng(6)
        model = randomized_model(rng)
        hot = model.sample(64, temperature=1.0, rng=np.random.default_rng(7))
        cold = model.sample(64, temperature=0.1, rng=np.random.default_rng(7))
        assert cold.std() < hot.std()


class TestGradients:
    def test_full_model_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        model = randomized_model(rng, hidden=4, depth=1)
        x = rng.normal(0.5, 0.2, size=(2, 4, 4, 1))
        model.nll_and_grads(x)
        analytic = {name: g.copy() for name, g in model.named_grads()}
        numeric = fd_param_gradients(model, x)
        errs = gradient_errors(analytic, numeric)
        assert max(errs.values()) < 1e-4

    def test_input_gradient_direction(self):
        # moving along -dNLL/dx must increase logp
        rng = np.random.default_rng(9)
        model = randomized_model(rng)
        x = rng.normal(size=(1, 4, 4, 1))
        trace = []
        logp, _ = model.logprob(x, trace)
        g = model.logprob_backward(trace, np.full(1, -1.0))
        step = 1e-3 * g / np.abs(g).max()
        logp2, _ = model.logprob(x - step)
        assert logp2.sum() > logp.sum()


class TestDensityNormalization:
    def test_one_pixel_model_integrates_to_one(self):
        rng = np.random.default_rng(10)
        config = ModelConfig(1, 1, 1, levels=1, depth=2, coupling="none",
                             hidden=4, squeeze=False, init="identity")
        model = FlowModel(config, rng)
        for _, p in model.named_params():
            p += rng.normal(0.0, 0.4, size=p.shape)

        def density(v):
            logp, _ = model.logprob(np.full((1, 1, 1, 1), v))
            return float(np.exp(logp[0]))

        total, err = integrate.quad(density, -60.0, 60.0, limit=200)
        assert total == pytest.approx(1.0, abs=1e-3)


class TestBitsPerDim:
    def test_uniform_density_is_eight_bits(self):
        assert bits_per_dim(0.0, 64) == pytest.approx(8.0)

    def test_halving_density_adds_one_bit(self):
        dims = 48
        base = bits_per_dim(-10.0, dims)
        halved = bits_per_dim(-10.0 - dims * np.log(2.0), dims)
        assert halved - base == pytest.approx(1.0)

    def test_gaussian_differential_entropy_conversion(self):
        # expected bpd of an exact iid N(0.5, sigma^2) model on its own data
        sigma = 0.1
        dims = 32
        expected_nll = dims * 0.5 * np.log(2 * np.pi * np.e * sigma ** 2)
        bpd = bits_per_dim(-expected_nll, dims)
        analytic = np.log2(sigma * np.sqrt(2 * np.pi * np.e)) + 8.0
        assert bpd == pytest.approx(analytic, abs=1e-6)

    def test_vectorized(self):
        out = bits_per_dim(np.array([0.0, -64 * np.log(2.0)]), 64)
        np.testing.assert_allclose(out, [8.0, 9.0])


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        model = randomized_model(rng)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(p1, model)
        reloaded = load_model(p1)
        save_model(p2, reloaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_reload_preserves_behaviour(self, tmp_path):
        rng = np.random.default_rng(12)
        model = randomized_model(rng)
        x = rng.normal(size=(2, 4, 4, 1))
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        reloaded = load_model(path)
        np.testing.assert_array_equal(reloaded.logprob(x)[0], model.logprob(x)[0])

    def test_actnorm_state_survives(self, tmp_path):
        rng = np.random.default_rng(13)
        config = ModelConfig(4, 4, 1, levels=1, depth=1, coupling="none", hidden=4)
        model = FlowModel(config, rng)
        model.initialize(rng.normal(2.0, 3.0, size=(32, 4, 4, 1)))
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        reloaded = load_model(path)
        x = rng.normal(size=(2, 4, 4, 1))
        np.testing.assert_array_equal(reloaded.logprob(x)[0], model.logprob(x)[0])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(TensorFormatError):
            load_model(path)

    def test_version_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(14)
        model = randomized_model(rng)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError):
            load_model(path)
