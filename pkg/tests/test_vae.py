import numpy as np
import pytest

from app.models.config import TrainConfig
from latent_response.data import Dataset, Standardizer
from latent_response import vae as vae_module
from latent_response.error_handler import EXIT_NUMERICAL, DataError, ModelError, NumericalError, TrainingDivergedError
from latent_response.vae import (
    LOG_SIGMA_MIN,
    constant_decoder_vae,
    create_model,
    decode,
    elbo_loss,
    encode,
    identity_vae,
    kl_divergence,
    load_checkpoint,
    reconstruction_mse,
    reparameterize,
    save_checkpoint,
    train,
)


def _small_model(obs_dim=3, latent_dim=2, seed=0, beta=0.5, standardizer=None):
    config = TrainConfig(latent_dim=latent_dim, hidden=[6, 5], seed=seed, beta=beta)
    return create_model(obs_dim, config, standardizer)


def test_encode_shapes_and_clamp(identity_model):
    post = encode(identity_model, np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert post.mu.shape == (2, 2)
    assert np.all(post.log_sigma >= LOG_SIGMA_MIN)


def test_identity_pair_reconstructs(identity_model):
    x = np.array([0.7, -1.2])
    assert np.array_equal(decode(identity_model, encode(identity_model, x).mu), x)


def test_kl_of_standard_normal_is_zero():
    assert kl_divergence(np.zeros(3), np.zeros(3)) == 0.0
    assert kl_divergence(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def test_reparameterize_adds_scaled_noise(identity_model):
    post = encode(identity_model, np.zeros(2))
    z = reparameterize(post, np.array([1.0, -1.0]))
    assert np.allclose(z, post.sigma * np.array([1.0, -1.0]))


def test_decode_rejects_wrong_dimension(identity_model):
    with pytest.raises(DataError):
        decode(identity_model, np.zeros(3))


def test_elbo_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 3))
    model = _small_model(standardizer=Standardizer.fit(x))
    noise = rng.normal(size=(6, 2))
    _, grads = elbo_loss(model, x, noise=noise)
    h = 1e-4
    for param, grad in zip(model.parameters(), grads):
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + h
            model.mark_updated()
            plus, _ = elbo_loss(model, x, noise=noise)
            param[idx] = original - h
            model.mark_updated()
            minus, _ = elbo_loss(model, x, noise=noise)
            param[idx] = original
            model.mark_updated()
            numeric[idx] = (plus - minus) / (2 * h)
        assert np.max(np.abs(grad - numeric) / np.maximum(1.0, np.abs(grad) + np.abs(numeric))) < 1e-5


def test_train_is_deterministic_and_does_not_mutate_input():
    rng = np.random.default_rng(0)
    dataset = Dataset(rng.normal(size=(40, 3)))
    model = _small_model(standardizer=Standardizer.fit(dataset.observations))
    before = model.copy()
    config = TrainConfig(steps=15, batch_size=8, latent_dim=2, hidden=[6, 5], seed=4)
    first = train(model, dataset, config)
    second = train(model, dataset, config)
    assert model.same_weights(before)
    assert first.model.same_weights(second.model)
    assert first.losses == second.losses
    assert len(first.losses) == 15


def test_zero_steps_returns_initialization():
    dataset = Dataset(np.random.default_rng(1).normal(size=(10, 3)))
    model = _small_model()
    result = train(model, dataset, TrainConfig(steps=0, latent_dim=2, hidden=[6, 5]))
    assert result.model.same_weights(model)
    assert result.final_loss is None


def test_train_rejects_dimension_mismatch():
    with pytest.raises(DataError):
        train(_small_model(obs_dim=3), Dataset(np.zeros((10, 4))), TrainConfig(steps=1, batch_size=2))


def test_training_reduces_loss():
    rng = np.random.default_rng(2)
    t = rng.uniform(-1, 1, size=200)
    dataset = Dataset(np.stack([t, 2 * t, -t], axis=1))
    model = _small_model(standardizer=Standardizer.fit(dataset.observations), beta=0.1)
    result = train(model, dataset, TrainConfig(steps=400, batch_size=32, lr=1e-2, beta=0.1,
                                               latent_dim=2, hidden=[6, 5]))
    assert np.mean(result.losses[-20:]) < np.mean(result.losses[:20])
    assert reconstruction_mse(result.model, dataset.observations) < reconstruction_mse(model, dataset.observations)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    x = np.random.default_rng(5).normal(size=(20, 3)) * 3.7 + 1.1
    model = _small_model(standardizer=Standardizer.fit(x), seed=9)
    path = str(tmp_path / "model.json")
    save_checkpoint(path, model, steps_trained=12, final_loss=0.123456789012345678)
    loaded, checkpoint = load_checkpoint(path)
    assert loaded.same_weights(model)
    assert loaded.latent_dim == 2 and loaded.beta == model.beta and loaded.seed == 9
    assert checkpoint.steps_trained == 12
    assert checkpoint.final_loss == 0.123456789012345678
    save_checkpoint(str(tmp_path / "again.json"), loaded, 12, checkpoint.final_loss)
    assert (tmp_path / "model.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_load_rejects_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"latent_dim": 2}')
    with pytest.raises(ModelError):
        load_checkpoint(str(path))
    with pytest.raises(ModelError):
        load_checkpoint(str(tmp_path / "missing.json"))


def test_kl_is_non_negative_on_random_posteriors():
    rng = np.random.default_rng(11)
    for _ in range(200):
        d = int(rng.integers(1, 6))
        mu = rng.normal(0.0, 3.0, size=d)
        log_sigma = rng.uniform(LOG_SIGMA_MIN, 3.0, size=d)
        assert kl_divergence(mu, log_sigma) >= -1e-12
    batch = kl_divergence(rng.normal(size=(50, 4)), rng.uniform(-2.0, 2.0, size=(50, 4)))
    assert batch.shape == (50,)
    assert np.all(batch > 0)


def test_zero_beta_has_no_kl_gradient():
    # 常数解码器：重构项与编码器无关，编码器梯度只来自 KL 项
    model = constant_decoder_vae(2, np.array([0.3, -0.1]), log_sigma=0.5)
    x = np.array([[1.0, -2.0], [0.5, 0.25]])
    noise = np.array([[0.2, -0.3], [1.1, 0.4]])
    model.beta = 1.0
    _, with_kl = elbo_loss(model, x, noise=noise)
    model.beta = 0.0
    loss, without_kl = elbo_loss(model, x, noise=noise)
    encoder_count = len(model.encoder.parameters())
    assert any(np.any(g != 0) for g in with_kl[:encoder_count])
    assert all(np.all(g == 0) for g in without_kl[:encoder_count])
    assert loss == pytest.approx(0.5 * np.mean(np.sum((x - [0.3, -0.1]) ** 2, axis=1)))


def test_reparameterized_samples_match_posterior_moments():
    model = identity_vae(2, log_sigma=np.log(0.4))
    post = encode(model, np.tile([0.3, -1.2], (40000, 1)))
    z = reparameterize(post, np.random.default_rng(8).standard_normal((40000, 2)))
    assert np.allclose(z.mean(axis=0), [0.3, -1.2], atol=0.01)
    assert np.allclose(z.var(axis=0), 0.16, atol=0.005)


def test_divergence_keeps_partial_trace(monkeypatch):
    rng = np.random.default_rng(0)
    dataset = Dataset(rng.normal(size=(40, 3)))
    model = _small_model(standardizer=Standardizer.fit(dataset.observations))
    config = TrainConfig(steps=6, batch_size=8, latent_dim=2, hidden=[6, 5], seed=4)
    reference = train(model, dataset, config).losses
    calls = []

    def failing_loss(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise NumericalError("损失不是有限数: nan")
        return elbo_loss(*args, **kwargs)

    monkeypatch.setattr(vae_module, "elbo_loss", failing_loss)
    with pytest.raises(TrainingDivergedError) as info:
        train(model, dataset, config)
    assert info.value.step == 3
    assert info.value.trace == reference[:2]
    assert info.value.exit_code == EXIT_NUMERICAL


def test_resumed_training_draws_fresh_batches():
    rng = np.random.default_rng(0)
    dataset = Dataset(rng.normal(size=(40, 3)))
    model = _small_model(standardizer=Standardizer.fit(dataset.observations))
    config = TrainConfig(steps=4, batch_size=8, latent_dim=2, hidden=[6, 5], seed=4)
    fresh = train(model, dataset, config)
    resumed = train(model, dataset, config, start_step=4)
    again = train(model, dataset, config, start_step=4)
    assert resumed.losses != fresh.losses
    assert resumed.losses == again.losses
    with pytest.raises(DataError):
        train(model, dataset, config, start_step=-1)
