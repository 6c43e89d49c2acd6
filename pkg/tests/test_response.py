import numpy as np
import pytest

from app.models.config import InterventionSource
from latent_response.data import Dataset
from latent_response.error_handler import DataError
from latent_response.response import (
    NoiseMode,
    collapsed_dimensions,
    cds,
    cds_details,
    conditioned_response_matrix,
    expansion_diagnostic,
    expansion_scaling,
    intervene,
    latent_response,
    response_field,
    response_matrix,
    responsibility_matrix,
    sample_response_distribution,
    write_matrix_csv,
)
from latent_response.nn_core import Activation, DenseLayer, Mlp
from latent_response.vae import VaeModel, constant_decoder_vae, decode, identity_vae, linear_vae, supervised_linear_vae


def test_identity_response_is_identity(identity_model):
    z = np.array([[0.3, -1.1], [2.0, 0.5]])
    assert np.array_equal(latent_response(identity_model, z), z)
    assert np.array_equal(response_field(identity_model, z), np.zeros_like(z))


def test_constant_decoder_response_ignores_z():
    model = constant_decoder_vae(2, np.array([0.4, -0.2]))
    responses = latent_response(model, np.array([[0.0, 0.0], [3.0, -2.0]]))
    assert np.array_equal(responses[0], responses[1])
    assert np.allclose(response_field(model, np.array([1.0, 1.0])), [0.4 - 1.0, -0.2 - 1.0])


def test_intervene_replaces_single_coordinate():
    z = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(intervene(z, 1, 9.0), [1.0, 9.0, 3.0])
    assert np.array_equal(intervene(z, 0, 1.0), z)
    assert np.array_equal(z, [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        intervene(z, 3, 0.0)


def test_identity_response_matrix_is_identity(identity_model):
    matrix = response_matrix(identity_model, n_samples=10000, seed=0)
    assert np.max(np.abs(matrix.entries - np.eye(2))) < 0.05
    assert matrix.entries[0, 1] == 0.0 and matrix.entries[1, 0] == 0.0
    assert matrix.sample_count == 10000


def test_constant_decoder_response_matrix_is_zero():
    matrix = response_matrix(constant_decoder_vae(3, np.ones(3)), n_samples=500, seed=1)
    assert np.array_equal(matrix.entries, np.zeros((3, 3)))
    assert collapsed_dimensions(matrix) == [0, 1, 2]


def test_response_matrix_independent_of_workers(identity_model):
    serial = response_matrix(identity_model, n_samples=1000, seed=3, block_size=100, workers=1)
    parallel = response_matrix(identity_model, n_samples=1000, seed=3, block_size=100, workers=4)
    assert np.array_equal(serial.entries, parallel.entries)


def test_aggregate_posterior_source_requires_data(identity_model):
    with pytest.raises(DataError):
        response_matrix(identity_model, n_samples=10, source=InterventionSource.AGGREGATE_POSTERIOR)


def test_aggregate_posterior_source(identity_model):
    dataset = Dataset(np.random.default_rng(0).normal(size=(500, 2)))
    matrix = response_matrix(identity_model, n_samples=4000, source="aggregate_posterior",
                             dataset=dataset, seed=2)
    assert matrix.intervention_source is InterventionSource.AGGREGATE_POSTERIOR
    assert np.all(np.abs(np.diag(matrix.entries) - 1.0) < 0.1)


def test_collapsed_dimension_detected():
    # 解码器忽略第二个潜变量
    model = linear_vae(np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]]), log_sigma=-6.0)
    matrix = response_matrix(model, n_samples=2000, seed=0)
    assert collapsed_dimensions(matrix) == [1]


def test_cds_extremes():
    assert cds(np.eye(3)) == 1.0
    assert cds(np.ones((3, 4))) == 0.0
    assert cds(np.full((2, 5), 0.25)) == 0.0
    assert cds(np.eye(3), rescale=False) == 1.0


def test_cds_drops_dead_columns():
    entries = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    result = cds_details(entries)
    assert result.dropped_columns == [1]
    assert result.score == 1.0


def test_cds_rejects_degenerate_input():
    with pytest.raises(DataError):
        cds(np.zeros((3, 3)))
    with pytest.raises(DataError):
        cds(np.ones((1, 3)))
    with pytest.raises(DataError):
        cds(np.array([[1.0, -0.5], [0.0, 1.0]]))


def test_constructed_disentangled_model_scores_high(factor_dataset, disentangled_model):
    matrix = conditioned_response_matrix(disentangled_model, factor_dataset, n_samples=900, seed=0)
    assert matrix.entries.shape == (3, 3)
    assert np.all(matrix.sample_counts == 900)
    assert cds(matrix) >= 0.9


def test_posterior_width_adds_no_noise_floor(factor_dataset, disentangled_model):
    # σ = 1 的同一解耦模型：两次后验抽样共用噪声，非对应因子的响应仍接近零
    wide = supervised_linear_vae(factor_dataset, log_sigma=0.0)
    sharp = conditioned_response_matrix(disentangled_model, factor_dataset, n_samples=900, seed=0)
    noisy = conditioned_response_matrix(wide, factor_dataset, n_samples=900, seed=0)
    assert np.allclose(noisy.entries, sharp.entries, atol=1e-8)
    off_diagonal = noisy.entries[~np.eye(3, dtype=bool)]
    assert off_diagonal.max() < 0.25
    assert cds(noisy) >= 0.9


def test_rotation_lowers_cds(factor_dataset, disentangled_model):
    rotated = supervised_linear_vae(factor_dataset, rotation_deg=45.0)
    aligned = cds(conditioned_response_matrix(disentangled_model, factor_dataset, n_samples=900, seed=0))
    mixed = cds(conditioned_response_matrix(rotated, factor_dataset, n_samples=900, seed=0))
    assert aligned - mixed >= 0.2


def test_conditioned_matrix_requires_labels(identity_model):
    with pytest.raises(DataError):
        conditioned_response_matrix(identity_model, Dataset(np.zeros((5, 2))), n_samples=10)


def test_response_distribution_without_noise_is_deterministic(identity_model):
    samples = sample_response_distribution(identity_model, [0.5, -0.5], 20, noise_mode=NoiseMode.NONE)
    assert np.array_equal(samples.draws, np.tile([0.5, -0.5], (20, 1)))
    assert np.array_equal(samples.variance, np.zeros(2))


def test_response_distribution_matches_posterior_width():
    model = identity_vae(2, log_sigma=np.log(0.5))
    samples = sample_response_distribution(model, [0.0, 1.0], 20000, seed=4)
    assert samples.draws.shape == (20000, 2)
    assert np.allclose(samples.mean, [0.0, 1.0], atol=0.02)
    assert np.allclose(samples.variance, 0.25, atol=0.02)


def test_expansion_terms_sum_to_s_hat(identity_model):
    report = expansion_diagnostic(identity_model, np.array([0.2, -0.4]), np.array([0.1, 0.05]))
    assert np.allclose(report.term1 + report.term2 + report.term3 + report.residual, report.s_hat)
    assert report.residual_norm < 1e-8
    assert np.allclose(report.epsilon, [0.1, 0.05])


def test_expansion_remainder_is_second_order():
    # 恒等编码器 + sigmoid 解码器

    encoder = Mlp([DenseLayer(np.vstack([np.eye(2), np.zeros((2, 2))]), np.concatenate([np.zeros(2), -3 * np.ones(2)]))])
    decoder = Mlp([DenseLayer(np.array([[1.5, 0.3], [-0.4, 1.2]]), np.array([0.1, -0.2]), Activation.SIGMOID)])
    model = VaeModel(encoder, decoder, 2)
    x = np.array([0.6, 0.4])
    full, half, ratio = expansion_scaling(model, x, np.array([0.2, -0.1]))
    assert full > half > 0
    assert 2.0 <= ratio <= 8.0


def test_expansion_remainder_second_order_off_manifold():
    # 非线性编码器、x 不在解码器像集上：g(s) − x 不为零
    encoder = Mlp([
        DenseLayer(np.array([[0.9, -0.5], [0.4, 1.1]]), np.array([0.2, -0.1]), Activation.SIGMOID),
        DenseLayer(np.vstack([np.array([[2.0, 0.5], [-1.0, 1.5]]), np.zeros((2, 2))]),
                   np.concatenate([np.zeros(2), -3 * np.ones(2)])),
    ])
    decoder = Mlp([DenseLayer(np.array([[1.5, 0.3], [-0.4, 1.2]]), np.array([0.1, -0.2]), Activation.SIGMOID)])
    model = VaeModel(encoder, decoder, 2)
    x = np.array([1.4, -0.7])
    report = expansion_diagnostic(model, x, np.array([0.2, -0.1]))
    assert np.linalg.norm(decode(model, report.s) - x) > 0.5
    assert np.allclose(report.term1 + report.term2 + report.term3 + report.residual, report.s_hat)
    assert not np.allclose(report.term2, report.term2_linear)
    full, half, ratio = expansion_scaling(model, x, np.array([0.2, -0.1]))
    assert full > half > 0
    assert 2.0 <= ratio <= 8.0


def test_responsibility_for_constructed_model(factor_dataset, disentangled_model):
    matrix = responsibility_matrix(disentangled_model, factor_dataset, alpha=0.01)
    assert matrix.entries.shape == (3, 3)
    assert np.all(np.argmax(matrix.entries, axis=1) == [0, 1, 2])
    assert np.allclose(matrix.entries.sum(axis=1), 1.0)
    assert cds(matrix) > 0.8


def test_responsibility_on_pure_noise_latents():
    rng = np.random.default_rng(6)
    labels = np.stack([rng.integers(0, 3, size=512), rng.integers(0, 4, size=512)], axis=1)
    dataset = Dataset(rng.normal(size=(512, 4)), labels, [3, 4])
    matrix = responsibility_matrix(identity_vae(4), dataset, alpha=0.01)
    assert np.max(matrix.raw_importance) < 0.2


def test_responsibility_constant_factor_is_zero_row(identity_model):
    rng = np.random.default_rng(1)
    labels = np.stack([np.zeros(50), rng.integers(0, 2, size=50)], axis=1)
    dataset = Dataset(rng.normal(size=(50, 2)), labels, [1, 2])
    matrix = responsibility_matrix(identity_model, dataset)
    assert matrix.degenerate_factors == [0]
    assert np.array_equal(matrix.entries[0], np.zeros(2))


def test_matrix_csv_layout(tmp_path):
    path = tmp_path / "m.csv"
    write_matrix_csv(str(path), np.array([[1.0, 0.5]]), ["y1"], ["z1", "z2"])
    assert path.read_text() == ",z1,z2\ny1,1,0.5\n"
