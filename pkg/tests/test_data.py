import numpy as np
import pytest
from scipy.stats import chisquare

from app.models.config import FactorConfig, HelixConfig
from app.utils.rng import make_rng, map_blocks
from latent_response.data import (
    Dataset,
    conditioned_indices,
    gen_factors,
    gen_helix,
    helix_distance,
    helix_points,
    read_csv,
    sample_conditioned,
    shuffle_split,
    standardize,
    strata,
    write_csv,
)
from latent_response.error_handler import DataError


def test_helix_is_deterministic_for_seed():
    config = HelixConfig(n=128, sigma=0.1, seed=7)
    assert gen_helix(config).equals(gen_helix(config))
    assert not gen_helix(config).equals(gen_helix(HelixConfig(n=128, sigma=0.1, seed=8)))


def test_noise_free_helix_lies_on_curve():
    dataset = gen_helix(HelixConfig(n=100, sigma=0.0, seed=1))
    expected = helix_points(dataset.labels[:, 0], dataset.labels[:, 1], HelixConfig())
    assert np.allclose(dataset.observations, expected)
    assert np.all(helix_distance(dataset.observations, HelixConfig()) < 1e-3)


def test_helix_labels():
    dataset = gen_helix(HelixConfig(n=500, seed=2))
    assert dataset.factor_cardinalities == [None, 2]
    assert set(np.unique(dataset.labels[:, 1])) == {0.0, 1.0}
    assert np.all(np.abs(dataset.labels[:, 0]) <= 1.0)


def test_factor_dataset_enumerates_all_combinations(factor_dataset):
    assert factor_dataset.n == 27
    assert factor_dataset.obs_dim == 32
    assert len({tuple(row) for row in factor_dataset.labels}) == 27


def test_factor_embedding_is_fixed_across_seeds():
    first = gen_factors(FactorConfig(cardinalities=[2, 3], embed_seed=3, seed=0))
    second = gen_factors(FactorConfig(cardinalities=[2, 3], embed_seed=3, seed=5))
    assert np.array_equal(first.observations, second.observations)


def test_conditioned_sampling_respects_fixed_factors(factor_dataset):
    rng = make_rng(0, "test")
    _, indices = sample_conditioned(factor_dataset, {0: 1.0, 2: 2.0}, 50, rng, return_indices=True)
    assert np.all(factor_dataset.labels[indices, 0] == 1.0)
    assert np.all(factor_dataset.labels[indices, 2] == 2.0)


def test_unmatched_assignment_is_reported():
    dataset = gen_factors(FactorConfig(cardinalities=[2, 2], repeats=1)).subset([0, 1])
    with pytest.raises(DataError) as info:
        conditioned_indices(dataset, {0: 1.0})
    assert "factor0=1.0" in str(info.value)


def test_strata_cover_all_rows(factor_dataset):
    groups = strata(factor_dataset, 1)
    assert len(groups) == 9
    assert sorted(np.concatenate([idx for _, idx in groups]).tolist()) == list(range(27))
    for fixed, idx in groups:
        assert set(fixed) == {0, 2}
        assert len(idx) == 3


def test_unlabeled_dataset_rejected_for_conditioning():
    with pytest.raises(DataError):
        strata(Dataset(np.zeros((4, 2))), 0)


def test_csv_round_trip(tmp_path, helix_dataset):
    path = str(tmp_path / "helix.csv")
    write_csv(path, helix_dataset)
    loaded = read_csv(path)
    assert np.array_equal(loaded.observations, helix_dataset.observations)
    assert np.array_equal(loaded.labels, helix_dataset.labels)
    assert loaded.factor_cardinalities == [None, 2]


def test_csv_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2\n1.0,2.0\n3.0,abc\n")
    with pytest.raises(DataError) as info:
        read_csv(str(path))
    assert ":3:" in str(info.value)


def test_standardize_statistics(helix_dataset):
    scaled, standardizer = standardize(helix_dataset)
    assert np.allclose(scaled.observations.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(scaled.observations.std(axis=0), 1.0)
    assert np.allclose(standardizer.inverse(scaled.observations), helix_dataset.observations)


def test_shuffle_split_partitions(helix_dataset):
    train, val, test = shuffle_split(helix_dataset, seed=3)
    assert (train.n, val.n, test.n) == (179, 26, 51)
    combined = np.concatenate([train.observations, val.observations, test.observations])
    assert sorted(map(tuple, combined)) == sorted(map(tuple, helix_dataset.observations))


def test_block_results_independent_of_workers():
    def block(rng, size):
        return float(rng.standard_normal(size).sum())

    serial = map_blocks(block, 1000, 5, "mc", 64, workers=1)
    parallel = map_blocks(block, 1000, 5, "mc", 64, workers=4)
    assert serial == parallel
    assert len(serial) == 16


def test_noise_free_factor_observations_are_injective():
    dataset = gen_factors(FactorConfig(cardinalities=[3, 4, 2], sigma=0.0, repeats=2))
    by_label = {}
    for row, label in zip(dataset.observations, dataset.labels):
        by_label.setdefault(tuple(label), set()).add(tuple(row))
    assert len(by_label) == 24
    # 同一组合的重复行完全相同，不同组合的观测互不相同
    assert all(len(rows) == 1 for rows in by_label.values())
    assert len(set().union(*by_label.values())) == 24


def test_csv_ragged_row_names_line(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("x1,x2,y1\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0\n")
    with pytest.raises(DataError) as info:
        read_csv(str(path))
    assert ":4:" in str(info.value)
    assert info.value.context["line"] == 4


def test_header_only_csv_round_trip(tmp_path):
    path = str(tmp_path / "empty.csv")
    write_csv(path, Dataset(np.zeros((0, 3)), np.zeros((0, 2)), [2, 3]))
    assert (tmp_path / "empty.csv").read_text() == "x1,x2,x3,y1,y2\n"
    loaded = read_csv(path)
    assert loaded.n == 0 and loaded.obs_dim == 3
    assert loaded.labels.shape == (0, 2)
    assert loaded.factor_cardinalities == [None, None]


def test_conditioned_sampling_is_uniform_over_matches(factor_dataset):
    matches = conditioned_indices(factor_dataset, {0: 1.0, 2: 2.0})
    assert matches.size == 3
    _, indices = sample_conditioned(factor_dataset, {0: 1.0, 2: 2.0}, 30000, make_rng(3, "test"),
                                    return_indices=True)
    counts = np.array([np.sum(indices == k) for k in matches])
    assert counts.sum() == 30000
    assert chisquare(counts).pvalue > 1e-3
