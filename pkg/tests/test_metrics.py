import warnings

import numpy as np
import pytest

from vct.datasets import FactorSpec
from vct.metrics import (ConceptPCA, DegenerateRepresentationWarning, ari, betavae_score, dci_disentanglement,
                         dci_from_importance, discretize, factorvae_score, label_map_to_masks, mig, msc,
                         table_representation)

SPEC = FactorSpec()


def factor_copy(labels):
    return labels.astype(np.float64)


def noise_representation(seed=0, dims=6):
    table = np.random.default_rng(seed).normal(size=(SPEC.num_combinations, dims))
    return table_representation(table, SPEC)


def full_grid():
    return SPEC.labels_from_index(np.arange(SPEC.num_combinations))


# PCA


def test_pca_recovers_one_dimensional_slot():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=8)
    direction /= np.linalg.norm(direction)
    coords = rng.normal(size=500)
    tokens = (coords[:, None] * direction)[:, None, :] + 3.0
    scores = ConceptPCA().fit_transform(tokens)[:, 0]
    assert np.allclose(np.abs(scores), np.abs(coords - coords.mean()), atol=1e-10)
    assert abs(abs(np.corrcoef(scores, coords)[0, 1]) - 1) < 1e-12


def test_pca_constant_slot_zero_with_warning():
    tokens = np.random.default_rng(0).normal(size=(100, 2, 4))
    tokens[:, 1] = 7.0
    with pytest.warns(DegenerateRepresentationWarning):
        scores = ConceptPCA().fit_transform(tokens)
    assert np.all(scores[:, 1] == 0)


def test_pca_projection_variance_is_top_eigenvalue():
    rng = np.random.default_rng(1)
    tokens = (rng.normal(size=(2000, 2)) * [3.0, 0.5]) @ rng.normal(size=(2, 5))
    scores = ConceptPCA().fit_transform(tokens[:, None, :])[:, 0]
    cov = np.cov(tokens.T)
    top = np.linalg.eigvalsh(cov)[-1]
    assert abs(scores.var(ddof=1) - top) / top < 1e-6


def test_pca_concat_mode_shape():
    tokens = np.random.default_rng(0).normal(size=(200, 3, 4))
    assert ConceptPCA(mode="concat").fit_transform(tokens).shape == (200, 3)
    with pytest.raises(ValueError):
        ConceptPCA(mode="bogus").fit(tokens)


# FactorVAE / beta-VAE


def test_factorvae_ladder():
    assert factorvae_score(factor_copy, SPEC, np.random.default_rng(0))["eval_accuracy"] == 1.0
    noise = factorvae_score(noise_representation(), SPEC, np.random.default_rng(0))["eval_accuracy"]
    assert abs(noise - 1 / 6) <= 0.1
    dup = factorvae_score(lambda l: np.repeat(l, 2, axis=1).astype(float), SPEC, np.random.default_rng(0))
    assert dup["eval_accuracy"] == 1.0


def test_factorvae_all_collapsed():
    with pytest.raises(ValueError):
        factorvae_score(lambda l: np.zeros((len(l), 3)), SPEC, np.random.default_rng(0))


def test_betavae_ladder():
    rng = np.random.default_rng(0)
    assert betavae_score(factor_copy, SPEC, rng, num_train=2000, num_eval=1000)["eval_accuracy"] == 1.0
    noise = betavae_score(noise_representation(), SPEC, rng, num_train=2000, num_eval=1000)["eval_accuracy"]
    assert abs(noise - 1 / 6) <= 0.1
    weights = np.array([1, 10, 100, 1000, 10000, 100000], dtype=float)
    entangled = betavae_score(lambda l: (l @ weights)[:, None], SPEC, rng, num_train=2000, num_eval=1000)
    assert entangled["eval_accuracy"] < 0.9


# MIG


def test_mig_ladder():
    labels = full_grid()
    padded = np.concatenate([labels.astype(float), np.zeros((len(labels), 3))], axis=1)
    assert abs(mig(padded, labels)["mig"] - 1.0) < 1e-6
    noise = np.random.default_rng(0).normal(size=(10000, 6))
    sample = labels[np.random.default_rng(1).choice(len(labels), 10000, replace=False)]
    assert mig(noise, sample)["mig"] < 0.05
    assert abs(mig(np.repeat(labels, 2, axis=1).astype(float), labels)["mig"]) < 1e-12


def test_mig_affine_invariance():
    labels = full_grid()
    reps = noise_representation(3)(labels) + labels[:, :1]
    a = mig(reps, labels)["mig"]
    b = mig(reps * np.array([3, -2, 0.5, 7, 1, 9]) + 11, labels)["mig"]
    assert a == pytest.approx(b, abs=1e-12)


def test_discretize_equal_occupancy():
    x = np.random.default_rng(0).normal(size=(2000, 2))
    binned = discretize(x, 20)
    counts = np.bincount(binned[:, 0], minlength=20)
    assert counts.min() == counts.max() == 100
    assert np.all(discretize(np.zeros((10, 1)))[:, 0] == 0)


# DCI


def test_dci_formula_cases():
    assert dci_from_importance(np.eye(4)) == pytest.approx(1.0)
    assert dci_from_importance(np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)
    assert dci_from_importance(np.array([[1.0, 1.0], [0.0, 1.0]])) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.warns(DegenerateRepresentationWarning):
        assert dci_from_importance(np.zeros((2, 2))) == 0.0


def test_dci_ladder():
    labels = SPEC.labels_from_index(np.random.default_rng(0).choice(SPEC.num_combinations, 5000, replace=False))
    assert dci_disentanglement(labels.astype(float), labels)["dci"] == pytest.approx(1.0, abs=1e-6)
    noise = np.random.default_rng(1).normal(size=labels.shape)
    assert dci_disentanglement(noise, labels)["dci"] < 0.1


def test_dci_dimension_permutation_invariance():
    labels = SPEC.labels_from_index(np.random.default_rng(0).choice(SPEC.num_combinations, 3000, replace=False))
    reps = labels + np.random.default_rng(2).normal(scale=0.3, size=labels.shape)
    a = dci_disentanglement(reps, labels)["dci"]
    b = dci_disentanglement(reps[:, ::-1], labels)["dci"]
    assert a == pytest.approx(b, abs=1e-3)


# ARI / MSC


def test_ari_cases():
    gt = np.zeros((8, 8), dtype=int)
    gt[:, :4] = 1
    gt[:, 4:] = 2
    gt[0] = 0
    assert ari(gt * 5, gt) == pytest.approx(1.0)
    assert abs(ari(np.ones_like(gt), gt)) < 1e-12
    rng = np.random.default_rng(0)
    gt3 = rng.integers(1, 4, size=(32, 32))
    scores = [ari(rng.integers(0, 3, size=gt3.shape), gt3) for _ in range(10)]
    assert abs(np.mean(scores)) < 0.05
    with pytest.raises(ValueError):
        ari(gt, np.zeros_like(gt))


def test_msc_cases():
    gt = np.zeros((8, 8), dtype=int)
    gt[2:6, 2:6] = 1
    masks = label_map_to_masks(gt)
    assert msc(masks, masks) == 1.0
    assert msc(np.zeros_like(masks), masks) == 0.0
    square = np.zeros((1, 8, 8), dtype=bool)
    square[0, 0:4, 0:4] = True
    half = np.zeros((1, 8, 8), dtype=bool)
    half[0, 0:4, 2:6] = True
    assert msc(half, square) == pytest.approx(1 / 3)


def test_metrics_in_range():
    labels = full_grid()
    rep = noise_representation(5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = mig(rep(labels), labels)["mig"]
    assert 0 <= m <= 1
