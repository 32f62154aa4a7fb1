import numpy as np
import pytest

from wsvd.errors import ConfigError
from wsvd.fisher import (
    FisherScores, accumulate_fisher, collect_gradients, expected_gradient, fisher_from_gradients, rotate_fisher,
)
from wsvd.linalg import hadamard
from wsvd.model import CalibrationBatch, ModelConfig, generate_calibration, init_weights, sample_gradient

CFG = ModelConfig(embed_dim=32, head_dim=8, n_heads=4, n_layers=1, seed=2)


@pytest.fixture(scope="module")
def setup():
    return init_weights(CFG), generate_calibration(CFG, 6, 5)


def test_hand_computed_two_samples():
    g1 = np.array([[1.0, -2.0], [0.5, 0.0]])
    g2 = np.array([[3.0, 0.0], [-1.0, 2.0]])
    f = fisher_from_gradients([g1, g2])
    assert np.array_equal(f.scores, np.array([[5.0, 2.0], [0.625, 2.0]]))
    assert f.sample_count == 2
    assert np.array_equal(fisher_from_gradients([g1]).scores, g1 * g1)
    assert np.array_equal(fisher_from_gradients([np.zeros((2, 2))] * 3).scores, np.zeros((2, 2)))


def test_empty_batch_rejected():
    with pytest.raises(ConfigError):
        fisher_from_gradients([])


def test_scores_validated():
    with pytest.raises(ConfigError):
        FisherScores(np.array([[-1.0]]), 1)
    with pytest.raises(ConfigError):
        FisherScores(np.array([[np.nan]]), 1)


def test_single_sample_matches_squared_gradient(setup):
    w, batch = setup
    one = batch.subset([0])
    _, g = sample_gradient(w, *next(one.samples()))
    f = accumulate_fisher(w, one, "layers.0.wk")
    assert np.array_equal(f.scores, g.get("layers.0.wk") ** 2)
    assert np.array_equal(expected_gradient(w, one, "layers.0.wk"), g.get("layers.0.wk"))


def test_duplicated_sample_expected_gradient(setup):
    w, batch = setup
    dup = batch.subset([2, 2, 2, 2])
    single = expected_gradient(w, batch.subset([2]), "layers.0.wq")
    assert np.allclose(expected_gradient(w, dup, "layers.0.wq"), single, rtol=1e-15, atol=0)


def test_shuffle_is_bit_identical(setup):
    w, batch = setup
    f = accumulate_fisher(w, batch, "layers.0.wv")
    perm = np.random.default_rng(7).permutation(len(batch))
    g = accumulate_fisher(w, batch.subset(perm), "layers.0.wv")
    assert np.array_equal(f.scores, g.scores)


def test_consistency_with_partial_batches(setup):
    w, batch = setup
    full = accumulate_fisher(w, batch, "layers.0.wk").scores
    a = accumulate_fisher(w, batch.subset([0, 1, 2, 3]), "layers.0.wk").scores
    b = accumulate_fisher(w, batch.subset([4, 5]), "layers.0.wk").scores
    assert np.max(np.abs(full - (4 * a + 2 * b) / 6)) < 1e-12


def test_collect_gradients_matches_single_target(setup):
    w, batch = setup
    grads = collect_gradients(w, batch, ["layers.0.wq", "layers.0.wk"])
    f = fisher_from_gradients(grads["layers.0.wk"])
    assert np.array_equal(f.scores, accumulate_fisher(w, batch, "layers.0.wk").scores)


def test_rotated_identity_equals_plain(setup):
    w, batch = setup
    grads = collect_gradients(w, batch, ["layers.0.wk"])["layers.0.wk"]
    assert np.array_equal(rotate_fisher(grads, np.eye(32)).scores, fisher_from_gradients(grads).scores)


def test_rotated_hand_case():
    f = rotate_fisher([np.array([[1.0, 0.0], [0.0, 0.0]])], hadamard(2))
    assert np.allclose(f.scores, 0.5 * np.array([[1.0, 0.0], [1.0, 0.0]]), atol=1e-15)


def test_rotated_permutation(rng):
    grads = [rng.normal(size=(5, 3)) for _ in range(4)]
    perm = rng.permutation(5)
    p = np.eye(5)[perm]
    assert np.array_equal(rotate_fisher(grads, p).scores, fisher_from_gradients(grads).scores[perm])


def test_rotation_applies_per_sample(rng):
    grads = [rng.normal(size=(4, 3)) for _ in range(5)]
    s1 = hadamard(4)
    per_sample = rotate_fisher(grads, s1).scores
    expected = np.mean([(s1 @ g) ** 2 for g in grads], axis=0)
    assert np.allclose(per_sample, expected, atol=1e-14)
    # rotating the accumulated scores is a different quantity
    assert not np.allclose(per_sample, s1 @ fisher_from_gradients(grads).scores)


def test_non_orthogonal_rotation_rejected(rng):
    with pytest.raises(ConfigError, match="not orthogonal"):
        rotate_fisher([rng.normal(size=(2, 2))], np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_fisher_equals_diagonal_hessian_on_linear_probe(rng):
    # loss(w; x) = 0.5 * (x . w - t)^2 with residual fixed to +-1 at the evaluation point
    n, e = 200, 6
    x = rng.normal(size=(n, e))
    w = rng.normal(size=e)
    t = x @ w - rng.choice([-1.0, 1.0], size=n)

    def grad(wv):
        return ((x @ wv - t)[:, None] * x).mean(axis=0)

    per_sample = [((x[i] @ w - t[i]) * x[i])[None, :] for i in range(n)]
    fisher = fisher_from_gradients(per_sample).scores[0]
    h = 1e-3
    hess_diag = np.array([(grad(w + h * np.eye(e)[i])[i] - grad(w - h * np.eye(e)[i])[i]) / (2 * h) for i in range(e)])
    assert np.max(np.abs(fisher - hess_diag)) < 1e-8


def test_sidecar_and_head_slices(setup):
    w, batch = setup
    f = accumulate_fisher(w, batch, "layers.0.wk")
    assert f.sidecar(5) == {"sample_count": 6, "seed": 5, "target": "layers.0.wk"}
    assert np.array_equal(np.hstack([f.head(h, 8) for h in range(4)]), f.scores)
