import math

import numpy as np
import pytest

from dgmix import layers as L
from dgmix import model as M
from dgmix.exceptions import ShapeError, UsageError, ValidationError
from dgmix.gradcheck import grad_check_detail

SMALL = dict(n_domains=3, n_classes=4, conv1=2, conv2=3, fc1=8)


def small(seed=0, **kw):
    arch = M.Architecture(**{**SMALL, **kw.pop("arch", {})})
    return M.init_params(arch, seed, **kw)


def batch(seed, B=2, N=3, C=4):
    rng = np.random.default_rng(seed)
    images = rng.random((B, 1, 28, 28))
    y = L.onehot(rng.integers(0, C, B), C)
    d = M.indicator_weights(rng.integers(1, N + 1, B), N)
    return images, y, d


def fd_check(params, images, y, d, lam, switch, weights=None, max_entries=40, seed=0):
    def fun():
        parts, grads, _ = M.loss_and_grads(params, images, y, d, lam, switch, weights)
        return parts.total, grads

    return grad_check_detail(fun, params.arrays, 1e-5, max_entries=max_entries, seed=seed,
                             pattern=lambda: M.activation_pattern(params, images))


# ------------------------------------------------------------- architecture

def test_default_shapes_match_lenet():
    arch = M.Architecture()
    assert arch.flat_features == 800
    shapes = arch.shapes()
    assert shapes["conv1.weight"] == (20, 1, 5, 5)
    assert shapes["conv2.weight"] == (50, 20, 5, 5)
    assert shapes["fc1.weight"] == (800, 500)
    assert shapes["heads.weight"] == (5, 500, 10)
    assert shapes["branch.fc.weight"] == (50, 5)


def test_init_is_glorot_with_zero_biases():
    p = M.init_params(M.Architecture(), seed=3)
    bound = math.sqrt(6 / (25 + 500))
    assert np.abs(p["conv1.weight"]).max() <= bound
    assert np.abs(p["conv1.weight"]).max() > 0.9 * bound
    for k, v in p.arrays.items():
        if k.endswith(".bias") or k.startswith("branch.fc"):
            assert not v.any(), k


# --------------------------------------------------------------------- trunk

def test_trunk_zero_image_gives_zero_features():
    feats, _ = M.trunk_forward(np.zeros((2, 1, 28, 28)), small())
    assert feats.shape == (2, 8) and not feats.any()


def test_trunk_identical_images_identical_rows():
    x = np.random.default_rng(0).random((1, 1, 28, 28))
    feats, _ = M.trunk_forward(np.concatenate([x, x]), small())
    np.testing.assert_array_equal(feats[0], feats[1])


def test_trunk_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        M.trunk_forward(np.zeros((2, 1, 27, 27)), small())


# --------------------------------------------------------------------- heads

def test_identical_heads_identical_scores():
    p = small()
    p.arrays["heads.weight"][:] = p["heads.weight"][0]
    scores, _ = M.heads_forward(np.random.default_rng(1).random((4, 8)), p)
    for j in range(1, 3):
        np.testing.assert_array_equal(scores[:, j], scores[:, 0])


def test_zero_heads_zero_scores():
    scores, _ = M.heads_forward(np.ones((2, 8)), small(head_init="zeros"))
    assert not scores.any()


def test_heads_match_separate_affines():
    p = small(arch=dict(n_domains=2))
    f = np.random.default_rng(2).random((3, 8))
    scores, _ = M.heads_forward(f, p)
    for j in range(2):
        np.testing.assert_array_equal(scores[:, j], L.affine(f, p["heads.weight"][j], p["heads.bias"][j])[0])


# -------------------------------------------------------------------- branch

def test_zero_branch_gives_uniform_weights():
    w, _ = M.domain_branch_forward(np.random.default_rng(0).random((3, 1, 28, 28)), small())
    np.testing.assert_array_equal(w, np.full((3, 3), 1 / 3))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_branch_weights_on_simplex(seed):
    p = small(seed, branch_init="glorot")
    p.arrays["branch.fc.weight"] *= 50
    w, _ = M.domain_branch_forward(np.random.default_rng(seed).random((5, 1, 28, 28)), p)
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)


# ----------------------------------------------------------------------- mix

def test_mix_one_hot_selects_head():
    scores = np.random.default_rng(0).random((1, 3, 4))
    np.testing.assert_array_equal(M.mix(scores, np.array([[1.0, 0, 0]]), 0.0), scores[:, 0])


def test_mix_alpha_one_is_average():
    scores = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    for w in ([[1.0, 0.0]], [[0.3, 0.7]]):
        np.testing.assert_array_equal(M.mix(scores, np.array(w), 1.0), [[0.5, 0.5]])


def test_mix_blend_arithmetic():
    scores = np.array([[[4.0, 0.0], [0.0, 4.0]]])
    np.testing.assert_allclose(M.mix(scores, np.array([[1.0, 0.0]]), 0.25), [[3.5, 0.5]], atol=1e-15)


def test_mix_rejects_alpha_out_of_range():
    with pytest.raises(ValidationError):
        M.mix(np.zeros((1, 2, 2)), np.full((1, 2), 0.5), 1.5)
    with pytest.raises(ValidationError):
        M.draw_switches(np.random.default_rng(0), 3, -0.1)


def test_mix_switch_modes():
    rng = np.random.default_rng(4)
    scores, w = rng.random((3, 3, 4)), L.softmax_rows(rng.random((3, 3)))
    z = M.mix(scores, w, switch=[True, False, True])
    np.testing.assert_array_equal(z[0], M.mix(scores[:1], w[:1], 1.0)[0])
    np.testing.assert_array_equal(z[1], M.mix(scores[1:2], w[1:2], 0.0)[0])


def test_indicator_weights():
    np.testing.assert_array_equal(M.indicator_weights([1, 3], 3), [[1, 0, 0], [0, 0, 1]])
    np.testing.assert_array_equal(M.indicator_weights([1, 1], 1), [[1], [1]])
    with pytest.raises(ValidationError):
        M.indicator_weights([0, 2], 3)
    with pytest.raises(ValidationError):
        M.indicator_weights([4], 3)


# ---------------------------------------------------------------------- loss

def test_total_loss_lambda_zero_is_classification_only():
    rng = np.random.default_rng(0)
    z, w = rng.standard_normal((3, 4)), L.softmax_rows(rng.standard_normal((3, 2)))
    y, d = L.onehot([0, 1, 3], 4), L.onehot([0, 1, 1], 2)
    assert M.total_loss(z, y, w, d, 0.0) == L.cross_entropy(L.softmax_rows(z), y)


def test_total_loss_is_sum_of_parts():
    rng = np.random.default_rng(1)
    z, w = rng.standard_normal((3, 4)), L.softmax_rows(rng.standard_normal((3, 2)))
    y, d = L.onehot([0, 1, 3], 4), L.onehot([0, 1, 1], 2)
    independent = -np.mean(np.log(L.softmax_rows(z)[np.arange(3), [0, 1, 3]]))
    independent += 0.7 * -np.mean(np.log(w[np.arange(3), [0, 1, 1]]))
    assert abs(M.total_loss(z, y, w, d, 0.7) - independent) <= 1e-12


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(ValidationError):
        M.total_loss(np.zeros((1, 2)), L.onehot([0], 2), np.full((1, 2), 0.5), L.onehot([0], 2), -1.0)


def test_zero_init_loss_value():
    p = M.init_params(M.Architecture(), seed=0, head_init="zeros")
    rng = np.random.default_rng(0)
    images = rng.random((5, 1, 28, 28))
    y, d = L.onehot(rng.integers(0, 10, 5), 10), M.indicator_weights(np.arange(1, 6), 5)
    parts, _, _ = M.loss_and_grads(p, images, y, d, 0.5, np.zeros(5))
    assert abs(parts.total - (math.log(10) + 0.5 * math.log(5))) <= 1e-9
    assert abs(parts.total - 3.107304) < 5e-7


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("head_scope,branch_convs", [
    ("classifier", "shared"), ("fc1", "shared"), ("classifier", "separate"), ("fc1", "separate"),
])
def test_full_model_gradients(seed, head_scope, branch_convs):
    p = small(seed, branch_init="glorot", arch=dict(head_scope=head_scope, branch_convs=branch_convs))
    images, y, d = batch(seed)
    report = fd_check(p, images, y, d, 0.5, np.array([0.0, 1.0]), seed=seed)
    assert report.max_error < 1e-4, dict(report)


def test_branch_gradient_through_mixing_only():
    """lam = 0 and soft switch: the branch fc still learns, solely via mixing."""
    p = small(5, branch_init="glorot")
    images, y, d = batch(5)
    parts, grads, _ = M.loss_and_grads(p, images, y, d, 0.0, np.array([0.3, 0.6]))
    assert np.abs(grads["branch.fc.weight"]).max() > 0
    assert fd_check(p, images, y, d, 0.0, np.array([0.3, 0.6]), max_entries=None).max_error < 1e-4


def test_uniform_switch_and_zero_lambda_leave_branch_fc_untouched():
    p = small(6, branch_init="glorot")
    images, y, d = batch(6)
    _, grads, _ = M.loss_and_grads(p, images, y, d, 0.0, np.ones(2))
    assert not grads["branch.fc.weight"].any() and not grads["branch.fc.bias"].any()


def test_indicator_gradients_exactly_zero_for_absent_domain():
    p = small(7)
    rng = np.random.default_rng(7)
    images = rng.random((4, 1, 28, 28))
    y = L.onehot(rng.integers(0, 4, 4), 4)
    labels = np.array([1, 3, 1, 3])
    d = M.indicator_weights(labels, 3)
    _, grads, _ = M.loss_and_grads(p, images, y, d, 0.0, np.zeros(4), weights=d)
    assert np.all(grads["heads.weight"][1] == 0.0) and np.all(grads["heads.bias"][1] == 0.0)
    assert np.abs(grads["heads.weight"][0]).max() > 0


def test_indicator_head_gradient_uses_only_own_samples():
    p = small(8)
    rng = np.random.default_rng(8)
    images = rng.random((4, 1, 28, 28))
    y = L.onehot(rng.integers(0, 4, 4), 4)
    labels = np.array([1, 2, 1, 3])
    d = M.indicator_weights(labels, 3)
    _, full, _ = M.loss_and_grads(p, images, y, d, 0.0, np.zeros(4), weights=d)
    # removing a domain-2 sample only changes head 2 (up to the 1/B factor)
    keep = labels != 2
    _, part, _ = M.loss_and_grads(p, images[keep], y[keep], d[keep], 0.0, np.zeros(3), weights=d[keep])
    np.testing.assert_allclose(full["heads.weight"][0] * 4, part["heads.weight"][0] * 3, atol=1e-14)
    assert not part["heads.weight"][1].any()


def test_backward_rejects_mismatched_labels():
    p = small()
    images, y, d = batch(0)
    _, _, cache = M.forward(p, images, 0.0)
    with pytest.raises(UsageError):
        M.model_backward(p, cache, y[:1], d, 0.5)
    with pytest.raises(UsageError):
        M.model_backward(p, object(), y, d, 0.5)


# --------------------------------------------------------------- identities

@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_expectation_identity(alpha):
    rng = np.random.default_rng(9)
    scores, w = rng.standard_normal((6, 3, 4)), L.softmax_rows(rng.standard_normal((6, 3)))
    det = M.mix(scores, w, alpha)
    on, off = M.mix(scores, w, switch=np.ones(6)), M.mix(scores, w, switch=np.zeros(6))
    np.testing.assert_array_equal(alpha * on + (1 - alpha) * off, det)


def test_forward_replay_is_bitwise():
    p = small(1, branch_init="glorot")
    images, _, _ = batch(1, B=3)
    z1, w1, c1 = M.forward(p, images, np.array([0.0, 1.0, 0.0]))
    z2, w2, _ = M.forward(p, images, c1.switch)
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(w1, w2)


def test_duplicate_sample_invariance():
    p = small(2, branch_init="glorot")
    images, _, _ = batch(2, B=3)
    z, w, _ = M.forward(p, images, 0.25)
    dup = np.concatenate([images, images[1:2]])
    z2, w2, _ = M.forward(p, dup, 0.25)
    np.testing.assert_array_equal(z2[:3], z)
    np.testing.assert_array_equal(z2[3], z[1])
    np.testing.assert_array_equal(w2[3], w[1])


# ----------------------------------------------------------------- predict

def test_predict_one_hot_weights_follow_single_head():
    p = small(3)
    images, _, _ = batch(3, B=4)
    p.arrays["branch.fc.bias"][:] = [0.0, 1e6, 0.0]
    labels, w = M.predict(images, p, 0.0)
    feats, _ = M.trunk_forward(images, p)
    scores, _ = M.heads_forward(feats, p)
    np.testing.assert_array_equal(w, np.tile([0.0, 1.0, 0.0], (4, 1)))
    np.testing.assert_array_equal(labels, np.argmax(scores[:, 1], axis=1))


def test_predict_alpha_one_ignores_weights():
    p = small(4)
    images, _, _ = batch(4, B=4)
    a, _ = M.predict(images, p, 1.0)
    p.arrays["branch.fc.bias"][:] = [5.0, -3.0, 0.0]
    b, _ = M.predict(images, p, 1.0)
    np.testing.assert_array_equal(a, b)


def test_predict_invariant_to_constant_shift_of_scores():
    p = small(5, branch_init="glorot")
    images, _, _ = batch(5, B=6)
    a, _ = M.predict(images, p, 0.25)
    p.arrays["heads.bias"] += 3.0
    b, _ = M.predict(images, p, 0.25)
    np.testing.assert_array_equal(a, b)


def test_predict_chunking_does_not_change_results():
    p = small(6, branch_init="glorot")
    images, _, _ = batch(6, B=7)
    a = M.predict_scores(images, p, 0.25, chunk_size=3)
    b = M.predict_scores(images, p, 0.25, chunk_size=100)
    np.testing.assert_array_equal(a[0], b[0])


def test_predict_ties_go_to_lowest_class():
    labels, _ = M.predict(np.zeros((2, 1, 28, 28)), small(head_init="zeros"), 0.0)
    np.testing.assert_array_equal(labels, [0, 0])
