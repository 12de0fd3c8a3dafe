import numpy as np
import pytest

from dpgs.core import Category, init_from_pointcloud
from dpgs.deformation import DELTA_DIM, HEAD_SCALE, LABEL_TIME, DeformationField
from dpgs.hexplane import PLANE_AXES, HexPlaneEncoder
from dpgs.pipeline import render_all

from scenes import random_camera, random_field, random_scene

BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def _small_field(seed=0, trained=True):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 12)
    return scene, random_field(rng, scene, trained=trained, seed=seed)


# -- encoder ------------------------------------------------------------------------

def test_zero_planes_give_zero_features():
    enc = HexPlaneEncoder(BOUNDS, (4, 8), 3)
    for level in enc.planes:
        level[...] = 0.0
    assert not enc(np.random.default_rng(0).uniform(-1, 1, (5, 3)), 0.3).any()


def test_grid_node_returns_node_product():
    rng = np.random.default_rng(1)
    enc = HexPlaneEncoder(BOUNDS, (5,), 2, rng)
    level = enc.planes[0]
    level[...] = rng.uniform(0.5, 1.5, level.shape)
    idx = np.array([1, 3, 2, 4])            # grid node (i_x, i_y, i_z, i_t) on a 5-node axis
    coords01 = idx / 4.0
    mu = BOUNDS[0] + coords01[:3] * (BOUNDS[1] - BOUNDS[0])
    expected = np.ones(2)
    for p, (a, b) in enumerate(PLANE_AXES):
        expected *= level[p, idx[a], idx[b]]
    np.testing.assert_allclose(enc(mu[None], coords01[3])[0], expected, rtol=1e-12)


def test_cell_centre_is_corner_mean():
    rng = np.random.default_rng(2)
    enc = HexPlaneEncoder(BOUNDS, (3,), 2, rng)
    level = enc.planes[0]
    level[...] = 1.0
    level[0] = rng.uniform(size=level[0].shape)   # only the (x, y) plane varies
    coords01 = np.array([0.25, 0.75, 0.0, 0.0])   # centre of cell (0, 1) in x-y
    mu = BOUNDS[0] + coords01[:3] * (BOUNDS[1] - BOUNDS[0])
    corner_mean = level[0, 0:2, 1:3].mean(axis=(0, 1))
    np.testing.assert_allclose(enc(mu[None], 0.0)[0], corner_mean, rtol=1e-12)


# -- branches ------------------------------------------------------------------------

def test_bg_branch_is_zero():
    scene, field = _small_field()
    assert not field.deform_branch(Category.BG, scene.mu, 0.4).any()


def test_zero_initialised_decoders_give_zero_delta():
    scene, field = _small_field(trained=False)
    for c in (Category.OBJ, Category.HAND):
        assert not field.deform_branch(c, scene.mu, 0.4).any()
    assert not field.soft_gate(scene, 0.4).any()


def test_decoder_matches_finite_difference_in_features():
    scene, field = _small_field(3)
    dec = field.decoders[Category.OBJ]
    feats = field.encode(scene.mu, 0.3)
    w = np.random.default_rng(3).normal(size=(len(feats), DELTA_DIM))
    out, acts = dec.forward(feats)
    dx, _ = dec.backward(w, acts, "dec_obj")
    h = 1e-6
    for i, j in [(0, 0), (3, 5), (7, feats.shape[1] - 1)]:
        f = feats.copy()
        f[i, j] += h
        up = np.sum(dec(f) * w)
        f[i, j] -= 2 * h
        down = np.sum(dec(f) * w)
        assert (up - down) / (2 * h) == pytest.approx(dx[i, j], rel=1e-3, abs=1e-6)


# -- gating -------------------------------------------------------------------------------

def _with_probs(scene, probs):
    # -1e4 underflows to an exact zero probability
    p = np.asarray(probs, float)
    logits = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -1e4)
    return scene.replace(cat_logits=np.broadcast_to(logits, scene.cat_logits.shape).copy())


def _zero_head(field):
    field.head.weights[-1][...] = 0.0
    field.head.biases[-1][...] = 0.0


def test_soft_gate_one_hot_cases():
    scene, field = _small_field(4)
    _zero_head(field)
    t = 0.6
    assert not field.soft_gate(_with_probs(scene, [1, 0, 0]), t).any()
    np.testing.assert_array_equal(field.soft_gate(_with_probs(scene, [0, 1, 0]), t),
                                  field.deform_branch(Category.OBJ, scene.mu, t))
    mix = field.soft_gate(_with_probs(scene, [0, 0.5, 0.5]), t)
    mean = 0.5 * (field.deform_branch(Category.OBJ, scene.mu, t) + field.deform_branch(Category.HAND, scene.mu, t))
    np.testing.assert_allclose(mix, mean, atol=1e-12)


def test_soft_gate_linear_in_probabilities():
    scene, field = _small_field(5)
    _zero_head(field)
    rng = np.random.default_rng(5)
    p1, p2 = rng.dirichlet(np.ones(3), len(scene)), rng.dirichlet(np.ones(3), len(scene))
    lam = 0.3
    s = lambda p: field.soft_gate(scene.replace(cat_logits=np.log(p)), 0.2)
    np.testing.assert_allclose(s(lam * p1 + (1 - lam) * p2), lam * s(p1) + (1 - lam) * s(p2), atol=1e-6)


def test_soft_equals_hard_at_vertices():
    scene, field = _small_field(6)
    _zero_head(field)
    labels = np.random.default_rng(6).integers(0, 3, len(scene))
    one_hot = scene.replace(cat_logits=np.log(np.clip(np.eye(3)[labels], 1e-300, None)))
    np.testing.assert_allclose(field.soft_gate(one_hot, 0.8), field.hard_gate(one_hot, 0.8), atol=1e-12)


def test_hard_gate_routing_and_isolation():
    scene, field = _small_field(7)
    _zero_head(field)
    labels = np.arange(len(scene)) % 3
    sc = scene.replace(cat_logits=np.log(np.eye(3)[labels] * 0.98 + 0.01))
    t = 0.25
    res = field.forward(sc.mu, sc.cat_logits, t, "hard")
    assert not res.delta[labels == 0].any()
    obj = labels == 1
    np.testing.assert_array_equal(res.delta[obj], field.deform_branch(Category.OBJ, sc.mu, t)[obj])
    before = res.delta[obj].copy()
    for w in field.decoders[Category.HAND].weights:
        w += 0.3
    after = field.forward(sc.mu, sc.cat_logits, t, "hard").delta[obj]
    assert np.array_equal(before, after)


def test_hard_gate_bg_gets_no_decoder_gradient():
    scene, field = _small_field(8)
    _zero_head(field)
    sc = _with_probs(scene, [0.9, 0.05, 0.05])
    res = field.forward(sc.mu, sc.cat_logits, 0.5, "hard")
    grads, _, _ = field.backward(res, np.random.default_rng(8).normal(size=res.delta.shape))
    for name, g in grads.items():
        if name.startswith("dec_"):
            assert not g.any(), name


def test_hard_labels_do_not_depend_on_time():
    scene, field = _small_field(11)
    rng = np.random.default_rng(11)
    field.head.weights[-1][...] = rng.normal(0, 30.0, field.head.weights[-1].shape)
    for level in field.encoder.planes:
        level[...] = rng.uniform(0.2, 1.8, level.shape)
    # centre the stored logits on the head's offset at t = 0.5 so labels sit near a decision boundary
    offset = field.update_probs(scene.replace(cat_logits=np.zeros_like(scene.cat_logits)), 0.5)
    sc = scene.replace(cat_logits=rng.normal(0, 1e-3, offset.shape) - offset)
    soft = [field.forward(sc.mu, sc.cat_logits, t, "soft").labels for t in (0.0, 0.5, 1.0)]
    assert any(not np.array_equal(soft[0], s) for s in soft[1:])
    hard = [field.forward(sc.mu, sc.cat_logits, t, "hard") for t in (0.0, 0.5, 1.0)]
    for res in hard[1:]:
        assert np.array_equal(res.labels, hard[0].labels)
        assert np.array_equal(res.probs, hard[0].probs)
    np.testing.assert_array_equal(hard[0].probs, field.forward(sc.mu, sc.cat_logits, LABEL_TIME, "soft").probs)


def test_reused_hard_labels_match_fresh_evaluation():
    scene, field = _small_field(14)
    first = field.forward(scene.mu, scene.cat_logits, 0.2, "hard")
    fresh = field.forward(scene.mu, scene.cat_logits, 0.9, "hard")
    reused = field.forward(scene.mu, scene.cat_logits, 0.9, "hard", labels_from=first)
    np.testing.assert_array_equal(reused.probs, fresh.probs)
    np.testing.assert_array_equal(reused.delta, fresh.delta)
    d_delta = np.random.default_rng(14).normal(size=fresh.delta.shape)
    g_fresh, mu_fresh, _ = field.backward(fresh, d_delta)
    g_reused, mu_reused, _ = field.backward(reused, d_delta)
    np.testing.assert_array_equal(mu_reused, mu_fresh)
    for k in g_fresh:
        np.testing.assert_array_equal(g_reused[k], g_fresh[k])


def test_hard_probability_path_matches_finite_difference():
    scene, field = _small_field(12)
    field.head.weights[-1][...] = np.random.default_rng(12).normal(0, 1.0, field.head.weights[-1].shape)
    w = np.random.default_rng(13).normal(size=(len(scene), 3))
    t = 0.6

    def objective(mu):
        return float(np.sum(w * field.forward(mu, scene.cat_logits, t, "hard").probs))

    res = field.forward(scene.mu, scene.cat_logits, t, "hard")
    grads, d_mu, _ = field.backward(res, np.zeros_like(res.delta), w)
    eps = 1e-6
    for i, j in [(0, 0), (3, 1), (7, 2)]:
        mu = scene.mu.copy()
        mu[i, j] += eps
        hi = objective(mu)
        mu[i, j] -= 2 * eps
        fd = (hi - objective(mu)) / (2 * eps)
        assert fd == pytest.approx(d_mu[i, j], rel=1e-4, abs=1e-9)
    level = field.encoder.planes[0]
    g = grads["enc.level0"]
    for idx in list(zip(*np.nonzero(g)))[:4]:
        old = level[idx]
        level[idx] = old + eps
        hi = objective(scene.mu)
        level[idx] = old - eps
        lo = objective(scene.mu)
        level[idx] = old
        assert (hi - lo) / (2 * eps) == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


def test_update_probs():
    scene, field = _small_field(9, trained=False)
    np.testing.assert_allclose(field.update_probs(scene, 0.5), scene.cat_logits)
    uniform = scene.replace(cat_logits=np.zeros_like(scene.cat_logits))
    # a logit-space offset of (10, 0, 0) on the uniform prior
    field.head.biases[-1][...] = np.array([10.0, 0, 0]) / HEAD_SCALE
    logits = field.update_probs(uniform, 0.5)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(p[:, 0], 1 / (1 + 2 * np.exp(-10)), rtol=1e-12)
    assert p[0, 0] > 0.9999
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_unknown_mode_rejected():
    scene, field = _small_field()
    with pytest.raises(ValueError):
        field.forward(scene.mu, scene.cat_logits, 0.0, "medium")


def test_counters_track_gating_calls():
    scene, field = _small_field()
    field.soft_gate(scene, 0.1)
    field.hard_gate(scene, 0.1)
    field.hard_gate(scene, 0.2)
    assert (field.soft_calls, field.hard_calls) == (1, 2)


# -- rendering through the field ------------------------------------------------------------

def test_background_render_time_invariant_under_hard_gating():
    rng = np.random.default_rng(10)
    scene = random_scene(rng, 15)
    scene = scene.replace(cat_logits=np.tile([5.0, 0.0, 0.0], (15, 1)))
    field = random_field(rng, scene)
    cam = random_camera(rng, 24)
    a = render_all(scene, field, cam, 0.0, "hard")
    b = render_all(scene, field, cam, 0.7, "hard")
    for key in ("composite", Category.BG):
        assert np.array_equal(a[key].image, b[key].image)
        assert np.array_equal(a[key].brightness_raw, b[key].brightness_raw)


def test_zero_init_render_equals_static_render():
    rng = np.random.default_rng(11)
    scene = init_from_pointcloud(rng.uniform(-0.3, 0.3, (30, 3)) + [0, 0, 3], rng.uniform(size=(30, 3)))
    field = DeformationField(np.array([[-1, -1, 2], [1, 1, 4.0]]), (4, 6), 4, 8, 8, 8)
    cam = random_camera(rng, 24)
    deformed = render_all(scene, field, cam, 0.5, "soft")["composite"].image
    static = render_all(scene, None, cam, 0.5, "soft")["composite"].image
    assert np.array_equal(deformed, static)
