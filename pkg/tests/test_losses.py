import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_batch, random_params, rel_err, tiny_dims, unit_rows
from parclip.augment import par_augment
from parclip.losses import (
    CleanClipConfig,
    DegenerateBatchWarning,
    ParLossConfig,
    cleanclip_objective,
    clip_loss,
    clip_objective,
    embedding_distance,
    embedding_distance_grad,
    par_objective,
    pert_loss,
    uniaug_loss,
)
from parclip.model import encode_images, snapshot
from parclip.numerics import Rng, finite_diff_grad

N_INSTANCES = 20
H = 1e-5


def flat_grads(params, grads):
    return np.concatenate([grads[k].reshape(-1) for k in params.arrays])


def direct_clip(img, txt, scale):
    """Summation oracle: explicit double loop over the similarity matrix."""
    b = len(img)
    total = 0.0
    for i in range(b):
        row = [scale * float(np.dot(img[i], txt[j])) for j in range(b)]
        col = [scale * float(np.dot(img[j], txt[i])) for j in range(b)]
        total += row[i] - math.log(sum(math.exp(v) for v in row))
        total += col[i] - math.log(sum(math.exp(v) for v in col))
    return -total / (2 * b)


# --- hand values -----------------------------------------------------------

def test_clip_loss_single_sample_is_zero():
    e = np.array([[1.0, 0.0]])
    assert clip_loss(e, e, 1.0)[0] == 0.0


def test_clip_loss_orthonormal_pair():
    e = np.eye(2)
    expected = math.log(1 + math.exp(-1))
    assert expected == pytest.approx(0.3133, abs=1e-4)
    assert clip_loss(e, e, 1.0)[0] == pytest.approx(expected, abs=1e-15)
    assert direct_clip(e, e, 1.0) == pytest.approx(expected, abs=1e-15)


def test_uniaug_hand_values():
    e1 = np.array([[0.6, 0.8]])
    assert uniaug_loss(e1, e1, 1.0)[0] == 0.0
    assert uniaug_loss(np.eye(2), np.eye(2), 1.0)[0] == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)


def test_clip_loss_matches_summation_oracle():
    gen = np.random.default_rng(3)
    for _ in range(10):
        b = gen.integers(2, 7)
        img, txt = unit_rows(gen, b, 5), unit_rows(gen, b, 5)
        s = gen.uniform(0.5, 20)
        assert clip_loss(img, txt, s)[0] == pytest.approx(direct_clip(img, txt, s), rel=1e-12)


def test_degenerate_batch_warns():
    p = random_params(0, tiny_dims())
    x, t = random_batch(0, p.dims, b=1)
    with pytest.warns(DegenerateBatchWarning):
        loss, _ = clip_objective(p, x, t)
    assert loss == 0.0


def test_embedding_distance_bounds_and_examples():
    gen = np.random.default_rng(1)
    a = unit_rows(gen, 6, 8)
    assert embedding_distance(a, a) == 0.0
    assert embedding_distance(a, -a) == pytest.approx(4.0, abs=1e-12)


def test_pert_loss_gate_cases():
    assert pert_loss(0.0, 0.0, 2.15) == 0.0
    assert pert_loss(2.16, 2.16, 2.15) == 0.0
    assert pert_loss(1.0, 3.0, 2.15) == 0.5
    assert pert_loss(2.15, 2.15, 2.15) == 2.15


def test_tau_validation():
    with pytest.raises(ValueError):
        ParLossConfig(tau=4.0)
    with pytest.raises(ValueError):
        ParLossConfig(tau=0.0)
    with pytest.raises(ValueError):
        CleanClipConfig(lam=-1)


# --- properties ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(2, 16), st.integers(0, 2**32 - 1))
def test_distance_bounds_and_cosine_form(b, d, seed):
    gen = np.random.default_rng(seed)
    now, ref = unit_rows(gen, b, d), unit_rows(gen, b, d)
    s = embedding_distance(now, ref)
    cos_form = 2.0 - 2.0 * float(np.mean(np.sum(now * ref, axis=1)))
    assert abs(s - cos_form) < 1e-9
    assert -1e-12 <= s <= 4.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 4), st.floats(0, 4), st.floats(0, 4), st.floats(0.01, 3.99))
def test_pert_loss_monotone_then_flat(s1, s2, other, tau):
    lo, hi = min(s1, s2), max(s1, s2)
    if hi <= tau:
        assert pert_loss(lo, other, tau) <= pert_loss(hi, other, tau)
    if lo > tau:
        assert pert_loss(lo, other, tau) == pert_loss(hi, other, tau)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_clip_loss_permutation_invariant(b, seed):
    gen = np.random.default_rng(seed)
    img, txt = unit_rows(gen, b, 6), unit_rows(gen, b, 6)
    perm = gen.permutation(b)
    assert clip_loss(img[perm], txt[perm], 3.0)[0] == pytest.approx(clip_loss(img, txt, 3.0)[0], abs=1e-12)


# --- finite differences: embedding level --------------------------------------

@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_clip_loss_gradient_fd(seed):
    gen = np.random.default_rng(seed)
    b, d = gen.integers(2, 6), gen.integers(2, 6)
    img, txt = gen.normal(size=(b, d)), gen.normal(size=(b, d))
    s = gen.uniform(0.5, 5)
    _, gi, gt, gs = clip_loss(img, txt, s)
    assert rel_err(gi, finite_diff_grad(lambda x: clip_loss(x, txt, s)[0], img, H)) < 1e-4
    assert rel_err(gt, finite_diff_grad(lambda x: clip_loss(img, x, s)[0], txt, H)) < 1e-4
    fd_s = finite_diff_grad(lambda v: clip_loss(img, txt, float(v[0]))[0], np.array([s]), H)[0]
    assert rel_err(gs, fd_s) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_uniaug_gradient_fd(seed):
    gen = np.random.default_rng(100 + seed)
    b, d = gen.integers(2, 6), gen.integers(2, 6)
    e, ea = gen.normal(size=(b, d)), gen.normal(size=(b, d))
    s = gen.uniform(0.5, 5)
    _, ge, gea, gs = uniaug_loss(e, ea, s)
    assert rel_err(ge, finite_diff_grad(lambda x: uniaug_loss(x, ea, s)[0], e, H)) < 1e-4
    assert rel_err(gea, finite_diff_grad(lambda x: uniaug_loss(e, x, s)[0], ea, H)) < 1e-4
    fd_s = finite_diff_grad(lambda v: uniaug_loss(e, ea, float(v[0]))[0], np.array([s]), H)[0]
    assert rel_err(gs, fd_s) < 1e-4


def test_distance_gradient_fd():
    gen = np.random.default_rng(5)
    for _ in range(N_INSTANCES):
        a, r = gen.normal(size=(3, 4)), gen.normal(size=(3, 4))
        fd = finite_diff_grad(lambda x: embedding_distance(x, r), a, H)
        assert rel_err(embedding_distance_grad(a, r), fd) < 1e-4


# --- finite differences: parameter level ------------------------------------------

def _param_fd(params, f):
    return finite_diff_grad(lambda v: f(params.with_flat(v)), params.flat(), H)


POOLS = ["lse", "mean"]


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_clip_objective_gradient_fd(seed):
    dims = tiny_dims(pool=POOLS[seed % 2], learnable=seed % 3 != 0)
    p = random_params(seed, dims)
    x, t = random_batch(seed, dims)
    _, g = clip_objective(p, x, t)
    fd = _param_fd(p, lambda q: clip_objective(q, x, t)[0])
    assert rel_err(flat_grads(p, g), fd) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_cleanclip_objective_gradient_fd(seed):
    dims = tiny_dims(pool=POOLS[seed % 2])
    p = random_params(seed, dims)
    x, t = random_batch(seed, dims)
    xa, ta = random_batch(seed + 500, dims)
    cfg = CleanClipConfig(lam=float(np.random.default_rng(seed).uniform(0.1, 3.0)))
    _, g, _ = cleanclip_objective(p, x, t, cfg, aug_images=xa, aug_tokens=ta)
    fd = _param_fd(p, lambda q: cleanclip_objective(q, x, t, cfg, aug_images=xa, aug_tokens=ta)[0])
    assert rel_err(flat_grads(p, g), fd) < 1e-4


def _offset(params, seed, size):
    gen = np.random.default_rng(seed)
    return params.with_flat(params.flat() + gen.normal(0, size, params.flat().shape))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
@pytest.mark.parametrize("side", ["active", "inactive"])
def test_par_objective_gradient_fd(seed, side):
    dims = tiny_dims(pool=POOLS[seed % 2])
    ref = snapshot(random_params(seed, dims))
    p = _offset(ref, seed, 0.3)
    x, t = random_batch(seed, dims)
    _, _, diag = par_objective(p, ref, x, t, ParLossConfig(tau=3.99))
    s_max, s_min = max(diag["S_phi"], diag["S_psi"]), min(diag["S_phi"], diag["S_psi"])
    if side == "active":
        cfg = ParLossConfig(tau=min(3.99, s_max + 0.05))
    else:
        cfg = ParLossConfig(tau=max(1e-6, s_min / 2))

    def f(q):
        return par_objective(q, ref, x, t, cfg, Rng(seed))[0]

    loss, g, diag = par_objective(p, ref, x, t, cfg, Rng(seed))
    if side == "active":
        assert diag["L_pert"] > 0
    else:
        assert diag["L_pert"] == 0.0
    assert rel_err(flat_grads(p, g), _param_fd(p, f)) < 1e-4


def test_par_at_snapshot_equals_clip():
    dims = tiny_dims()
    p = random_params(3, dims)
    ref = snapshot(p)
    x, t = random_batch(3, dims)
    loss, g, diag = par_objective(p, ref, x, t)
    l_clip, g_clip = clip_objective(p, x, t)
    assert diag["L_pert"] == 0.0 and diag["S_phi"] == 0.0 and diag["S_psi"] == 0.0
    assert loss == l_clip
    assert rel_err(flat_grads(p, g), flat_grads(p, g_clip)) < 1e-12
    fd = _param_fd(p, lambda q: par_objective(q, ref, x, t)[0])
    assert rel_err(flat_grads(p, g), fd) < 1e-4


def test_par_uses_same_augmented_view_for_snapshot():
    dims = tiny_dims()
    p = random_params(4, dims)
    ref = snapshot(p)
    x, t = random_batch(4, dims, b=6)
    _, _, diag = par_objective(p, ref, x, t, ParLossConfig(noise_prob=1.0, cutout_prob=1.0), Rng(1))
    assert diag["S_phi"] == 0.0
    aug = par_augment(x, Rng(1), noise_prob=1.0, cutout_prob=1.0)
    assert not np.array_equal(aug, x)


def test_tiny_tau_reduces_to_clip_once_moved():
    dims = tiny_dims()
    ref = snapshot(random_params(5, dims))
    p = _offset(ref, 5, 0.1)
    x, t = random_batch(5, dims)
    loss, _, diag = par_objective(p, ref, x, t, ParLossConfig(tau=1e-9))
    assert diag["L_pert"] == 0.0 and loss == diag["L_clip"]


def test_ascent_on_distance_increases_it():
    # at params == snapshot the gradient of S is exactly zero, so probe from a small offset
    dims = tiny_dims()
    ref = snapshot(random_params(6, dims))
    p = _offset(ref, 6, 1e-3)
    x, t = random_batch(6, dims)

    def s_total(q):
        d = par_objective(q, ref, x, t, ParLossConfig(tau=3.99))[2]
        return d["S_phi"] + d["S_psi"]

    _, g_par, _ = par_objective(p, ref, x, t, ParLossConfig(tau=3.99))
    _, g_clip = clip_objective(p, x, t)
    # gradient of -L_PERT alone = grad(L_PAR) - grad(L_CLIP)
    g_neg_pert = flat_grads(p, g_par) - flat_grads(p, g_clip)
    before = s_total(p)
    for lr in (1e-2, 1e-3, 1e-4):
        after = s_total(p.with_flat(p.flat() - lr * g_neg_pert))
        assert after > before


def test_cleanclip_lambda_zero_equals_clip():
    dims = tiny_dims()
    p = random_params(7, dims)
    x, t = random_batch(7, dims)
    loss, _, _ = cleanclip_objective(p, x, t, CleanClipConfig(lam=0.0), Rng(0))
    assert loss == clip_objective(p, x, t)[0]


def test_cleanclip_identity_augmentation_value():
    dims = tiny_dims()
    p = random_params(8, dims)
    x, t = random_batch(8, dims)
    loss, _, diag = cleanclip_objective(p, x, t, CleanClipConfig(1.0, "identity", "identity"))
    img = encode_images(p, x)
    from parclip.model import encode_texts, logit_scale
    txt = encode_texts(p, t)
    s = logit_scale(p)
    expected = clip_loss(img, txt, s)[0] + 0.5 * (uniaug_loss(img, img, s)[0] + uniaug_loss(txt, txt, s)[0])
    assert loss == pytest.approx(expected, abs=1e-12)


def test_cleanclip_large_lambda_dominates_gradient():
    dims = tiny_dims()
    p = random_params(9, dims)
    x, t = random_batch(9, dims, b=8)
    xa, ta = random_batch(99, dims, b=8)
    _, g_clip = clip_objective(p, x, t)
    _, g_big, _ = cleanclip_objective(p, x, t, CleanClipConfig(lam=1000.0), aug_images=xa, aug_tokens=ta)
    clip_part = flat_grads(p, g_clip)
    uni_part = flat_grads(p, g_big) - clip_part
    assert np.linalg.norm(uni_part) / np.linalg.norm(clip_part) > 10
