import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordmine.errors import DimensionMismatch, EmptyInput, FormatError, InsufficientPool, ZeroVector
from wordmine.model import (
    Adam,
    BundleTensors,
    ModelParams,
    TrainConfig,
    attend,
    init_params,
    load_checkpoint,
    loss,
    loss_and_gradient,
    loss_gradient,
    orthogonal_params,
    save_checkpoint,
    score_matrix,
    train,
    validate_triplets,
)
from wordmine.pairs import build_mined_pairs, validation_triplets
from wordmine.search import MinedWord
from wordmine.vision import ImageRanking


def identity_params(d):
    return ModelParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))


def naive_score(params, word, grid):
    ya = params.W_a @ word + params.b_a
    ya = ya / np.sqrt(ya @ ya)
    best = -np.inf
    for h in range(grid.shape[0]):
        for w in range(grid.shape[1]):
            yv = params.W_v @ grid[h, w] + params.b_v
            best = max(best, ya @ (yv / np.sqrt(yv @ yv)))
    return (best + 1.0) * 50.0


def naive_loss(params, b):
    """Each bracketed list averaged; written without the index tables."""
    S = lambda i, j: naive_score(params, b.audio[i], b.grids[j])
    P, N = b.n_pos, b.n_neg
    total = (S(0, 0) - 100.0) ** 2
    for k in range(N):
        neg = 1 + P + k
        total += (S(neg, 0) ** 2 + S(0, neg) ** 2 + S(0, 1 + P + N + k) ** 2) / 3.0
    for k in range(P):
        total += ((S(0, 1 + k) - 100.0) ** 2 + (S(1 + k, 0) - 100.0) ** 2) / 2.0
    return total


def random_bundle(rng, n_pos, n_neg, d_aud=5, d_pix=4, hw=(2, 2)):
    audio = rng.normal(size=(1 + n_pos + n_neg, d_aud))
    grids = [rng.normal(size=(*hw, d_pix)) for _ in range(1 + n_pos + 2 * n_neg)]
    return BundleTensors(audio, grids, n_pos, n_neg)


# -- attention ----------------------------------------------------------------

def test_perfect_alignment_scores_100():
    p = identity_params(3)
    grid = np.random.default_rng(0).normal(size=(2, 2, 3))
    out = attend(p, grid[1, 0] * 2.0, grid)
    assert out.S == pytest.approx(100.0)
    assert out.argmax_pixel == (1, 0)
    assert out.weights[1, 0] == pytest.approx(1.0)


def test_orthogonal_projection_scores_50():
    out = attend(orthogonal_params(3, 4, 5), np.ones(3), np.ones((2, 3, 4)))
    assert out.S == 50.0
    assert np.all(out.weights == 0.0)


def test_attend_matches_naive():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = init_params(4, 6, 3, seed=int(rng.integers(1000)))
        p.b_a[:] = rng.normal(size=3)
        word, grid = rng.normal(size=4), rng.normal(size=(2, 2, 6))
        assert attend(p, word, grid).S == pytest.approx(naive_score(p, word, grid), abs=1e-10)


def test_attend_errors():
    p = init_params(4, 6, 3)
    with pytest.raises(DimensionMismatch):
        attend(p, np.ones(5), np.ones((2, 2, 6)))
    with pytest.raises(DimensionMismatch):
        attend(p, np.ones(4), np.ones((2, 2, 7)))
    with pytest.raises(ZeroVector):
        attend(p, np.zeros(4), np.ones((2, 2, 6)))


def test_argmax_ties_go_to_first_pixel():
    out = attend(identity_params(2), np.array([1.0, 0.0]), np.ones((2, 2, 2)))
    assert out.argmax_pixel == (0, 0)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(0.01, 100))
def test_score_properties(seed, s1, s2):
    rng = np.random.default_rng(seed)
    p = init_params(4, 5, 3, seed=seed)
    word, grid = rng.normal(size=4), rng.normal(size=(3, 3, 5))
    out = attend(p, word, grid)
    assert -1e-9 <= out.S <= 100.0 + 1e-9
    # zero biases: normalisation absorbs positive scale
    scaled = grid.copy()
    scaled[1, 2] *= s2
    assert attend(p, word * s1, scaled).S == pytest.approx(out.S, abs=1e-9)
    # permuting pixels permutes weights and the argmax
    perm = rng.permutation(9)
    pg = grid.reshape(9, 5)[perm].reshape(3, 3, 5)
    po = attend(p, word, pg)
    assert po.S == pytest.approx(out.S, abs=1e-12)
    np.testing.assert_allclose(po.weights.ravel(), out.weights.ravel()[perm], atol=1e-12)
    k = out.argmax_pixel[0] * 3 + out.argmax_pixel[1]
    assert perm[po.argmax_pixel[0] * 3 + po.argmax_pixel[1]] == k


def test_score_matrix_agrees_with_attend():
    rng = np.random.default_rng(2)
    p = init_params(4, 5, 3, seed=2)
    words = rng.normal(size=(3, 4))
    grids = [rng.normal(size=(2, 3, 5)), rng.normal(size=(1, 1, 5))]
    S = score_matrix(p, words, grids)
    for i in range(3):
        for j in range(2):
            assert S[i, j] == pytest.approx(attend(p, words[i], grids[j]).S, abs=1e-12)


# -- loss ---------------------------------------------------------------------

def test_all_fifty_loss():
    b = random_bundle(np.random.default_rng(0), 5, 11)
    assert loss(orthogonal_params(5, 4, 3), b) == pytest.approx(42500.0, abs=1e-6)


def test_zero_loss_and_zero_gradient():
    # anchor class pixels align with the shared word direction; other images oppose it
    e = np.eye(3)
    audio = np.stack([e[0], e[0], e[0], -e[0]])  # anchor, 2 positives, 1 negative
    good = np.tile(e[0], (1, 2, 1))
    bad = np.tile(-e[0], (1, 2, 1))
    b = BundleTensors(audio, [good, good, good, bad, bad], 2, 1)
    p = identity_params(3)
    value, grad = loss_and_gradient(p, b)
    assert value == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(grad.flatten(), 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_independent_recompute(seed):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, 2, 3)
    p = init_params(5, 4, 3, seed=seed)
    p.b_v[:] = rng.normal(size=3)
    assert loss(p, b) == pytest.approx(naive_loss(p, b), rel=1e-12, abs=1e-8)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(0, 4), st.integers(0, 4))
def test_loss_non_negative(seed, n_pos, n_neg):
    rng = np.random.default_rng(seed)
    assert loss(init_params(5, 4, 3, seed=seed), random_bundle(rng, n_pos, n_neg)) >= 0.0


def finite_difference(p, b, eps=1e-5):
    x = p.flatten()
    g = np.empty_like(x)
    for k in range(x.size):
        up, dn = x.copy(), x.copy()
        up[k] += eps
        dn[k] -= eps
        g[k] = (loss(p.unflatten(up), b) - loss(p.unflatten(dn), b)) / (2 * eps)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, 2, 3, hw=(3, 3))
    p = init_params(5, 4, 6, seed=seed)
    g = loss_gradient(p, b).flatten()
    fd = finite_difference(p, b)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-4


def test_duplicated_positive_doubles_its_share():
    rng = np.random.default_rng(5)
    b = random_bundle(rng, 2, 1)
    p = init_params(5, 4, 3, seed=5)
    # bundle with positive 1 only, and with positive 1 twice
    one = BundleTensors(b.audio[[0, 1, 3]], [b.grids[i] for i in (0, 1, 3, 4)], 1, 1)
    two = BundleTensors(b.audio[[0, 1, 1, 3]], [b.grids[i] for i in (0, 1, 1, 3, 4)], 2, 1)
    base = BundleTensors(b.audio[[0, 3]], [b.grids[i] for i in (0, 3, 4)], 0, 1)
    g_base = loss_gradient(p, base).flatten()
    g_one = loss_gradient(p, one).flatten() - g_base
    g_two = loss_gradient(p, two).flatten() - g_base
    np.testing.assert_allclose(g_two, 2.0 * g_one, rtol=1e-10, atol=1e-9)


def test_adam_step_descends():
    rng = np.random.default_rng(6)
    for seed in range(10):
        b = random_bundle(rng, 5, 11)
        p = init_params(5, 4, 8, seed=seed)
        value, grad = loss_and_gradient(p, b)
        assert loss(Adam(p, lr=1e-4).step(p, grad), b) <= value


# -- validation ---------------------------------------------------------------

def test_triplet_accuracy_examples():
    e = np.eye(2)
    p = identity_params(2)
    pos = np.tile(e[0], (1, 1, 1))
    neg = np.tile(-e[0], (1, 1, 1))
    assert validate_triplets(p, [(e[0], pos, neg)] * 3) == 1.0
    assert validate_triplets(p, [(e[0], pos, pos)]) == 0.0
    with pytest.raises(EmptyInput):
        validate_triplets(p, [])


def test_triplet_accuracy_matches_recompute():
    rng = np.random.default_rng(7)
    p = init_params(4, 3, 3, seed=7)
    dev = [(rng.normal(size=4), rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))) for _ in range(40)]
    ref = np.mean([naive_score(p, w, a) > naive_score(p, w, b) for w, a, b in dev])
    assert validate_triplets(p, dev) == ref


# -- training -----------------------------------------------------------------

def separable_task(seed=0, classes=2, per_class=30, d=8):
    """Each class owns one feature direction carried by its words and pixels."""
    rng = np.random.default_rng(seed)
    labels = [f"k{c}" for c in range(classes)]
    dirs = np.eye(d)
    words, grids, mw, ranks = {}, {}, [], []
    for c, lab in enumerate(labels):
        imgs = []
        for i in range(per_class):
            w = MinedWord(f"u{c}_{i}", lab, (0, 1), 1.0 - i / 100)
            mw.append(w)
            words[w.utterance_id + ":0-1"] = dirs[c] + 0.1 * rng.normal(size=d)
            g = dirs[c] + 0.3 * rng.normal(size=(2, 2, d))
            grids[f"i{c}_{i}"] = g
            imgs.append((f"i{c}_{i}", 1.0 - i / 100))
        ranks.append(ImageRanking(lab, tuple(imgs)))
    bg = []
    for k in range(20):
        grids[f"bg{k}"] = 0.1 * rng.normal(size=(2, 2, d)) + dirs[-2]
        bg.append(f"bg{k}")
    return build_mined_pairs(mw, ranks, 100, 0.2, bg, seed), words, grids


def test_zero_lr_keeps_params():
    ps, words, grids = separable_task()
    p0 = init_params(8, 8, 4, seed=0)
    best, hist = train(p0, ps, words, grids, TrainConfig(lr=0.0, epochs=3, n_pos=2, n_neg=3, patience=5))
    np.testing.assert_array_equal(best.flatten(), p0.flatten())
    assert {e["validation"] for e in hist.epochs} == {hist.initial_validation}


def test_separable_classes_learned():
    ps, words, grids = separable_task()
    best, hist = train(init_params(8, 8, 4, seed=1), ps, words, grids,
                       TrainConfig(lr=1e-2, epochs=100, n_pos=2, n_neg=3))
    assert max(e["validation"] for e in hist.epochs) == 1.0
    trips = [(words[w], grids[a], grids[b]) for w, a, b in validation_triplets(ps, 0)]
    assert validate_triplets(best, trips) == 1.0


def test_training_is_deterministic():
    ps, words, grids = separable_task()
    cfg = TrainConfig(lr=1e-2, epochs=4, n_pos=2, n_neg=3, seed=3)
    a, ha = train(init_params(8, 8, 4, seed=1), ps, words, grids, cfg)
    b, hb = train(init_params(8, 8, 4, seed=1), ps, words, grids, cfg)
    assert ha.to_json() == hb.to_json()
    np.testing.assert_array_equal(a.flatten(), b.flatten())


def test_starved_background_reports_epoch():
    ps, words, grids = separable_task()
    with pytest.raises(InsufficientPool) as err:
        train(init_params(8, 8, 4), ps, words, grids, TrainConfig(n_pos=2, n_neg=50, epochs=1))
    assert "epoch 1 step 0" in str(err.value)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(5, 4, 3, seed=9)
    save_checkpoint(tmp_path / "m.bin", p)
    q = load_checkpoint(tmp_path / "m.bin")
    np.testing.assert_array_equal(q.flatten(), p.flatten().astype(np.float32))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.bin")
