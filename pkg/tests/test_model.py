import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynpl import model as M
from dynpl import numerics as nx
from dynpl.errors import DataError


def loop_conv(X, W, b):
    """Per-position reference: ``X`` is (d_e, N), ``W`` is (d_f, k, d_e)."""
    d_e, N = X.shape
    d_f, k, _ = W.shape
    out = np.zeros((d_f, N))
    for t in range(N):
        z = b.copy()
        for j in range(k):
            if t + j < N:
                z = z + W[:, j, :] @ X[:, t + j]
        out[:, t] = np.tanh(z)
    return out


def reference_forward(ids, p, cfg):
    """Unbatched, loop-based problem-list forward pass used as an oracle."""
    X = np.stack([p["embedding"][i] if i != 0 else np.zeros(cfg.embed_dim) for i in ids], axis=1)
    H = np.concatenate([loop_conv(X, p[f"conv{k}.weight"], p[f"conv{k}.bias"]) for k in cfg.widths], axis=1)
    L = cfg.n_labels
    scores, alphas = np.zeros(L), []
    for l in range(L):
        a = H.T @ p["attention.query"][l] / math.sqrt(cfg.n_filters)
        e = np.exp(a - a.max())
        alpha = e / e.sum()
        alphas.append(alpha)
        scores[l] = p["problem.weight"][l] @ (H @ alpha) + p["problem.bias"][l]
    o = 1.0 / (1.0 + math.exp(-(p["outcome.weight"] @ scores + p["outcome.bias"][0])))
    return scores, np.array(alphas), o


def small(kind="dynpl", seed=0, L=3):
    cfg = M.ModelConfig(kind=kind, vocab_size=10, n_labels=L, embed_dim=8, n_filters=4)
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, rng)
    for k in p:
        if k.endswith("bias"):
            p[k] = rng.normal(0, 0.3, p[k].shape)
    return cfg, p, rng


# --------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("kind", M.MODEL_KINDS)
def test_gradients_match_finite_differences(kind):
    cfg, p, rng = small(kind)
    seqs = [rng.integers(1, 10, 12), rng.integers(1, 10, 7)]
    seqs[1][3] = 0  # an in-sequence pad token
    tokens, lengths = M.pad_batch(seqs)
    masks = M.batch_masks([M.draw_masks(rng, len(s), cfg) for s in seqs], tokens.shape[1], cfg)
    Y = rng.integers(0, 2, (2, 3)).astype(float)
    yo = np.array([1.0, 0.0])

    def lg(pp):
        out, cache = M.forward_batch(pp, tokens, lengths, cfg, masks)
        o = out["outcome_logit"]
        loss = nx.bce_with_logits(o, yo).sum()
        ds = None
        if kind == "dynpl":
            S = out["scores"]
            loss += nx.bce_with_logits(S, Y).sum()
            ds = nx.sigmoid(S) - Y
        return float(loss), M.backward_batch(pp, cache, cfg, ds, nx.sigmoid(o) - yo)

    err = nx.grad_check(lg, p, skip=lambda name, i: name == "embedding" and i[0] == 0)
    assert err < 1e-5


def test_pad_embedding_gets_no_gradient():
    cfg, p, _ = small()
    tokens, lengths = M.pad_batch([np.array([1, 0, 2, 3]), np.array([4, 5])])
    out, cache = M.forward_batch(p, tokens, lengths, cfg)
    g = M.backward_batch(p, cache, cfg, np.ones((2, 3)), np.ones(2))
    assert np.all(g["embedding"][0] == 0)


# --------------------------------------------------------------------------
# forward pass against the loop oracle


def test_single_instance_matches_loop_oracle():
    cfg, p, rng = small(L=4)
    ids = rng.integers(1, 10, 9)
    ids[2] = 0
    s, alpha, o = reference_forward(ids, p, cfg)
    bundle = M.forward(ids, p, cfg)
    np.testing.assert_allclose(bundle.scores, s, atol=1e-12)
    np.testing.assert_allclose(bundle.attention, alpha, atol=1e-12)
    np.testing.assert_allclose(bundle.probabilities, 1 / (1 + np.exp(-s)), atol=1e-12)
    assert bundle.outcome_probability == pytest.approx(o, abs=1e-12)
    assert bundle.attention.shape == (4, 27)
    np.testing.assert_allclose(bundle.attention.sum(axis=1), 1.0, atol=1e-12)


def test_batched_padding_matches_single():
    cfg, p, rng = small()
    short, long_ = rng.integers(1, 10, 5), rng.integers(1, 10, 11)
    tokens, lengths = M.pad_batch([short, long_])
    out, _ = M.dynpl_forward(p, tokens, lengths, cfg)
    single = M.forward(short, p, cfg)
    np.testing.assert_allclose(out["scores"][0], single.scores, atol=1e-12)
    n = tokens.shape[1]
    alpha = out["attention"][0].T  # (L, 3n)
    for j in range(3):
        block = alpha[:, j * n : (j + 1) * n]
        assert np.all(block[:, 5:] == 0.0)
        np.testing.assert_allclose(block[:, :5], single.attention[:, j * 5 : (j + 1) * 5], atol=1e-12)


def test_problem_heads_and_outcome_head_compose():
    cfg, p, rng = small()
    H = rng.normal(size=(4, 12))
    s, probs, alphas = M.problem_heads(H, None, p)
    assert s.shape == (3,) and alphas.shape == (3, 12)
    expected = 1 / (1 + math.exp(-(p["outcome.weight"] @ s + p["outcome.bias"][0])))
    assert M.outcome_head(s, p) == pytest.approx(expected, abs=1e-14)


def test_attention_masked_positions_zero():
    H = np.random.default_rng(0).normal(size=(4, 6))
    mask = np.array([1, 1, 1, 0, 0, 1], dtype=bool)
    alpha, v = M.attend(H, np.ones(4), mask)
    assert np.all(alpha[~mask] == 0) and alpha.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(v, H @ alpha)


def test_forward_train_mode_uses_dropout_and_eval_is_deterministic():
    cfg, p, _ = small()
    ids = np.arange(1, 9)
    a, b = M.forward(ids, p, cfg), M.forward(ids, p, cfg)
    assert a.scores.tobytes() == b.scores.tobytes()
    t = M.forward(ids, p, cfg, mode="train", rng=np.random.default_rng(1))
    assert not np.allclose(t.scores, a.scores)
    with pytest.raises(ValueError):
        M.forward(ids, p, cfg, mode="bogus")


def test_empty_narrative_rejected():
    cfg, p, _ = small()
    with pytest.raises(DataError):
        M.forward(np.array([], dtype=int), p, cfg)


def test_baselines_single_instance():
    cfg, p, rng = small("cnn_max")
    ids = rng.integers(1, 10, 6)
    X = p["embedding"][ids].T
    feat = np.concatenate([loop_conv(X, p[f"conv{k}.weight"], p[f"conv{k}.bias"]).max(axis=1) for k in (1, 2, 3)])
    expected = 1 / (1 + math.exp(-(p["outcome.weight"] @ feat + p["outcome.bias"][0])))
    assert M.baseline_cnn_max(ids, p, cfg) == pytest.approx(expected, abs=1e-12)

    cfg, p, _ = small("conv_attn")
    prob, alpha = M.baseline_conv_attn(ids, p, cfg)
    assert alpha.shape == (18,) and alpha.sum() == pytest.approx(1.0)
    assert 0 < prob < 1


# --------------------------------------------------------------------------
# position decoding


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.data())
def test_decode_position_roundtrip(n, data):
    i = data.draw(st.integers(0, 3 * n - 1))
    width, start = M.decode_position(i, n)
    assert 1 <= width <= 3 and 0 <= start < n
    assert (width - 1) * n + start == i


def test_decode_position_out_of_range():
    with pytest.raises(IndexError):
        M.decode_position(15, 5)
    with pytest.raises(IndexError):
        M.decode_position(-1, 5)


# --------------------------------------------------------------------------
# logistic-regression oracle


def newton_logreg(X, y, l2, iters=50):
    n, d = X.shape
    A = np.c_[X, np.ones(n)]
    theta = np.zeros(d + 1)
    R = np.diag(np.r_[np.full(d, l2), 0.0])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-A @ theta))
        g = A.T @ (p - y) / n + R @ theta
        Hm = (A.T * (p * (1 - p))) @ A / n + R
        theta -= np.linalg.solve(Hm, g)
    return theta


def test_oracle_matches_newton():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, (200, 6)).astype(float)
    y = (X @ rng.normal(size=6) + rng.normal(size=200) > 0).astype(float)
    oracle = M.oracle_logreg(X, y, l2=1e-2)
    ref = newton_logreg(X, y, 1e-2)
    np.testing.assert_allclose(oracle.weight, ref[:6], atol=1e-5)
    assert oracle.bias == pytest.approx(ref[6], abs=1e-5)


def test_oracle_single_class_errors():
    with pytest.raises(DataError):
        M.oracle_logreg(np.ones((4, 2)), np.zeros(4))


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    cfg, p, _ = small()
    ck = M.Checkpoint(p, cfg, "lab", "voc", {"epoch": 3})
    ck.save(tmp_path / "a.npz")
    ck.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = M.Checkpoint.load(tmp_path / "a.npz", label_space_hash="lab", vocab_hash="voc")
    assert back.config == cfg and back.extra == {"epoch": 3}
    assert M.params_digest(back.params) == M.params_digest(p)


def test_checkpoint_hash_mismatch(tmp_path):
    cfg, p, _ = small()
    M.Checkpoint(p, cfg, "lab", "voc").save(tmp_path / "a.npz")
    with pytest.raises(DataError):
        M.Checkpoint.load(tmp_path / "a.npz", label_space_hash="other")
    with pytest.raises(DataError):
        M.Checkpoint.load(tmp_path / "a.npz", vocab_hash="other")


def test_init_params_shapes_and_embedding_copy():
    cfg = M.ModelConfig(vocab_size=7, n_labels=5, embed_dim=3, n_filters=4)
    emb = np.arange(21, dtype=float).reshape(7, 3)
    p = M.init_params(cfg, np.random.default_rng(0), emb)
    assert p["conv2.weight"].shape == (4, 2, 3)
    assert p["attention.query"].shape == (5, 4) and p["outcome.weight"].shape == (5,)
    assert np.all(p["embedding"][0] == 0) and np.all(p["embedding"][1:] == emb[1:])
    with pytest.raises(ValueError):
        M.init_params(cfg, np.random.default_rng(0), np.zeros((6, 3)))
    with pytest.raises(ValueError):
        M.ModelConfig(kind="bogus")
