import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seeclip.semantic import (class_semantic_state_update, compute_attention_weights, compute_domain_token,
                              init_queries, pool_semantic_tokens, semantic_tokens)


def test_two_patch_softmax_by_hand():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    w = compute_attention_weights(q, f)
    assert np.allclose(w.numpy(), [[0.7310585786, 0.2689414214]], atol=1e-10)


def test_pooling_matches_double_loop(rng):
    q = rng.standard_normal((3, 5))
    f = rng.standard_normal((7, 5))
    tokens = semantic_tokens(q, f).numpy()
    for k in range(3):
        logits = [q[k] @ f[i] for i in range(7)]
        m = max(logits)
        e = [np.exp(v - m) for v in logits]
        w = [v / sum(e) for v in e]
        expected = sum(w[i] * f[i] for i in range(7))
        assert np.allclose(tokens[k], expected, atol=1e-12)


def test_large_logits_stay_finite():
    q = torch.tensor([[1000.0, 0.0]], dtype=torch.float64)
    f = torch.tensor([[1.0, 0.0], [0.5, 0.0]], dtype=torch.float64)
    w = compute_attention_weights(q, f)
    assert torch.isfinite(w).all()
    assert float(w[0, 0]) == pytest.approx(1.0)


def test_batched_broadcast(rng):
    q = rng.standard_normal((4, 2, 3))
    f = rng.standard_normal((4, 6, 3))
    w = compute_attention_weights(q, f)
    assert w.shape == (4, 2, 6)
    assert torch.allclose(w[2], compute_attention_weights(q[2], f[2]))


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        compute_attention_weights(np.zeros((1, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        compute_attention_weights(np.zeros((1, 3)), np.full((2, 3), np.nan))
    with pytest.raises(ValueError):
        pool_semantic_tokens(np.ones((1, 3)), np.ones((2, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1),
       st.floats(0.01, 20.0))
def test_rows_are_distributions(K, N, d, seed, scale):
    g = np.random.default_rng(seed)
    w = compute_attention_weights(scale * g.standard_normal((K, d)), g.standard_normal((N, d))).numpy()
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_domain_token_is_flat_mean():
    a = np.array([[1.0, 1.0], [3.0, 3.0]])
    b = np.array([[5.0, 5.0]] * 4)
    # flat mean over 6 rows, not a mean of per-sample means
    assert np.allclose(compute_domain_token([a, b]), [(1 + 3 + 20) / 6] * 2)
    with pytest.raises(ValueError):
        compute_domain_token([])


def test_ema_update():
    r = torch.ones(2, 3, dtype=torch.float64)
    f = torch.zeros(2, 3, dtype=torch.float64)
    assert torch.allclose(class_semantic_state_update(r, f, 0.9), torch.full((2, 3), 0.9, dtype=torch.float64))
    with pytest.raises(ValueError):
        class_semantic_state_update(r, f, 1.0)
    with pytest.raises(ValueError):
        class_semantic_state_update(r, f[:1], 0.5)


def test_query_init_is_seeded():
    assert torch.equal(init_queries(2, 3, 4, seed=5), init_queries(2, 3, 4, seed=5))
    assert init_queries(2, 3, 4, seed=5).shape == (2, 3, 4)
