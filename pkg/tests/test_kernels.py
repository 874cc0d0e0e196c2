import math

import numpy as np
import pytest

from conceptkv.kernels import (
    AttentionMask,
    DecoderConfig,
    attention,
    attention_probabilities,
    decoder_forward,
    prefix_causal_mask,
    rope_apply,
    seeded_model,
)


def small_config(vocab=64):
    return DecoderConfig(num_layers=2, num_heads=2, head_dim=8, model_dim=16, vocab_size=vocab)


# ---------------------------------------------------------------- seeded_model

def test_seeded_model_is_reproducible():
    cfg = small_config()
    a = seeded_model(7, cfg)
    b = seeded_model(7, cfg)
    assert a.weights_blob() == b.weights_blob()
    assert a.fingerprint == b.fingerprint


def test_seeded_model_seed_sensitivity():
    cfg = small_config()
    a = seeded_model(7, cfg)
    b = seeded_model(8, cfg)
    assert a.weights_blob() != b.weights_blob()
    assert a.fingerprint != b.fingerprint


def test_invalid_dimensions_rejected():
    with pytest.raises(ValueError):
        DecoderConfig(num_layers=2, num_heads=2, head_dim=8, model_dim=15, vocab_size=64)
    with pytest.raises(ValueError):
        DecoderConfig(num_layers=0, num_heads=2, head_dim=8, model_dim=16, vocab_size=64)
    with pytest.raises(ValueError):
        DecoderConfig(num_layers=2, num_heads=2, head_dim=7, model_dim=14, vocab_size=64)


# ----------------------------------------------------------------- rope_apply

def test_rope_identity_at_position_zero():
    x = np.array([[1.0, 0.0]], dtype=np.float32)
    out = rope_apply(x, 0, 10000.0)
    np.testing.assert_allclose(out, x, atol=1e-7)


def test_rope_matches_direct_trigonometry():
    # d_k=2 means the single pair uses frequency rope_base^0 = 1 regardless
    # of base, so absolute position 1 rotates [1, 0] by exactly 1 radian.
    x = np.array([[1.0, 0.0]], dtype=np.float64)
    out = rope_apply(x, 1, 10000.0)
    np.testing.assert_allclose(out, [[math.cos(1.0), math.sin(1.0)]], atol=1e-12)
    np.testing.assert_allclose(out, [[0.5403023058681398, 0.8414709848078965]], atol=1e-12)


@pytest.mark.parametrize("offset", [0, 3, 17])
def test_rope_offset_equals_absolute_position(offset):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 8))
    shifted = rope_apply(x, offset, 10000.0)
    for i in range(5):
        row = rope_apply(x[i : i + 1], offset + i, 10000.0)
        np.testing.assert_allclose(shifted[i], row[0], atol=1e-12)


def test_rope_rejects_odd_dim():
    with pytest.raises(ValueError):
        rope_apply(np.zeros((2, 3)), 0, 10000.0)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 8)).astype(np.float32)
    out = rope_apply(x, 29, 10000.0)
    for j in range(4):
        before = np.hypot(x[:, 2 * j], x[:, 2 * j + 1])
        after = np.hypot(out[:, 2 * j], out[:, 2 * j + 1])
        np.testing.assert_allclose(after, before, atol=1e-6)


# --------------------------------------------------------- prefix_causal_mask

def test_mask_pure_causal():
    m = prefix_causal_mask(0, 2)
    neg = np.finfo(np.float32).min
    expected = np.array([[0.0, neg], [0.0, 0.0]], dtype=np.float32)
    np.testing.assert_array_equal(m.values, expected)


def test_mask_prefix_fully_visible():
    m = prefix_causal_mask(2, 1)
    np.testing.assert_array_equal(m.values, np.zeros((1, 3), dtype=np.float32))


def test_mask_mixed():
    m = prefix_causal_mask(1, 2)
    neg = np.finfo(np.float32).min
    expected = np.array([[0.0, 0.0, neg], [0.0, 0.0, 0.0]], dtype=np.float32)
    np.testing.assert_array_equal(m.values, expected)


def test_mask_rejects_empty_current_block():
    with pytest.raises(ValueError):
        prefix_causal_mask(3, 0)


# ------------------------------------------------------------------ attention

def test_single_visible_key_returns_value_row():
    q = np.array([[0.3, -0.2]], dtype=np.float32)
    k = np.array([[1.0, 1.0]], dtype=np.float32)
    v = np.array([[5.0, -7.0, 2.0]], dtype=np.float32)
    out = attention(q, k, v, prefix_causal_mask(0, 1), d_k=2)
    np.testing.assert_array_equal(out, v)


def test_equal_logits_average_values():
    q = np.array([[1.0, 0.0]], dtype=np.float64)
    k = np.array([[0.0, 1.0], [0.0, -1.0]], dtype=np.float64)  # both logits 0
    v = np.array([[2.0, 4.0], [6.0, 0.0]], dtype=np.float64)
    out = attention(q, k, v, prefix_causal_mask(1, 1), d_k=2)
    np.testing.assert_allclose(out, [[4.0, 2.0]], atol=1e-12)


def scalar_softmax_attention(q, k, v, mask_values, d_k):
    """Independent scalar-loop oracle for masked scaled-dot attention."""
    n_q, n_k = q.shape[0], k.shape[0]
    out = np.zeros((n_q, v.shape[1]), dtype=np.float64)
    for i in range(n_q):
        logits = []
        for j in range(n_k):
            s = 0.0
            for t in range(q.shape[1]):
                s += float(q[i, t]) * float(k[j, t])
            s = s / math.sqrt(d_k) + float(mask_values[i, j])
            logits.append(s)
        m = max(logits)
        exps = [math.exp(val - m) for val in logits]
        z = sum(exps)
        for j in range(n_k):
            w = exps[j] / z
            for t in range(v.shape[1]):
                out[i, t] += w * float(v[j, t])
    return out


def test_attention_matches_scalar_oracle():
    rng = np.random.default_rng(42)
    q = rng.standard_normal((2, 4)).astype(np.float32)
    k = rng.standard_normal((3, 4)).astype(np.float32)
    v = rng.standard_normal((3, 4)).astype(np.float32)
    mask = prefix_causal_mask(1, 2)
    got = attention(q, k, v, mask, d_k=4)
    want = scalar_softmax_attention(q, k, v, mask.values.astype(np.float64), 4)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_attention_rows_sum_to_one_and_masked_entries_zero():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((4, 8)).astype(np.float32)
    k = rng.standard_normal((7, 8)).astype(np.float32)
    mask = prefix_causal_mask(3, 4)
    probs = attention_probabilities(q, k, mask, d_k=8)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(4), atol=1e-6)
    for i in range(4):
        for j in range(7):
            if mask.values[i, j] < 0:
                assert probs[i, j] == 0.0


def test_attention_shape_mismatch():
    q = np.zeros((2, 4), dtype=np.float32)
    k = np.zeros((3, 4), dtype=np.float32)
    v = np.zeros((3, 4), dtype=np.float32)
    bad_mask = AttentionMask(l_ext=0, n_cur=2, values=np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        attention(q, k, v, bad_mask, d_k=4)


# ------------------------------------------------------------ decoder_forward

def test_forward_with_no_past_equals_plain_forward():
    model = seeded_model(3, small_config())
    logits_a, _ = decoder_forward(model, [5])
    logits_b, _ = decoder_forward(model, [5], past=None)
    np.testing.assert_array_equal(logits_a, logits_b)
    assert logits_a.shape == (1, 64)


def test_forward_deterministic():
    model = seeded_model(3, small_config())
    a, _ = decoder_forward(model, [1, 2, 3])
    b, _ = decoder_forward(model, [1, 2, 3])
    assert a.tobytes() == b.tobytes()


def test_decode_with_past_matches_full_forward():
    model = seeded_model(9, small_config())
    full, _ = decoder_forward(model, [10, 11, 12])
    _, kv = decoder_forward(model, [10, 11])
    last, _ = decoder_forward(model, [12], past=kv)
    np.testing.assert_allclose(last[0], full[-1], atol=1e-5)


def test_prefix_equivalence_property():
    # decode(s | prefill(p)) must match the suffix rows of forward(p || s)
    # at 1e-5 in 32-bit and 1e-10 in 64-bit, across random splits.
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            model = seeded_model(int(rng.integers(0, 2**31)), small_config(), dtype=dtype)
            p_len = int(rng.integers(1, 33))
            s_len = int(rng.integers(1, 33))
            p = rng.integers(0, 64, size=p_len).tolist()
            s = rng.integers(0, 64, size=s_len).tolist()
            full, _ = decoder_forward(model, p + s)
            _, kv = decoder_forward(model, p)
            suffix, _ = decoder_forward(model, s, past=kv)
            assert np.max(np.abs(suffix - full[p_len:])) <= tol


def test_new_kv_covers_current_tokens_only():
    model = seeded_model(2, small_config())
    _, kv_prefix = decoder_forward(model, [1, 2, 3, 4])
    _, kv = decoder_forward(model, [5, 6], past=kv_prefix)
    assert len(kv) == model.config.num_layers
    for k, v in kv:
        assert k.shape == (2, model.config.model_dim)
        assert v.shape == (2, model.config.model_dim)


def test_out_of_vocab_token_rejected():
    model = seeded_model(3, small_config())
    with pytest.raises(ValueError):
        decoder_forward(model, [64])
    with pytest.raises(ValueError):
        decoder_forward(model, [-1])


def test_layer_count_mismatch_rejected():
    model = seeded_model(3, small_config())
    _, kv = decoder_forward(model, [1, 2])
    with pytest.raises(ValueError):
        decoder_forward(model, [3], past=kv[:1])


def test_weights_frozen_across_calls():
    model = seeded_model(4, small_config())
    before = model.weights_checksum()
    rng = np.random.default_rng(0)
    for _ in range(3):
        tokens = rng.integers(0, 64, size=5).tolist()
        _, kv = decoder_forward(model, tokens)
        decoder_forward(model, tokens, past=kv)
    assert model.weights_checksum() == before


def test_weights_not_writable():
    model = seeded_model(4, small_config())
    with pytest.raises(ValueError):
        model.embedding[0, 0] = 1.0
