"""Dense numeric kernels and a seeded toy decoder.

The decoder is a small pre-norm transformer (rotary attention, tanh MLP,
no biases, no dropout) with weights drawn deterministically from a seed.
It exists to make cache-attach behaviour checkable: decoding against an
external key/value prefix must reproduce the logits of a full forward
pass over the concatenated token stream.

Positions are rotary only; relative-bias schemes would offset the same way
but are not implemented.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DecoderConfig",
    "ToyDecoder",
    "AttentionMask",
    "seeded_model",
    "rope_apply",
    "prefix_causal_mask",
    "attention",
    "attention_probabilities",
    "decoder_forward",
]

# Hidden width of the per-block MLP, as a multiple of model_dim.
FF_MULT = 2
RMS_EPS = 1e-6


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    model_dim: int
    vocab_size: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "model_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != num_heads {self.num_heads} "
                f"* head_dim {self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive, got {self.rope_base}")

    def canonical_string(self) -> str:
        return (
            f"L={self.num_layers}|H={self.num_heads}|dk={self.head_dim}"
            f"|D={self.model_dim}|V={self.vocab_size}|rope={self.rope_base!r}"
        )


@dataclass
class ToyDecoder:
    """Frozen stand-in for a base model: weights never change after construction."""

    config: DecoderConfig
    seed: int
    dtype: np.dtype
    embedding: np.ndarray           # vocab x D
    wq: list                        # per layer, D x D
    wk: list
    wv: list
    wo: list
    w1: list                        # D x FF
    w2: list                        # FF x D
    head: np.ndarray                # D x vocab
    fingerprint: bytes = field(init=False)

    def __post_init__(self):
        digest = hashlib.sha256(
            f"seed={self.seed}|{self.config.canonical_string()}".encode()
        ).digest()
        object.__setattr__(self, "fingerprint", digest)
        for arr in self._all_weights():
            arr.flags.writeable = False

    def _all_weights(self):
        yield self.embedding
        for layer in range(self.config.num_layers):
            yield self.wq[layer]
            yield self.wk[layer]
            yield self.wv[layer]
            yield self.wo[layer]
            yield self.w1[layer]
            yield self.w2[layer]
        yield self.head

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self._all_weights():
            h.update(arr.tobytes())
        return h.hexdigest()

    def weights_blob(self) -> bytes:
        return b"".join(arr.tobytes() for arr in self._all_weights())


def seeded_model(seed: int, config: DecoderConfig, dtype=np.float32) -> ToyDecoder:
    """Build a decoder with reproducible weights.

    Equal (seed, config) pairs yield bit-identical weights; the draw order
    is fixed (embedding, then per layer q/k/v/o/mlp, then output head).
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"compute dtype must be float32 or float64, got {dtype}")
    rng = np.random.default_rng(seed)
    d = config.model_dim
    ff = FF_MULT * d

    def draw(rows, cols, scale):
        return (rng.standard_normal((rows, cols)) * scale).astype(dtype)

    embedding = draw(config.vocab_size, d, 1.0)
    wq, wk, wv, wo, w1, w2 = [], [], [], [], [], []
    for _ in range(config.num_layers):
        wq.append(draw(d, d, d ** -0.5))
        wk.append(draw(d, d, d ** -0.5))
        wv.append(draw(d, d, d ** -0.5))
        wo.append(draw(d, d, d ** -0.5))
        w1.append(draw(d, ff, d ** -0.5))
        w2.append(draw(ff, d, ff ** -0.5))
    head = draw(d, config.vocab_size, d ** -0.5)
    return ToyDecoder(
        config=config, seed=seed, dtype=dtype, embedding=embedding,
        wq=wq, wk=wk, wv=wv, wo=wo, w1=w1, w2=w2, head=head,
    )


def rope_apply(x: np.ndarray, position_offset: int, rope_base: float) -> np.ndarray:
    """Rotate row i of x by the angles of absolute position position_offset + i.

    Pairs (x[:, 2j], x[:, 2j+1]) rotate with frequency rope_base^(-2j/d); the
    rotation preserves each pair's 2-norm.
    """
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {x.shape}")
    n, d = x.shape
    if d % 2 != 0:
        raise ValueError(f"rotary dimension must be even, got {d}")
    dtype = x.dtype
    half = d // 2
    positions = position_offset + np.arange(n, dtype=np.float64)
    freqs = float(rope_base) ** (-2.0 * np.arange(half, dtype=np.float64) / d)
    angles = np.outer(positions, freqs)
    cos = np.cos(angles).astype(dtype)
    sin = np.sin(angles).astype(dtype)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


@dataclass
class AttentionMask:
    """Additive mask: prefix columns fully visible, current block causal.

    Entries are 0 where attention is allowed and the most negative finite
    value of the active precision where it is not (avoids NaN through
    softmax, unlike a literal -inf).
    """

    l_ext: int
    n_cur: int
    values: np.ndarray  # n_cur x (l_ext + n_cur)


def prefix_causal_mask(l_ext: int, n_cur: int, dtype=np.float32) -> AttentionMask:
    if n_cur < 1:
        raise ValueError(f"n_cur must be >= 1, got {n_cur}")
    if l_ext < 0:
        raise ValueError(f"l_ext must be >= 0, got {l_ext}")
    dtype = np.dtype(dtype)
    neg = np.finfo(dtype).min
    values = np.zeros((n_cur, l_ext + n_cur), dtype=dtype)
    cur = np.triu(np.full((n_cur, n_cur), neg, dtype=dtype), k=1)
    values[:, l_ext:] = cur
    return AttentionMask(l_ext=l_ext, n_cur=n_cur, values=values)


def attention_probabilities(
    q: np.ndarray, k: np.ndarray, mask: AttentionMask, d_k: int
) -> np.ndarray:
    """Row-stochastic attention weights: softmax(q k^T / sqrt(d_k) + mask)."""
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q/k width mismatch: {q.shape} vs {k.shape}")
    if mask.values.shape != (q.shape[0], k.shape[0]):
        raise ValueError(
            f"mask shape {mask.values.shape} does not cover q rows x k rows "
            f"({q.shape[0]}, {k.shape[0]})"
        )
    scores = (q @ k.T) / np.asarray(np.sqrt(d_k), dtype=q.dtype)
    scores = scores + mask.values
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=1, keepdims=True)


def attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: AttentionMask, d_k: int
) -> np.ndarray:
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k/v row mismatch: {k.shape} vs {v.shape}")
    return attention_probabilities(q, k, mask, d_k) @ v


def _rms_norm(x: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=1, keepdims=True)
    return x / np.sqrt(ms + np.asarray(RMS_EPS, dtype=x.dtype))


def _validate_past(model: ToyDecoder, past) -> int:
    cfg = model.config
    if past is None or len(past) == 0:
        return 0
    if len(past) != cfg.num_layers:
        raise ValueError(f"past has {len(past)} layers, model has {cfg.num_layers}")
    l_ext = past[0][0].shape[0]
    for k_arr, v_arr in past:
        if k_arr.shape != (l_ext, cfg.model_dim) or v_arr.shape != (l_ext, cfg.model_dim):
            raise ValueError(
                f"past layer shapes must be ({l_ext}, {cfg.model_dim}), "
                f"got K {k_arr.shape} V {v_arr.shape}"
            )
    return l_ext


def decoder_forward(model: ToyDecoder, token_ids, past=None):
    """One forward pass over token_ids, optionally behind an external prefix.

    `past` is a per-layer list of (K, V) arrays of l_ext rows whose keys are
    already rotary-encoded at absolute positions 0..l_ext-1. Current tokens
    take absolute positions l_ext..l_ext+n-1, see the whole prefix, and are
    causal among themselves.

    Returns (logits, new_kv) where logits is n x vocab and new_kv holds the
    rotary-encoded keys and raw values of the current tokens only.
    """
    cfg = model.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 1 or token_ids.size == 0:
        raise ValueError("token_ids must be a non-empty 1-d sequence")
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min {token_ids.min()}, max {token_ids.max()}"
        )
    l_ext = _validate_past(model, past)
    n = token_ids.size
    d_k = cfg.head_dim
    mask = prefix_causal_mask(l_ext, n, dtype=model.dtype)

    x = model.embedding[token_ids]
    new_kv = []
    for layer in range(cfg.num_layers):
        h = _rms_norm(x)
        q = h @ model.wq[layer]
        k = h @ model.wk[layer]
        v = h @ model.wv[layer]
        q_rot = np.empty_like(q)
        k_rot = np.empty_like(k)
        for head in range(cfg.num_heads):
            sl = slice(head * d_k, (head + 1) * d_k)
            q_rot[:, sl] = rope_apply(q[:, sl], l_ext, cfg.rope_base)
            k_rot[:, sl] = rope_apply(k[:, sl], l_ext, cfg.rope_base)
        if l_ext > 0:
            k_all = np.concatenate([past[layer][0], k_rot], axis=0)
            v_all = np.concatenate([past[layer][1], v], axis=0)
        else:
            k_all, v_all = k_rot, v
        attn_out = np.empty_like(q)
        for head in range(cfg.num_heads):
            sl = slice(head * d_k, (head + 1) * d_k)
            attn_out[:, sl] = attention(q_rot[:, sl], k_all[:, sl], v_all[:, sl], mask, d_k)
        x = x + attn_out @ model.wo[layer]
        h2 = _rms_norm(x)
        x = x + np.tanh(h2 @ model.w1[layer]) @ model.w2[layer]
        new_kv.append((k_rot, v))
    logits = _rms_norm(x) @ model.head
    return logits, new_kv
