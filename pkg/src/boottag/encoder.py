"""Position-aware token encoder.

The encoder is deliberately small so that every gradient is hand-checkable:
token embeddings, one bidirectional local mixer (each token combined with a
learned transform of its left and right neighbors, tanh nonlinearity), and a
query-anchored attention layer.  For a query position p the attention scores
every position j with the bilinear form h_p^T M h_j, normalizes them with a
softmax into weights that sum to one, and forms a context vector c as the
weighted sum of the h rows.  The output for token t is u_t = [h_t | c],
shape (n, 2d).

Dropout sits at two sites (after the embedding lookup and after the mixer)
using inverted scaling, so deterministic mode is the exact identity.  In
stochastic mode each encode call draws fresh masks from a seeded stream;
masks derive from (seed, call_index), which makes any pass replayable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenVocabulary",
    "EncoderParams",
    "DropoutConfig",
    "EncodeCache",
    "MaskReplayError",
    "init_encoder_params",
    "encode",
    "encode_backward",
]


class MaskReplayError(RuntimeError):
    """Backward was given a cache that does not match the forward call."""


class TokenVocabulary:
    """Maps token strings to dense ids with a reserved OOV id (last row)."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.oov_id = len(self.tokens)

    @classmethod
    def from_corpus(cls, sentences) -> "TokenVocabulary":
        seen: dict[str, None] = {}
        for sentence in sentences:
            for token in sentence.tokens:
                seen.setdefault(token, None)
        return cls(list(seen))

    @property
    def size(self) -> int:
        """Number of embedding rows, OOV included."""
        return len(self.tokens) + 1

    def ids(self, tokens) -> np.ndarray:
        return np.array([self._index.get(t, self.oov_id) for t in tokens], dtype=np.int64)


@dataclass
class EncoderParams:
    embeddings: np.ndarray  # (V, d), last row is OOV
    w_self: np.ndarray  # (d, d)
    w_left: np.ndarray  # (d, d)
    w_right: np.ndarray  # (d, d)
    bias: np.ndarray  # (d,)
    attention: np.ndarray  # (d, d), bilinear score matrix M

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        d = self.width
        if d <= 0:
            raise ValueError("encoder width must be positive")
        for name in ("embeddings", "w_self", "w_left", "w_right", "bias", "attention"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite encoder parameter: {name}")


def init_encoder_params(vocab_size: int, width: int, rng: np.random.Generator) -> EncoderParams:
    """Symmetric uniform init scaled by 1/sqrt(width)."""
    scale = 1.0 / np.sqrt(width)

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    return EncoderParams(
        embeddings=u(vocab_size, width),
        w_self=u(width, width),
        w_left=u(width, width),
        w_right=u(width, width),
        bias=u(width),
        attention=u(width, width),
    )


@dataclass
class DropoutConfig:
    """Dropout rate plus the seeded mask stream.

    mode 'deterministic' applies no masks (inverted dropout is the identity
    in expectation); mode 'stochastic' draws one pair of masks per encode
    call, derived from (seed, call_index) so a pass can be replayed.
    """

    rate: float
    mode: str = "deterministic"
    seed: int = 0
    _calls: int = field(default=0, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown dropout mode: {self.mode}")

    @property
    def active(self) -> bool:
        return self.mode == "stochastic" and self.rate > 0.0

    def next_masks(self, n: int, d: int):
        """Draw the (embedding-site, mixer-site) keep masks for one call."""
        call = self._calls
        self._calls += 1
        rng = np.random.default_rng([self.seed, call])
        keep = 1.0 - self.rate
        m1 = (rng.random((n, d)) < keep).astype(np.float64) / keep
        m2 = (rng.random((n, d)) < keep).astype(np.float64) / keep
        return m1, m2


@dataclass
class EncodeCache:
    """Intermediates of one forward call, consumed by encode_backward."""

    token_ids: np.ndarray
    query: int
    x: np.ndarray  # embedding rows after site-1 dropout
    h_pre: np.ndarray  # tanh output before site-2 dropout
    h: np.ndarray
    attn: np.ndarray  # attention weights, shape (n,)
    m1: np.ndarray | None
    m2: np.ndarray | None


def encode(instance, params: EncoderParams, dropout: DropoutConfig, vocab: TokenVocabulary):
    """Encode one instance into (u, cache) with u of shape (n, 2d).

    Raises ValueError on an empty instance and FloatingPointError on
    non-finite parameters.
    """
    tokens = instance.sentence.tokens
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty instance")
    params.validate()
    ids = vocab.ids(tokens)
    return encode_ids(ids, instance.query, params, dropout)


def encode_ids(ids: np.ndarray, query: int, params: EncoderParams, dropout: DropoutConfig):
    """encode() with the token ids already looked up (hot path)."""
    n = ids.shape[0]
    d = params.width
    if not 0 <= query < n:
        raise ValueError(f"query position {query} out of range for n={n}")

    x = params.embeddings[ids]
    m1 = m2 = None
    if dropout.active:
        m1, m2 = dropout.next_masks(n, d)
        x = x * m1

    left = np.zeros_like(x)
    left[1:] = x[:-1]
    right = np.zeros_like(x)
    right[:-1] = x[1:]
    g = x @ params.w_self.T + left @ params.w_left.T + right @ params.w_right.T + params.bias
    h_pre = np.tanh(g)
    h = h_pre * m2 if m2 is not None else h_pre

    scores = (h[query] @ params.attention) @ h.T
    scores = scores - scores.max()
    attn = np.exp(scores)
    attn /= attn.sum()
    context = attn @ h

    u = np.concatenate([h, np.broadcast_to(context, (n, d))], axis=1)
    cache = EncodeCache(token_ids=ids, query=query, x=x, h_pre=h_pre, h=h, attn=attn, m1=m1, m2=m2)
    return u, cache


def encode_backward(params: EncoderParams, cache: EncodeCache, grad_u: np.ndarray):
    """Exact gradients of the encode map for one instance.

    grad_u has shape (n, 2d), matching the forward output.  Returns a dict
    of gradients keyed like EncoderParams fields; the embedding gradient is
    dense (V, d) with rows only at the used token ids.
    """
    n, d = cache.h.shape
    if grad_u.shape != (n, 2 * d):
        raise MaskReplayError(
            f"upstream gradient shape {grad_u.shape} does not match forward output {(n, 2 * d)}"
        )
    p = cache.query
    h, attn = cache.h, cache.attn

    d_h = grad_u[:, :d].copy()
    d_context = grad_u[:, d:].sum(axis=0)

    # context = attn @ h
    d_attn = h @ d_context
    d_h += np.outer(attn, d_context)

    # softmax over bilinear scores s_j = h_p^T M h_j
    d_scores = attn * (d_attn - float(attn @ d_attn))
    mh = cache.h @ params.attention.T  # rows M h_j... transposed use below
    d_attention = np.outer(h[p], d_scores @ h)
    d_h += np.outer(d_scores, h[p] @ params.attention)
    d_h[p] += d_scores @ mh

    d_h_pre = d_h * cache.m2 if cache.m2 is not None else d_h
    d_g = d_h_pre * (1.0 - cache.h_pre**2)

    left = np.zeros_like(cache.x)
    left[1:] = cache.x[:-1]
    right = np.zeros_like(cache.x)
    right[:-1] = cache.x[1:]

    d_w_self = d_g.T @ cache.x
    d_w_left = d_g.T @ left
    d_w_right = d_g.T @ right
    d_bias = d_g.sum(axis=0)

    d_x = d_g @ params.w_self
    d_left = d_g @ params.w_left
    d_x[:-1] += d_left[1:]
    d_right = d_g @ params.w_right
    d_x[1:] += d_right[:-1]

    if cache.m1 is not None:
        d_x = d_x * cache.m1
    d_embeddings = np.zeros_like(params.embeddings)
    np.add.at(d_embeddings, cache.token_ids, d_x)

    return {
        "embeddings": d_embeddings,
        "w_self": d_w_self,
        "w_left": d_w_left,
        "w_right": d_w_right,
        "bias": d_bias,
        "attention": d_attention,
    }
