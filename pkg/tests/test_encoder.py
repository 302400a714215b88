"""Encoder forward/backward: golden values, attention, dropout, gradients."""

import numpy as np
import pytest
from conftest import central_difference, relative_error

from boottag.encoder import (
    DropoutConfig,
    EncoderParams,
    MaskReplayError,
    TokenVocabulary,
    encode,
    encode_backward,
    encode_ids,
    init_encoder_params,
)
from boottag.tagging import Instance, Sentence


def make_instance(tokens, query=0):
    return Instance(
        sentence=Sentence(tokens=tuple(tokens)), query=query, tags=None, instance_id="t0"
    )


def small_params(rng=None, vocab_size=6, d=3):
    rng = rng or np.random.default_rng(0)
    return init_encoder_params(vocab_size, d, rng)


def det(seed=0):
    return DropoutConfig(rate=0.1, mode="deterministic", seed=seed)


class TestVocabulary:
    def test_oov_maps_to_reserved_row(self):
        vocab = TokenVocabulary(["a", "b"])
        np.testing.assert_array_equal(vocab.ids(["b", "zzz", "a"]), [1, 2, 0])
        assert vocab.size == 3

    def test_from_corpus_keeps_first_seen_order(self):
        sentences = [Sentence(tokens=("b", "a")), Sentence(tokens=("a", "c"))]
        vocab = TokenVocabulary.from_corpus(sentences)
        assert vocab.tokens == ["b", "a", "c"]


# Frozen from an independent scalar-arithmetic computation of the same
# hand-set parameters (2 tokens, d=2, query 0).
GOLDEN_ATTN = [0.5065578846658654, 0.4934421153341347]
GOLDEN_U = [
    [0.197375320224904, -0.09966799462495582, 0.18306832415504393, -0.006197337352761859],
    [0.16838104587081468, 0.08975778474716009, 0.18306832415504393, -0.006197337352761859],
]


def golden_params():
    return EncoderParams(
        embeddings=np.array([[0.1, -0.2], [0.3, 0.4]]),
        w_self=np.array([[0.5, -0.1], [0.2, 0.3]]),
        w_left=np.array([[0.1, 0.0], [-0.2, 0.1]]),
        w_right=np.array([[0.0, 0.2], [0.1, -0.1]]),
        bias=np.array([0.05, -0.05]),
        attention=np.array([[1.0, 0.5], [-0.5, 2.0]]),
    )


class TestForward:
    def test_golden_two_token_case(self):
        u, cache = encode_ids(np.array([0, 1]), 0, golden_params(), det())
        np.testing.assert_allclose(cache.attn, GOLDEN_ATTN, atol=1e-12)
        np.testing.assert_allclose(u, GOLDEN_U, atol=1e-12)

    def test_single_token_attends_to_itself(self):
        params = small_params()
        u, cache = encode_ids(np.array([2]), 0, params, det())
        np.testing.assert_allclose(cache.attn, [1.0])
        d = params.width
        np.testing.assert_allclose(u[0, :d], u[0, d:], atol=1e-15)

    def test_attention_sums_to_one_for_every_query(self):
        rng = np.random.default_rng(1)
        params = small_params(rng)
        for n in (1, 2, 5, 9):
            ids = rng.integers(params.embeddings.shape[0], size=n)
            for q in range(n):
                _, cache = encode_ids(ids, q, params, det())
                assert np.all(cache.attn >= 0)
                assert abs(cache.attn.sum() - 1.0) < 1e-9

    def test_zero_rate_identical_across_seeds(self):
        params = small_params()
        ids = np.array([1, 2, 3])
        outs = []
        for seed in (1, 99):
            cfg = DropoutConfig(rate=0.0, mode="stochastic", seed=seed)
            u, _ = encode_ids(ids, 1, params, cfg)
            outs.append(u)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_deterministic_mode_ignores_seed(self):
        params = small_params()
        ids = np.array([0, 4])
        u1, _ = encode_ids(ids, 0, params, det(seed=7))
        u2, _ = encode_ids(ids, 0, params, det(seed=8))
        np.testing.assert_array_equal(u1, u2)

    def test_empty_instance_rejected(self):
        vocab = TokenVocabulary(["a"])
        with pytest.raises(ValueError, match="empty"):
            encode(make_instance([]), small_params(), det(), vocab)

    def test_non_finite_params_rejected(self):
        params = small_params()
        params.w_self[0, 0] = np.nan
        vocab = TokenVocabulary(["a", "b"])
        with pytest.raises(FloatingPointError, match="w_self"):
            encode(make_instance(["a", "b"]), params, det(), vocab)


class TestDropout:
    def test_masks_replayable_from_seed_and_call_index(self):
        cfg1 = DropoutConfig(rate=0.3, mode="stochastic", seed=5)
        cfg2 = DropoutConfig(rate=0.3, mode="stochastic", seed=5)
        for _ in range(3):
            m1a, m2a = cfg1.next_masks(4, 3)
            m1b, m2b = cfg2.next_masks(4, 3)
            np.testing.assert_array_equal(m1a, m1b)
            np.testing.assert_array_equal(m2a, m2b)

    def test_fresh_masks_per_call(self):
        cfg = DropoutConfig(rate=0.5, mode="stochastic", seed=5)
        m1a, _ = cfg.next_masks(8, 8)
        m1b, _ = cfg.next_masks(8, 8)
        assert not np.array_equal(m1a, m1b)

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            DropoutConfig(rate=1.0)
        with pytest.raises(ValueError):
            DropoutConfig(rate=-0.1)

    def test_stochastic_mean_approaches_deterministic(self):
        # 10k mask samples; per-coordinate deviation within 3 standard errors.
        rng = np.random.default_rng(2)
        params = init_encoder_params(5, 4, rng)
        ids = np.array([0, 3, 1])
        u_det, _ = encode_ids(ids, 1, params, det())
        cfg = DropoutConfig(rate=0.1, mode="stochastic", seed=11)
        samples = np.stack([encode_ids(ids, 1, params, cfg)[0] for _ in range(10_000)])
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
        assert np.all(np.abs(mean - u_det) <= 3 * se + 1e-12)


class TestBackward:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for trial in range(6):
            n = int(rng.integers(1, 6))
            d = int(rng.integers(2, 5))
            params = init_encoder_params(6, d, rng)
            ids = rng.integers(6, size=n)
            query = int(rng.integers(n))
            weights = rng.normal(size=(n, 2 * d))

            def loss():
                u, _ = encode_ids(ids, query, params, det())
                return float((weights * u).sum())

            _, cache = encode_ids(ids, query, params, det())
            grads = encode_backward(params, cache, weights)
            for name in ("embeddings", "w_self", "w_left", "w_right", "bias", "attention"):
                numeric = central_difference(loss, getattr(params, name))
                assert relative_error(grads[name], numeric) < 1e-4, f"{name} trial {trial}"

    def test_gradients_with_dropout_masks_applied(self):
        # same masks in forward and backward: gradient of the masked map
        rng = np.random.default_rng(4)
        params = init_encoder_params(6, 3, rng)
        ids = np.array([1, 2, 5, 0])
        weights = rng.normal(size=(4, 6))
        forward_cfg = DropoutConfig(rate=0.4, mode="stochastic", seed=21)
        u, cache = encode_ids(ids, 2, params, forward_cfg)
        grads = encode_backward(params, cache, weights)

        def loss():
            replay = DropoutConfig(rate=0.4, mode="stochastic", seed=21)
            u2, _ = encode_ids(ids, 2, params, replay)
            return float((weights * u2).sum())

        for name in ("embeddings", "w_self", "bias", "attention"):
            numeric = central_difference(loss, getattr(params, name))
            assert relative_error(grads[name], numeric) < 1e-4, name

    def test_shape_mismatch_rejected(self):
        params = small_params()
        _, cache = encode_ids(np.array([0, 1]), 0, params, det())
        with pytest.raises(MaskReplayError):
            encode_backward(params, cache, np.zeros((3, 2 * params.width)))
