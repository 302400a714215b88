"""Joint tagger = encoder + CRF, with optimizer and checkpoint plumbing.

A JointModel owns the encoder parameters, the CRF parameters, the token and
tag vocabularies, and a dropout config.  The heavy lifting lives in
encoder.py and crf.py; this module wires per-instance passes together:

    ids -> encode -> u (n, 2d) -> z = u @ W^T -> CRF loss / marginals / path

Checkpoints are .npz files carrying every tensor plus a JSON metadata
header (format version, vocabularies, vocabulary hash, optional config
hash).  Loading validates the version, the shapes, and the hash.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from . import crf
from .crf import CrfParams
from .encoder import DropoutConfig, EncoderParams, TokenVocabulary, encode_ids, encode_backward, init_encoder_params
from .tagging import TagVocabulary

__all__ = ["JointModel", "Adam", "CheckpointError", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = "v1"

PARAM_NAMES = (
    "embeddings",
    "w_self",
    "w_left",
    "w_right",
    "bias",
    "attention",
    "projection",
    "transitions",
    "start",
    "end",
)


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or inconsistent with its metadata."""


def vocabulary_hash(token_vocab: TokenVocabulary, tag_vocab: TagVocabulary) -> str:
    payload = json.dumps(
        {
            "tokens": token_vocab.tokens,
            "entity_types": tag_vocab.entity_types,
            "relation_types": tag_vocab.relation_types,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


class JointModel:
    def __init__(
        self,
        encoder_params: EncoderParams,
        crf_params: CrfParams,
        token_vocab: TokenVocabulary,
        tag_vocab: TagVocabulary,
        dropout_rate: float = 0.1,
    ):
        self.encoder = encoder_params
        self.crf = crf_params
        self.token_vocab = token_vocab
        self.tag_vocab = tag_vocab
        self.dropout_rate = dropout_rate
        self._id_cache: dict[str, np.ndarray] = {}

    @classmethod
    def initialize(
        cls,
        token_vocab: TokenVocabulary,
        tag_vocab: TagVocabulary,
        width: int,
        seed: int,
        dropout_rate: float = 0.1,
    ) -> "JointModel":
        """Fresh parameters from a seeded uniform init scaled by 1/sqrt(d)."""
        rng = np.random.default_rng([seed])
        enc = init_encoder_params(token_vocab.size, width, rng)
        C = tag_vocab.n_tags
        proj_scale = 1.0 / np.sqrt(2 * width)
        crf_params = CrfParams(
            projection=rng.uniform(-proj_scale, proj_scale, size=(C, 2 * width)),
            transitions=np.zeros((C, C)),
            start=np.zeros(C),
            end=np.zeros(C),
        )
        return cls(enc, crf_params, token_vocab, tag_vocab, dropout_rate)

    @property
    def width(self) -> int:
        return self.encoder.width

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.encoder.embeddings,
            "w_self": self.encoder.w_self,
            "w_left": self.encoder.w_left,
            "w_right": self.encoder.w_right,
            "bias": self.encoder.bias,
            "attention": self.encoder.attention,
            "projection": self.crf.projection,
            "transitions": self.crf.transitions,
            "start": self.crf.start,
            "end": self.crf.end,
        }

    def clone(self) -> "JointModel":
        other = JointModel(
            copy.deepcopy(self.encoder),
            copy.deepcopy(self.crf),
            self.token_vocab,
            self.tag_vocab,
            self.dropout_rate,
        )
        return other

    def token_ids(self, instance) -> np.ndarray:
        ids = self._id_cache.get(instance.instance_id)
        if ids is None or ids.shape[0] != instance.n_tokens:
            ids = self.token_vocab.ids(instance.sentence.tokens)
            if instance.instance_id:
                self._id_cache[instance.instance_id] = ids
        return ids

    def dropout(self, mode: str = "deterministic", seed: int = 0) -> DropoutConfig:
        return DropoutConfig(rate=self.dropout_rate, mode=mode, seed=seed)

    def forward(self, instance, dropout: DropoutConfig | None = None):
        """Return (emissions, u, cache) for one instance."""
        if dropout is None:
            dropout = self.dropout()
        ids = self.token_ids(instance)
        u, cache = encode_ids(ids, instance.query, self.encoder, dropout)
        emissions = u @ self.crf.projection.T
        return emissions, u, cache

    def marginals(self, instance, dropout: DropoutConfig | None = None, head: str = "crf") -> np.ndarray:
        """Token tag distributions.

        head='crf' (default) returns forward-backward posterior marginals;
        head='softmax' is the simpler per-token softmax over emission
        scores, kept as a documented alternative.
        """
        emissions, _, _ = self.forward(instance, dropout)
        if head == "softmax":
            shifted = emissions - emissions.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            return probs / probs.sum(axis=1, keepdims=True)
        if head != "crf":
            raise ValueError(f"unknown marginal head: {head}")
        return crf.token_marginals(emissions, self.crf)

    def decode(self, instance) -> list[int]:
        emissions, _, _ = self.forward(instance)
        path, _ = crf.viterbi_decode(emissions, self.crf)
        return path

    def backward_from_emissions(self, u, cache, d_emissions, d_trans, d_start, d_end):
        """Push emission/chain gradients back through the projection and the
        encoder; returns the full named gradient dict."""
        d_projection = d_emissions.T @ u
        d_u = d_emissions @ self.crf.projection
        grads = encode_backward(self.encoder, cache, d_u)
        grads["projection"] = d_projection
        grads["transitions"] = d_trans
        grads["start"] = d_start
        grads["end"] = d_end
        return grads

    def instance_grads(
        self,
        instance,
        dropout: DropoutConfig,
        grad_marginals: np.ndarray | None = None,
        with_nll: bool = True,
    ):
        """Loss and full parameter gradients for one instance.

        The gradient source is the CRF NLL of the gold tags (with_nll) plus,
        optionally, an arbitrary upstream gradient on the token marginals
        (grad_marginals), e.g. from a divergence between two models.  Both
        flow through the shared forward pass.  Returns (nll, marginals,
        grads dict).
        """
        emissions, u, cache = self.forward(instance, dropout)
        fb = crf.forward_backward(emissions, self.crf)
        marginals = crf.token_marginals(emissions, self.crf, fb=fb)

        d_emissions = np.zeros_like(emissions)
        d_trans = np.zeros_like(self.crf.transitions)
        d_start = np.zeros_like(self.crf.start)
        d_end = np.zeros_like(self.crf.end)
        nll = 0.0
        if with_nll:
            if instance.tags is None:
                raise ValueError(f"instance {instance.instance_id} has no gold tags")
            nll, d_emissions, d_trans, d_start, d_end = crf.nll_loss_and_grad(
                emissions, np.asarray(instance.tags), self.crf, fb=fb
            )
        if grad_marginals is not None:
            de2, dt2, ds2, dn2 = crf.marginals_vjp(emissions, self.crf, grad_marginals, fb=fb)
            d_emissions = d_emissions + de2
            d_trans = d_trans + dt2
            d_start = d_start + ds2
            d_end = d_end + dn2

        grads = self.backward_from_emissions(u, cache, d_emissions, d_trans, d_start, d_end)
        return nll, marginals, grads


class Adam:
    """Adam over a named parameter dict (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_checkpoint(model: JointModel, path, config_hash: str | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "width": model.width,
        "dropout_rate": model.dropout_rate,
        "tokens": model.token_vocab.tokens,
        "entity_types": model.tag_vocab.entity_types,
        "relation_types": model.tag_vocab.relation_types,
        "vocab_hash": vocabulary_hash(model.token_vocab, model.tag_vocab),
        "config_hash": config_hash,
        "shapes": {k: list(v.shape) for k, v in model.parameters().items()},
    }
    arrays = {k: v for k, v in model.parameters().items()}
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path) -> JointModel:
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data["meta"]))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing metadata header") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {meta.get('version')!r}"
            )
        token_vocab = TokenVocabulary(meta["tokens"])
        tag_vocab = TagVocabulary(meta["entity_types"], meta["relation_types"])
        if vocabulary_hash(token_vocab, tag_vocab) != meta["vocab_hash"]:
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        tensors = {}
        for name in PARAM_NAMES:
            if name not in data:
                raise CheckpointError(f"{path}: missing tensor {name}")
            arr = np.asarray(data[name])
            expected = tuple(meta["shapes"][name])
            if arr.shape != expected:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {arr.shape}, header says {expected}"
                )
            tensors[name] = arr
    enc = EncoderParams(
        embeddings=tensors["embeddings"],
        w_self=tensors["w_self"],
        w_left=tensors["w_left"],
        w_right=tensors["w_right"],
        bias=tensors["bias"],
        attention=tensors["attention"],
    )
    crf_params = CrfParams(
        projection=tensors["projection"],
        transitions=tensors["transitions"],
        start=tensors["start"],
        end=tensors["end"],
    )
    return JointModel(enc, crf_params, token_vocab, tag_vocab, meta["dropout_rate"])
