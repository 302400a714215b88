"""Shared oracles and helpers.

The CRF oracles enumerate all C^n paths directly, so they are independent
of every dynamic program they check.  The finite-difference helper runs
central differences at step 1e-5 and reports the worst relative error.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from boottag.crf import CrfParams, sequence_score
from boottag.tagging import Sentence, TagVocabulary


def enumerate_paths(n: int, C: int):
    return itertools.product(range(C), repeat=n)


def brute_log_partition(emissions: np.ndarray, params: CrfParams) -> float:
    n, C = emissions.shape
    scores = [sequence_score(emissions, np.array(path), params) for path in enumerate_paths(n, C)]
    m = max(scores)
    return m + np.log(sum(np.exp(s - m) for s in scores))


def brute_marginals(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    n, C = emissions.shape
    log_z = brute_log_partition(emissions, params)
    marginals = np.zeros((n, C))
    for path in enumerate_paths(n, C):
        p = np.exp(sequence_score(emissions, np.array(path), params) - log_z)
        for t, c in enumerate(path):
            marginals[t, c] += p
    return marginals


def brute_viterbi(emissions: np.ndarray, params: CrfParams):
    best_path, best_score = None, -np.inf
    for path in enumerate_paths(*emissions.shape):
        s = sequence_score(emissions, np.array(path), params)
        if s > best_score:  # strict: ties keep the earliest (lowest-id) path
            best_path, best_score = list(path), s
    return best_path, best_score


def random_crf(rng, n: int, C: int, scale: float = 1.0):
    emissions = rng.normal(scale=scale, size=(n, C))
    params = CrfParams(
        projection=np.zeros((C, 2)),  # unused by pure-CRF tests
        transitions=rng.normal(scale=scale, size=(C, C)),
        start=rng.normal(scale=scale, size=C),
        end=rng.normal(scale=scale, size=C),
    )
    return emissions, params


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at array x by central differences."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def small_vocab():
    return TagVocabulary(["PER", "ORG"], ["works_for", "based_in"])


@pytest.fixture
def two_entity_sentence():
    # acme founded by bob: ORG at [0,1), PER at [3,4), works_for(bob, acme)
    return Sentence(
        tokens=("acme", "was", "led", "bob"),
        entities=((0, 1, 1), (3, 4, 0)),
        relations=((1, 0, 0),),
    )


def random_sentence(rng, entity_types: int = 2, relation_types: int = 2, max_tokens: int = 9):
    """Random well-formed sentence: non-overlapping spans, valid relations."""
    n = int(rng.integers(1, max_tokens + 1))
    tokens = tuple(f"w{int(rng.integers(50))}" for _ in range(n))
    entities = []
    pos = 0
    while pos < n and len(entities) < 4:
        if rng.random() < 0.55:
            length = int(rng.integers(1, min(2, n - pos) + 1))
            entities.append((pos, pos + length, int(rng.integers(entity_types))))
            pos += length
        pos += int(rng.integers(1, 3))
    relations = []
    used = set()
    for head in range(len(entities)):
        for tail in range(len(entities)):
            if head == tail or (head, tail) in used:
                continue
            if rng.random() < 0.3:
                relations.append((head, int(rng.integers(relation_types)), tail))
                used.add((head, tail))
    return Sentence(tokens=tokens, entities=tuple(entities), relations=tuple(relations))
