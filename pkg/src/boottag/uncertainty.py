"""Instance-level uncertainty scores.

Three scores over one instance's token tag distributions:

* winning score (WS): minus the mean of per-token max probabilities.  The
  raw value lies in [-1, -1/C]; the normalized value rescales it onto
  [0, 1] via (C - C*mean_max) / (C - 1), so one-hot rows give 0 and
  uniform rows give 1.
* entropy: the raw value is the mean of sum_c p*log(p) (non-positive); the
  normalized value is the mean Shannon entropy divided by log(C), again 0
  for one-hot and 1 for uniform rows.
* probability variance (PV): K stochastic dropout passes produce K
  distributions per token; the raw value is the mean over tokens of the
  per-class population variances summed over classes.  Each per-class
  variance is at most 1/4, so the normalized value is min(1, raw / 0.25).

Raw values are kept alongside the normalized ones for audit; thresholds
elsewhere always apply to the normalized scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .encoder import DropoutConfig

__all__ = [
    "UncertaintyScore",
    "McConfig",
    "ScoringError",
    "winning_score",
    "entropy_score",
    "probability_variance",
    "pv_from_samples",
    "score_dataset",
    "combine_max",
    "write_scores_csv",
]

KINDS = ("ws", "entropy", "pv")


class ScoringError(RuntimeError):
    """Scoring failed for a specific instance."""


@dataclass(frozen=True)
class UncertaintyScore:
    instance_id: str
    kind: str
    value: float  # normalized, in [0, 1]
    raw: float


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo dropout settings: K passes from one seeded mask stream."""

    k: int = 5
    seed: int = 0
    rate: float | None = None  # None: use the model's dropout rate

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"MC dropout needs at least 2 passes, got {self.k}")


def _check_marginals(marginals: np.ndarray) -> np.ndarray:
    m = np.asarray(marginals, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 2:
        raise ValueError(f"marginals must be (n, C) with C >= 2, got {m.shape}")
    return m


def winning_score(marginals: np.ndarray, instance_id: str = "") -> UncertaintyScore:
    m = _check_marginals(marginals)
    C = m.shape[1]
    mean_max = float(np.mean(np.max(m, axis=1)))
    raw = -mean_max
    value = (C - C * mean_max) / (C - 1)
    value = float(min(1.0, max(0.0, value)))
    return UncertaintyScore(instance_id=instance_id, kind="ws", value=value, raw=raw)


def entropy_score(marginals: np.ndarray, instance_id: str = "") -> UncertaintyScore:
    m = _check_marginals(marginals)
    C = m.shape[1]
    plogp = np.zeros_like(m)
    nz = m > 0.0
    plogp[nz] = m[nz] * np.log(m[nz])
    row_sums = plogp.sum(axis=1)
    raw = float(np.mean(row_sums))
    value = -raw / np.log(C)
    value = float(min(1.0, max(0.0, value)))
    return UncertaintyScore(instance_id=instance_id, kind="entropy", value=value, raw=raw)


def pv_from_samples(samples: np.ndarray, instance_id: str = "") -> UncertaintyScore:
    """PV from stacked distributions of shape (K, n, C); population variance
    over the K axis."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 2:
        raise ValueError(f"need (K>=2, n, C) samples, got {samples.shape}")
    variances = np.var(samples, axis=0, ddof=0)  # (n, C)
    raw = float(np.mean(variances.sum(axis=1)))
    value = float(min(1.0, raw / 0.25))
    return UncertaintyScore(instance_id=instance_id, kind="pv", value=value, raw=raw)


def probability_variance(model, instance, mc: McConfig) -> UncertaintyScore:
    """Run K stochastic passes (fresh replayable masks per pass, one seeded
    stream) and score the variance of the resulting marginals."""
    rate = model.dropout_rate if mc.rate is None else mc.rate
    dropout = DropoutConfig(rate=rate, mode="stochastic", seed=mc.seed)
    samples = np.stack([model.marginals(instance, dropout) for _ in range(mc.k)])
    return pv_from_samples(samples, instance_id=instance.instance_id)


def combine_max(a: UncertaintyScore, b: UncertaintyScore) -> UncertaintyScore:
    """Optional combination of two data-uncertainty scores: the max of the
    normalized values.  Off by default everywhere; kept for experiments."""
    if a.instance_id != b.instance_id:
        raise ValueError("cannot combine scores of different instances")
    hi = a if a.value >= b.value else b
    return UncertaintyScore(a.instance_id, f"max({a.kind},{b.kind})", hi.value, hi.raw)


def _derive_seed(base: int, index: int) -> int:
    # Distinct per-instance streams: PV passes stay sequential per instance
    # while instances remain order-independent.
    return int(np.random.SeedSequence(entropy=base, spawn_key=(index,)).generate_state(1)[0])


def score_dataset(model, instances, kind: str, mc: McConfig | None = None) -> list[UncertaintyScore]:
    """One score per instance, input order preserved, deterministic given
    the seed.  Per-instance failures re-raise with the instance id."""
    if kind == "combined":
        ws = score_dataset(model, instances, "ws")
        ent = score_dataset(model, instances, "entropy")
        return [combine_max(a, b) for a, b in zip(ws, ent)]
    if kind not in KINDS:
        raise ValueError(f"unknown uncertainty kind: {kind!r}")
    if kind == "pv" and mc is None:
        raise ValueError("kind 'pv' requires an McConfig")
    scores = []
    for index, instance in enumerate(instances):
        try:
            if kind == "pv":
                per_instance = McConfig(k=mc.k, seed=_derive_seed(mc.seed, index), rate=mc.rate)
                scores.append(probability_variance(model, instance, per_instance))
            else:
                marginals = model.marginals(instance)
                if kind == "ws":
                    scores.append(winning_score(marginals, instance.instance_id))
                else:
                    scores.append(entropy_score(marginals, instance.instance_id))
        except Exception as exc:
            raise ScoringError(f"instance {instance.instance_id}: {exc}") from exc
    return scores


def write_scores_csv(scores, instances, path) -> None:
    provenance = {i.instance_id: i.provenance for i in instances}
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["instance_id", "kind", "raw", "normalized", "provenance"])
        for score in scores:
            writer.writerow(
                [
                    score.instance_id,
                    score.kind,
                    repr(score.raw),
                    repr(score.value),
                    provenance.get(score.instance_id, "unknown"),
                ]
            )
