"""Dual-model training with uncertainty-driven instance selection.

One run proceeds in three phases:

1. Initial selection.  Data uncertainty (winning score or entropy of the
   token marginals) is computed for every training instance, either from an
   external per-token probability file or from model f1 after one warm
   epoch on a small random subsample (a freshly initialized model emits
   near-uniform marginals, which would make every instance look equally
   uncertain).  Instances below the data-uncertainty threshold form the
   trusted set.

2. Epoch loop.  Both models train on the trusted set, each with its own
   CRF loss; when the ensemble weight alpha is positive, a KL divergence
   between the two models' token marginals is added (total loss
   L_c1 + L_c2 + alpha * L_e) and its gradient flows into both models.
   Batches follow an easy-to-hard order: ascending current uncertainty.
   After each epoch the per-instance probability variance under f1 is
   computed over the full dataset and the trusted set is reselected below
   the model-uncertainty threshold.

3. Early stop on validation F1 with patience; the best-F1 state of f1 is
   what the run returns as its checkpoint.

Thresholds apply to normalized scores.  A threshold that selects nothing
or almost everything (> 95%) degenerates, in which case selection falls
back to keeping the q most confident fraction (0.5 initially, 0.7 per
iteration).  A threshold >= 1.0 disables a selection phase outright, and
alpha == 0 disables the second model; with both disabled the run reduces
exactly to the plain baseline loop, which train_baseline implements
independently.

Training never reads provenance: instances are stripped on entry, and the
optional provenance map feeds only the metrics log and the selection
audit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import crf
from .encoder import DropoutConfig, TokenVocabulary
from .evaluation import evaluate
from .model import Adam, JointModel
from .tagging import PROVENANCE_CLEAN, PROVENANCE_CORRUPTED, TagVocabulary
from .uncertainty import McConfig, entropy_score, pv_from_samples, winning_score, probability_variance

__all__ = [
    "TrainConfig",
    "SelectionState",
    "DualModel",
    "TrainingDiverged",
    "ensemble_loss",
    "train_step",
    "run_bootstrap",
    "train_baseline",
    "load_external_probabilities",
    "derive_seed",
]

log = logging.getLogger("boottag")

KL_EPS = 1e-12


class TrainingDiverged(FloatingPointError):
    """A loss went non-finite; parameters were rolled back to the last good
    epoch boundary."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-3  # 1e-5 matches large-backbone settings; too slow from scratch
    batch_size: int = 8
    dropout_rate: float = 0.1
    tau_d: float = 0.5
    tau_m: float = 0.6
    k_passes: int = 5
    max_epochs: int = 20
    patience: int = 3
    seed_init: int = 1
    seed_dropout: int = 2
    seed_shuffle: int = 3
    data_uncertainty: str = "ws"  # ws | entropy
    width: int = 24
    warm_subsample: int = 1000
    quantile_initial: float = 0.5
    quantile_iteration: float = 0.7
    accumulate_selection: bool = False
    curriculum: bool = True
    external_scores_path: str | None = None

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 <= self.tau_d <= 1.0 and 0.0 <= self.tau_m <= 1.0):
            raise ValueError("thresholds must be in [0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.data_uncertainty not in ("ws", "entropy"):
            raise ValueError(f"unknown data uncertainty kind: {self.data_uncertainty!r}")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SelectionState:
    all_ids: list[str]
    trusted_ids: list[str]
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    trusted_history: list[list[str]] = field(default_factory=list)

    def record(self, n_selected: int, mean_uncertainty: float | None, val_f1: float | None):
        self.history.append(
            {
                "iteration": self.iteration,
                "n_selected": n_selected,
                "mean_uncertainty": mean_uncertainty,
                "val_f1": val_f1,
            }
        )
        self.trusted_history.append(list(self.trusted_ids))


@dataclass
class DualModel:
    f1: JointModel
    f2: JointModel | None
    opt1: Adam
    opt2: Adam | None


def derive_seed(base: int, *path: str) -> int:
    """Deterministic, platform-independent sub-seed for a named stream."""
    text = str(base) + "/" + "/".join(path)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def ensemble_loss(p: np.ndarray, q: np.ndarray):
    """Token-wise KL(p || q) summed over tokens, with gradients for both
    marginal matrices.  Zero entries are floored at 1e-12 inside the log
    only."""
    if p.shape != q.shape:
        raise ValueError(f"marginal shapes differ: {p.shape} vs {q.shape}")
    log_p = np.log(np.maximum(p, KL_EPS))
    log_q = np.log(np.maximum(q, KL_EPS))
    value = float((p * (log_p - log_q)).sum())
    d_p = (log_p - log_q) + (p > KL_EPS).astype(np.float64)
    d_q = np.where(q > KL_EPS, -p / np.maximum(q, KL_EPS), 0.0)
    return value, d_p, d_q


def _instance_backward(model: JointModel, instance, dropout) -> tuple[float, np.ndarray, tuple]:
    """Forward one instance, return (nll, marginals, pieces-for-backward)."""
    emissions, u, cache = model.forward(instance, dropout)
    fb = crf.forward_backward(emissions, model.crf)
    nll, d_em, d_tr, d_st, d_en = crf.nll_loss_and_grad(emissions, np.asarray(instance.tags), model.crf, fb=fb)
    marginals = crf.token_marginals(emissions, model.crf, fb=fb)
    return nll, marginals, (emissions, u, cache, fb, d_em, d_tr, d_st, d_en)


def _accumulate(total: dict | None, grads: dict, scale: float) -> dict:
    if total is None:
        return {k: v * scale for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += v * scale
    return total


def train_step(dual: DualModel, batch, config: TrainConfig, drop1: DropoutConfig, drop2: DropoutConfig | None):
    """One optimizer step on a batch: CRF losses for both models plus the
    weighted ensemble KL.  Returns mean losses (crf_1, crf_2, ensemble,
    total)."""
    if not batch:
        raise ValueError("empty batch")
    scale = 1.0 / len(batch)
    alpha = config.alpha
    sum1 = sum2 = sum_kl = 0.0
    grads1: dict | None = None
    grads2: dict | None = None
    for instance in batch:
        nll1, marg1, back1 = _instance_backward(dual.f1, instance, drop1)
        sum1 += nll1
        emissions1, u1, cache1, fb1, d_em1, d_tr1, d_st1, d_en1 = back1
        if dual.f2 is not None:
            nll2, marg2, back2 = _instance_backward(dual.f2, instance, drop2)
            sum2 += nll2
            emissions2, u2, cache2, fb2, d_em2, d_tr2, d_st2, d_en2 = back2
            if alpha > 0:
                kl, d_p, d_q = ensemble_loss(marg1, marg2)
                sum_kl += kl
                de, dt, ds, dn = crf.marginals_vjp(emissions1, dual.f1.crf, alpha * d_p, fb=fb1)
                d_em1 += de
                d_tr1 += dt
                d_st1 += ds
                d_en1 += dn
                de, dt, ds, dn = crf.marginals_vjp(emissions2, dual.f2.crf, alpha * d_q, fb=fb2)
                d_em2 += de
                d_tr2 += dt
                d_st2 += ds
                d_en2 += dn
            grads2 = _accumulate(
                grads2, dual.f2.backward_from_emissions(u2, cache2, d_em2, d_tr2, d_st2, d_en2), scale
            )
        grads1 = _accumulate(
            grads1, dual.f1.backward_from_emissions(u1, cache1, d_em1, d_tr1, d_st1, d_en1), scale
        )
    loss1 = sum1 * scale
    loss2 = sum2 * scale if dual.f2 is not None else 0.0
    loss_kl = sum_kl * scale
    total = loss1 + loss2 + alpha * loss_kl
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss: crf1={loss1} crf2={loss2} kl={loss_kl}")
    dual.opt1.step(grads1)
    if dual.f2 is not None:
        dual.opt2.step(grads2)
    return loss1, loss2, loss_kl, total


def _select(scores: np.ndarray, tau: float, quantile: float):
    """Indices with score <= tau; on a degenerate outcome fall back to the
    `quantile` most confident fraction.

    Degenerate means empty, or more than 95% selected while the scores
    actually discriminate.  With zero spread (e.g. PV at dropout 0) a full
    selection stands: there is no ranking to take a quantile of.
    """
    n = scores.shape[0]
    mask = scores <= tau
    count = int(mask.sum())
    spread = float(scores.max() - scores.min()) if n else 0.0
    if count > 0 and (count <= 0.95 * n or spread == 0.0):
        return np.flatnonzero(mask), False
    k = max(1, int(round(quantile * n)))
    order = np.argsort(scores, kind="stable")
    return np.sort(order[:k]), True


def load_external_probabilities(path) -> dict[str, np.ndarray]:
    """Per-instance, per-token tag probabilities from any external model.

    JSON lines: {"instance_id": ..., "probabilities": [[...C floats...] x n]}.
    """
    table = {}
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                table[row["instance_id"]] = np.asarray(row["probabilities"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed probability row: {exc}") from exc
    return table


def _data_uncertainty_from_marginals(marginals: np.ndarray, kind: str, instance_id: str) -> float:
    if kind == "ws":
        return winning_score(marginals, instance_id).value
    return entropy_score(marginals, instance_id).value


def _training_streams(config: TrainConfig):
    """Seeds shared between the dual engine's f1 path and the baseline, so
    the two produce identical trajectories under degenerate settings."""
    return {
        "init_f1": derive_seed(config.seed_init, "init", "0"),
        "init_f2": derive_seed(config.seed_init, "init", "1"),
        "dropout_f1": derive_seed(config.seed_dropout, "dropout", "0"),
        "dropout_f2": derive_seed(config.seed_dropout, "dropout", "1"),
        "warm": derive_seed(config.seed_shuffle, "warm"),
        "warm_dropout": derive_seed(config.seed_dropout, "warm"),
        "shuffle": derive_seed(config.seed_shuffle, "epoch"),
    }


def _metrics_row(epoch, n_selected, loss1, loss2, loss_kl, report, mean_um, clean_fraction):
    return {
        "epoch": epoch,
        "n_selected": n_selected,
        "loss_crf_1": loss1,
        "loss_crf_2": loss2,
        "loss_ensemble": loss_kl,
        "val_precision": report.precision,
        "val_recall": report.recall,
        "val_f1": report.f1,
        "mean_model_uncertainty": mean_um,
        "clean_fraction_selected": clean_fraction,
    }


def _clean_fraction(ids, provenance: dict[str, str] | None) -> float | None:
    if not provenance:
        return None
    known = [provenance.get(i) for i in ids]
    known = [k for k in known if k in (PROVENANCE_CLEAN, PROVENANCE_CORRUPTED)]
    if not known:
        return None
    return sum(1 for k in known if k == PROVENANCE_CLEAN) / len(known)


class _MetricsLog:
    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._path = path
        self._handle = open(path, "w") if path else None

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._handle:
            self._handle.write(json.dumps(row) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle:
            self._handle.close()
            self._handle = None


@dataclass
class TrainResult:
    model: JointModel  # f1 restored to its best-F1 state
    last_model: JointModel
    dual: DualModel | None
    state: SelectionState
    metrics: list[dict]
    best_epoch: int
    best_f1: float
    diverged: bool = False


def _epoch_batches(indices: np.ndarray, scores: np.ndarray | None, rng, batch_size: int, curriculum: bool):
    """Easy-to-hard batching when scores are known, shuffled otherwise."""
    if curriculum and scores is not None:
        order = indices[np.argsort(scores[indices], kind="stable")]
    else:
        order = indices[rng.permutation(indices.shape[0])]
    return [order[i : i + batch_size] for i in range(0, order.shape[0], batch_size)]


def _warm_pass(model: JointModel, instances, config: TrainConfig, streams) -> None:
    """One epoch on a small random subsample, to give the scorer non-vacuous
    marginals.  Mutates the model in place."""
    rng = np.random.default_rng([streams["warm"]])
    n = len(instances)
    take = min(config.warm_subsample, n)
    chosen = rng.permutation(n)[:take]
    dropout = DropoutConfig(rate=config.dropout_rate, mode="stochastic", seed=streams["warm_dropout"])
    opt = Adam(model.parameters(), lr=config.learning_rate)
    dual = DualModel(f1=model, f2=None, opt1=opt, opt2=None)
    cfg = TrainConfig(**{**asdict(config), "alpha": 0.0})
    order = chosen[rng.permutation(take)]
    for i in range(0, take, config.batch_size):
        batch = [instances[j] for j in order[i : i + config.batch_size]]
        train_step(dual, batch, cfg, dropout, None)


def _score_data_uncertainty(model: JointModel, instances, config: TrainConfig) -> np.ndarray:
    external = None
    if config.external_scores_path:
        external = load_external_probabilities(config.external_scores_path)
    values = np.empty(len(instances))
    for i, instance in enumerate(instances):
        if external is not None:
            try:
                marginals = external[instance.instance_id]
            except KeyError as exc:
                raise ValueError(
                    f"external probabilities missing instance {instance.instance_id}"
                ) from exc
            if marginals.shape[0] != instance.n_tokens:
                raise ValueError(
                    f"external probabilities for {instance.instance_id} have "
                    f"{marginals.shape[0]} rows, expected {instance.n_tokens}"
                )
        else:
            marginals = model.marginals(instance)
        values[i] = _data_uncertainty_from_marginals(marginals, config.data_uncertainty, instance.instance_id)
    return values


def _score_model_uncertainty(model: JointModel, instances, config: TrainConfig, epoch: int) -> np.ndarray:
    seed = derive_seed(config.seed_dropout, "pv", str(epoch))
    mc = McConfig(k=config.k_passes, seed=seed, rate=config.dropout_rate)
    values = np.empty(len(instances))
    for i, instance in enumerate(instances):
        per_instance = McConfig(k=mc.k, seed=derive_seed(mc.seed, "i", str(i)), rate=mc.rate)
        values[i] = probability_variance(model, instance, per_instance).value
    return values


def run_bootstrap(
    instances,
    val_sentences,
    token_vocab: TokenVocabulary,
    tag_vocab: TagVocabulary,
    config: TrainConfig,
    provenance: dict[str, str] | None = None,
    metrics_path=None,
) -> TrainResult:
    """Full selection-train-reselect loop.  `instances` is the training set
    D; provenance (if given) feeds logging and audits only."""
    config.validate()
    if not instances:
        raise ValueError("empty training set")
    instances = [i.stripped() for i in instances]
    ids = [i.instance_id for i in instances]
    streams = _training_streams(config)

    f1 = JointModel.initialize(token_vocab, tag_vocab, config.width, streams["init_f1"], config.dropout_rate)
    use_f2 = config.alpha > 0
    f2 = (
        JointModel.initialize(token_vocab, tag_vocab, config.width, streams["init_f2"], config.dropout_rate)
        if use_f2
        else None
    )
    dual = DualModel(
        f1=f1,
        f2=f2,
        opt1=Adam(f1.parameters(), lr=config.learning_rate),
        opt2=Adam(f2.parameters(), lr=config.learning_rate) if use_f2 else None,
    )
    drop1 = DropoutConfig(rate=config.dropout_rate, mode="stochastic", seed=streams["dropout_f1"])
    drop2 = DropoutConfig(rate=config.dropout_rate, mode="stochastic", seed=streams["dropout_f2"]) if use_f2 else None
    shuffle_rng = np.random.default_rng([streams["shuffle"]])

    all_indices = np.arange(len(instances))
    current_scores: np.ndarray | None = None

    if config.tau_d < 1.0:
        _warm_pass(f1, instances, config, streams)
        current_scores = _score_data_uncertainty(f1, instances, config)
        selected, fallback = _select(current_scores, config.tau_d, config.quantile_initial)
        if fallback:
            log.warning(
                "data-uncertainty threshold %.2f selected a degenerate set; "
                "kept the %.0f%% most confident instances",
                config.tau_d,
                100 * config.quantile_initial,
            )
    else:
        selected = all_indices

    state = SelectionState(all_ids=ids, trusted_ids=[ids[i] for i in selected])
    initial_mean = float(np.mean(current_scores)) if current_scores is not None else None
    state.record(len(selected), initial_mean, None)

    metrics = _MetricsLog(metrics_path)
    best_f1_value = -1.0
    best_epoch = 0
    best_snapshot = f1.clone()
    epochs_since_best = 0
    diverged = False
    try:
        for epoch in range(1, config.max_epochs + 1):
            state.iteration = epoch
            snapshot = f1.clone()
            snapshot2 = f2.clone() if use_f2 else None
            try:
                batches = _epoch_batches(
                    selected, current_scores, shuffle_rng, config.batch_size, config.curriculum
                )
                sums = np.zeros(3)
                for batch_idx in batches:
                    batch = [instances[j] for j in batch_idx]
                    l1, l2, lkl, _ = train_step(dual, batch, config, drop1, drop2)
                    sums += (l1, l2, lkl)
                means = sums / len(batches)
            except TrainingDiverged as exc:
                dual.f1 = f1 = snapshot
                if use_f2:
                    dual.f2 = f2 = snapshot2
                log.error("epoch %d aborted, parameters rolled back: %s", epoch, exc)
                diverged = True
                break

            mean_um = None
            if config.tau_m < 1.0:
                um_scores = _score_model_uncertainty(f1, instances, config, epoch)
                mean_um = float(np.mean(um_scores))
                newly, fallback = _select(um_scores, config.tau_m, config.quantile_iteration)
                if fallback:
                    log.warning(
                        "model-uncertainty threshold %.2f selected a degenerate set at "
                        "epoch %d; kept the %.0f%% most confident instances",
                        config.tau_m,
                        epoch,
                        100 * config.quantile_iteration,
                    )
                if config.accumulate_selection:
                    newly = np.union1d(selected, newly)
                next_selected = newly
                current_scores = um_scores
            else:
                next_selected = all_indices

            report = evaluate(f1, val_sentences, tag_vocab)
            clean_frac = _clean_fraction([ids[i] for i in selected], provenance)
            metrics.append(
                _metrics_row(
                    epoch,
                    int(selected.shape[0]),
                    means[0],
                    means[1] if use_f2 else None,
                    means[2] if use_f2 else None,
                    report,
                    mean_um,
                    clean_frac,
                )
            )
            state.trusted_ids = [ids[i] for i in next_selected]
            state.record(len(next_selected), mean_um, report.f1)
            selected = next_selected

            if report.f1 > best_f1_value:
                best_f1_value = report.f1
                best_epoch = epoch
                best_snapshot = f1.clone()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience:
                    break
    finally:
        metrics.close()

    return TrainResult(
        model=best_snapshot,
        last_model=f1,
        dual=dual,
        state=state,
        metrics=metrics.rows,
        best_epoch=best_epoch,
        best_f1=best_f1_value,
        diverged=diverged,
    )


def train_baseline(
    instances,
    val_sentences,
    token_vocab: TokenVocabulary,
    tag_vocab: TagVocabulary,
    config: TrainConfig,
    provenance: dict[str, str] | None = None,
    metrics_path=None,
) -> TrainResult:
    """Single model, full dataset, CRF loss only, shuffled batches; the same
    stopping rule as the bootstrap loop."""
    config.validate()
    if not instances:
        raise ValueError("empty training set")
    instances = [i.stripped() for i in instances]
    ids = [i.instance_id for i in instances]
    streams = _training_streams(config)
    model = JointModel.initialize(token_vocab, tag_vocab, config.width, streams["init_f1"], config.dropout_rate)
    dual = DualModel(f1=model, f2=None, opt1=Adam(model.parameters(), lr=config.learning_rate), opt2=None)
    dropout = DropoutConfig(rate=config.dropout_rate, mode="stochastic", seed=streams["dropout_f1"])
    shuffle_rng = np.random.default_rng([streams["shuffle"]])
    cfg = TrainConfig(**{**asdict(config), "alpha": 0.0})

    all_indices = np.arange(len(instances))
    state = SelectionState(all_ids=ids, trusted_ids=list(ids))
    state.record(len(ids), None, None)
    metrics = _MetricsLog(metrics_path)
    best_f1_value = -1.0
    best_epoch = 0
    best_snapshot = model.clone()
    epochs_since_best = 0
    diverged = False
    try:
        for epoch in range(1, config.max_epochs + 1):
            state.iteration = epoch
            snapshot = model.clone()
            try:
                batches = _epoch_batches(all_indices, None, shuffle_rng, config.batch_size, False)
                sums = np.zeros(3)
                for batch_idx in batches:
                    batch = [instances[j] for j in batch_idx]
                    l1, _, _, _ = train_step(dual, batch, cfg, dropout, None)
                    sums += (l1, 0.0, 0.0)
                means = sums / len(batches)
            except TrainingDiverged as exc:
                dual.f1 = model = snapshot
                log.error("epoch %d aborted, parameters rolled back: %s", epoch, exc)
                diverged = True
                break

            report = evaluate(model, val_sentences, tag_vocab)
            clean_frac = _clean_fraction(ids, provenance)
            metrics.append(
                _metrics_row(epoch, len(ids), means[0], None, None, report, None, clean_frac)
            )
            state.record(len(ids), None, report.f1)

            if report.f1 > best_f1_value:
                best_f1_value = report.f1
                best_epoch = epoch
                best_snapshot = model.clone()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience:
                    break
    finally:
        metrics.close()

    return TrainResult(
        model=best_snapshot,
        last_model=model,
        dual=None,
        state=state,
        metrics=metrics.rows,
        best_epoch=best_epoch,
        best_f1=best_f1_value,
        diverged=diverged,
    )
