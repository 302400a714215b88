"""Triplet-level evaluation and selection-quality audits.

A predicted triplet counts as correct on exact match of (e1 span, e1 type,
relation type, e2 span); the tagging scheme never expresses the tail's
entity type, so e2 matches on span alone.  Predictions for a sentence are
the deduplicated union of Viterbi decodes over every query position.
Precision/recall/F1 are micro-averaged over the corpus, with 0/0 defined
as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tagging import (
    PROVENANCE_CLEAN,
    PROVENANCE_CORRUPTED,
    Instance,
    Sentence,
    TagVocabulary,
    decode_triplets,
    enumerate_inference_queries,
)

__all__ = ["EvalReport", "evaluate", "predict_triplets", "split_validation", "selection_audit"]


def _f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def _ratio(num: int, den: int) -> float:
    return 0.0 if den == 0 else num / den


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    n_predicted: int
    n_gold: int
    n_correct: int
    per_relation: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "predicted": self.n_predicted,
                "gold": self.n_gold,
                "correct": self.n_correct,
                "per_relation": self.per_relation,
            }
        )

    def format_table(self) -> str:
        lines = [
            f"{'relation':<16} {'prec':>7} {'rec':>7} {'f1':>7} {'pred':>6} {'gold':>6}",
            "-" * 53,
        ]
        for name, row in sorted(self.per_relation.items()):
            lines.append(
                f"{name:<16} {row['precision']:>7.3f} {row['recall']:>7.3f} "
                f"{row['f1']:>7.3f} {row['predicted']:>6d} {row['gold']:>6d}"
            )
        lines.append("-" * 53)
        lines.append(
            f"{'micro':<16} {self.precision:>7.3f} {self.recall:>7.3f} "
            f"{self.f1:>7.3f} {self.n_predicted:>6d} {self.n_gold:>6d}"
        )
        return "\n".join(lines)


def gold_triplets(sentence: Sentence) -> set[tuple]:
    triplets = set()
    for head, rtype, tail in sentence.relations:
        h_start, h_end, h_type = sentence.entities[head]
        t_start, t_end, _ = sentence.entities[tail]
        triplets.add(((h_start, h_end), h_type, rtype, (t_start, t_end)))
    return triplets


def predict_triplets(model, sentence: Sentence, vocab: TagVocabulary) -> set[tuple]:
    """Deduplicated union of decoded triplets over every query position."""
    predictions = set()
    for p in enumerate_inference_queries(sentence):
        instance = Instance(sentence=sentence, query=p, tags=None, instance_id="")
        tags = model.decode(instance)
        for triplet in decode_triplets(tags, vocab, p):
            predictions.add((triplet.e1_span, triplet.e1_type, triplet.relation, triplet.e2_span))
    return predictions


def evaluate(model, sentences, vocab: TagVocabulary) -> EvalReport:
    n_predicted = n_gold = n_correct = 0
    per_rel = {
        name: {"predicted": 0, "gold": 0, "correct": 0} for name in vocab.relation_types
    }
    for sentence in sentences:
        gold = gold_triplets(sentence)
        predicted = predict_triplets(model, sentence, vocab)
        correct = predicted & gold
        n_predicted += len(predicted)
        n_gold += len(gold)
        n_correct += len(correct)
        for bucket, triplets in (("predicted", predicted), ("gold", gold), ("correct", correct)):
            for _, _, rtype, _ in triplets:
                per_rel[vocab.relation_types[rtype]][bucket] += 1
    precision = _ratio(n_correct, n_predicted)
    recall = _ratio(n_correct, n_gold)
    per_relation = {}
    for name, counts in per_rel.items():
        p = _ratio(counts["correct"], counts["predicted"])
        r = _ratio(counts["correct"], counts["gold"])
        per_relation[name] = {
            "precision": p,
            "recall": r,
            "f1": _f1(p, r),
            "predicted": counts["predicted"],
            "gold": counts["gold"],
            "correct": counts["correct"],
        }
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        n_predicted=n_predicted,
        n_gold=n_gold,
        n_correct=n_correct,
        per_relation=per_relation,
    )


def split_validation(sentences, fraction: float, seed: int):
    """Seed-deterministic disjoint (validation, held_out) split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed])
    order = rng.permutation(len(sentences))
    k = max(1, int(round(fraction * len(sentences))))
    val_idx = set(order[:k].tolist())
    validation = [s for i, s in enumerate(sentences) if i in val_idx]
    held_out = [s for i, s in enumerate(sentences) if i not in val_idx]
    return validation, held_out


def selection_audit(state, provenance: dict[str, str] | None) -> dict:
    """Per-iteration clean fractions of the selected set and the full set,
    and their ratio.  Reports unavailable (not an error) without provenance."""

    def clean_fraction(ids) -> float | None:
        flags = [provenance.get(i) for i in ids]
        flags = [f for f in flags if f in (PROVENANCE_CLEAN, PROVENANCE_CORRUPTED)]
        if not flags:
            return None
        return sum(1 for f in flags if f == PROVENANCE_CLEAN) / len(flags)

    if not provenance:
        return {"available": False, "iterations": []}
    full = clean_fraction(state.all_ids)
    if full is None:
        return {"available": False, "iterations": []}
    iterations = []
    for row, trusted in zip(state.history, state.trusted_history):
        selected = clean_fraction(trusted)
        iterations.append(
            {
                "iteration": row["iteration"],
                "n_selected": row["n_selected"],
                "clean_fraction_selected": selected,
                "clean_fraction_full": full,
                "enrichment": None if (selected is None or full == 0) else selected / full,
            }
        )
    return {"available": True, "iterations": iterations}
