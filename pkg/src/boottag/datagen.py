"""Synthetic corpus generation, noise injection, and corpus I/O.

The generator fills token templates with lexicon entries, producing
sentences with known entities and relations.  Noise injection then mimics
the two failure modes of rule-aligned supervision: bad relation labels
(flip to a wrong type, drop, or hallucinate a relation between an
unrelated entity pair) and bad entity tags (type flip, span boundary off
by one).  Every sentence keeps an exact record of what was done to it, and
per-instance clean/corrupted flags are derived by diffing the tag
sequences each instance would get from the clean and the noisy sentence.

Corpus files are JSON lines: a header row carrying the format version and
the type inventories, then one sentence object per line.  The provenance
record travels in a sidecar file so the training path can consume a
provenance-free view.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .tagging import (
    PROVENANCE_CLEAN,
    PROVENANCE_CORRUPTED,
    CorpusError,
    Instance,
    Sentence,
    TagVocabulary,
    build_instances,
)

__all__ = [
    "Template",
    "GrammarSpec",
    "NoiseSpec",
    "NoiseReport",
    "Corpus",
    "generate_corpus",
    "inject_noise",
    "save_corpus",
    "load_corpus",
    "save_provenance",
    "load_provenance",
    "instances_from_corpus",
    "default_grammar",
    "load_grammar",
]

log = logging.getLogger("boottag")

FORMAT_NAME = "boottag-corpus"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class Template:
    """A token pattern with entity slots {e0}, {e1}, ... and the relations
    asserted between slots."""

    pattern: str
    entity_types: tuple[str, ...]
    relations: tuple[tuple[int, str, int], ...] = ()
    weight: float = 1.0


@dataclass
class GrammarSpec:
    entity_lexicons: dict[str, list[str]]  # surface forms, possibly multi-token
    templates: list[Template]
    distractor_vocabulary: list[str]
    jitter_probability: float = 0.0
    jitter_max_tokens: int = 2

    def validate(self) -> None:
        if not self.templates:
            raise ValueError("grammar has no templates")
        for name, lexicon in self.entity_lexicons.items():
            if not lexicon:
                raise ValueError(f"empty lexicon for entity type {name!r}")
        relation_names = {r for t in self.templates for (_, r, _) in t.relations}
        for template in self.templates:
            for etype in template.entity_types:
                if etype not in self.entity_lexicons:
                    raise ValueError(f"template references unknown entity type {etype!r}")
            for head, _, tail in template.relations:
                k = len(template.entity_types)
                if not (0 <= head < k and 0 <= tail < k) or head == tail:
                    raise ValueError(f"template has bad relation slots: {template.pattern!r}")
        if self.jitter_probability > 0 and not self.distractor_vocabulary:
            raise ValueError("length jitter needs a distractor vocabulary")
        if not 0.0 <= self.jitter_probability <= 1.0:
            raise ValueError("jitter probability must be in [0, 1]")
        self._relation_names = sorted(relation_names)

    def entity_types(self) -> list[str]:
        return sorted(self.entity_lexicons)

    def relation_types(self) -> list[str]:
        names = {r for t in self.templates for (_, r, _) in t.relations}
        return sorted(names)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-annotation corruption rates.

    relation_rate: probability that a gold relation label is replaced by a
    wrong type or dropped (each gold relation draws independently); a
    sentence without gold relations instead draws once for a hallucinated
    relation between an unrelated entity pair, the false-positive mode of
    rule-based alignment.  entity_rate: probability that an entity's type
    is flipped or its span boundary shifted by one (each entity draws
    independently).
    """

    relation_rate: float
    entity_rate: float
    seed: int = 0

    def __post_init__(self):
        for name in ("relation_rate", "entity_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")


@dataclass
class NoiseReport:
    """Realized corruption statistics, per noise family over the units each
    rate applies to (gold relations / entities / hallucination-eligible
    sentences)."""

    n_sentences: int
    n_relations: int = 0
    relation_corrupted: int = 0
    hallucination_eligible: int = 0
    hallucinated: int = 0
    n_entities: int = 0
    entity_corrupted: int = 0
    corrupted_sentences: int = 0

    @property
    def realized_relation_rate(self) -> float:
        return self.relation_corrupted / self.n_relations if self.n_relations else 0.0

    @property
    def realized_entity_rate(self) -> float:
        return self.entity_corrupted / self.n_entities if self.n_entities else 0.0

    @property
    def corrupted_fraction(self) -> float:
        return self.corrupted_sentences / self.n_sentences if self.n_sentences else 0.0


@dataclass
class Corpus:
    sentences: list[Sentence]
    entity_types: list[str]
    relation_types: list[str]

    def tag_vocabulary(self) -> TagVocabulary:
        return TagVocabulary(self.entity_types, self.relation_types)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Corpus)
            and self.entity_types == other.entity_types
            and self.relation_types == other.relation_types
            and self.sentences == other.sentences
        )


def _fill_template(template: Template, grammar: GrammarSpec, rng, entity_ids, relation_ids):
    chunks = template.pattern.split()
    tokens: list[str] = []
    spans: dict[int, tuple[int, int]] = {}
    picks: dict[int, str] = {}
    for slot, etype in enumerate(template.entity_types):
        lexicon = grammar.entity_lexicons[etype]
        for _ in range(8):
            surface = lexicon[int(rng.integers(len(lexicon)))]
            if surface not in picks.values():
                break
        picks[slot] = surface
    for chunk in chunks:
        if chunk.startswith("{e") and chunk.endswith("}"):
            slot = int(chunk[2:-1])
            parts = picks[slot].split()
            spans[slot] = (len(tokens), len(tokens) + len(parts))
            tokens.extend(parts)
        else:
            tokens.append(chunk)
    if grammar.jitter_probability > 0 and rng.random() < grammar.jitter_probability:
        extra = int(rng.integers(1, grammar.jitter_max_tokens + 1))
        fillers = [
            grammar.distractor_vocabulary[int(rng.integers(len(grammar.distractor_vocabulary)))]
            for _ in range(extra)
        ]
        if rng.random() < 0.5:
            tokens = fillers + tokens
            spans = {s: (a + extra, b + extra) for s, (a, b) in spans.items()}
        else:
            tokens = tokens + fillers
    entities = tuple(
        (spans[slot][0], spans[slot][1], entity_ids[template.entity_types[slot]])
        for slot in range(len(template.entity_types))
    )
    relations = tuple(
        (head, relation_ids[rname], tail) for head, rname, tail in template.relations
    )
    return Sentence(tokens=tuple(tokens), entities=entities, relations=relations, provenance=PROVENANCE_CLEAN)


def generate_corpus(grammar: GrammarSpec, size: int, seed: int) -> Corpus:
    """Deterministic clean corpus: per-sentence derived RNG streams, every
    sentence valid by construction."""
    grammar.validate()
    entity_types = grammar.entity_types()
    relation_types = grammar.relation_types()
    entity_ids = {name: i for i, name in enumerate(entity_types)}
    relation_ids = {name: i for i, name in enumerate(relation_types)}
    weights = np.array([t.weight for t in grammar.templates], dtype=np.float64)
    weights /= weights.sum()
    sentences = []
    for index in range(size):
        rng = np.random.default_rng([seed, index])
        template = grammar.templates[int(rng.choice(len(grammar.templates), p=weights))]
        sentence = _fill_template(template, grammar, rng, entity_ids, relation_ids)
        sentence.validate(len(entity_types), len(relation_types))
        sentences.append(sentence)
    counts: dict[str, int] = {}
    for s in sentences:
        for _, rtype, _ in s.relations:
            counts[relation_types[rtype]] = counts.get(relation_types[rtype], 0) + 1
    log.info("generated %d sentences; relation distribution: %s", size, counts)
    return Corpus(sentences=sentences, entity_types=entity_types, relation_types=relation_types)


def _unrelated_pairs(sentence: Sentence):
    related = {(h, t) for h, _, t in sentence.relations}
    pairs = []
    for h in range(len(sentence.entities)):
        for t in range(len(sentence.entities)):
            if h != t and (h, t) not in related and (t, h) not in related:
                pairs.append((h, t))
    return pairs


def _corrupt_relation_labels(sentence: Sentence, rate: float, n_relation_types: int, rng, report):
    """Independent draw per gold relation (flip or drop); relation-free
    sentences draw once for a hallucinated relation on an unrelated pair."""
    descriptors = []
    if sentence.relations:
        report.n_relations += len(sentence.relations)
        new_relations = []
        for head, rtype, tail in sentence.relations:
            if rng.random() >= rate:
                new_relations.append((head, rtype, tail))
                continue
            report.relation_corrupted += 1
            can_flip = n_relation_types >= 2
            if can_flip and rng.random() < 0.5:
                new_type = int(rng.integers(n_relation_types - 1))
                if new_type >= rtype:
                    new_type += 1
                new_relations.append((head, new_type, tail))
                descriptors.append(f"rel_flip:{head}->{tail}:{rtype}->{new_type}")
            else:
                descriptors.append(f"rel_drop:{head}->{tail}:{rtype}")
        return replace(sentence, relations=tuple(new_relations)), descriptors
    pairs = _unrelated_pairs(sentence)
    if pairs and n_relation_types > 0:
        report.hallucination_eligible += 1
        if rng.random() < rate:
            report.hallucinated += 1
            head, tail = pairs[int(rng.integers(len(pairs)))]
            rtype = int(rng.integers(n_relation_types))
            descriptors.append(f"rel_hallucinate:{head}->{tail}:{rtype}")
            return replace(sentence, relations=((head, rtype, tail),)), descriptors
    return sentence, descriptors


def _valid_shift(sentence: Sentence, k: int, start: int, end: int):
    """Boundary shifts of +-1 that keep the span non-empty, in bounds, and
    non-overlapping."""
    n = len(sentence.tokens)
    occupied = set()
    for j, (s, e, _) in enumerate(sentence.entities):
        if j != k:
            occupied.update(range(s, e))
    options = []
    for new_start, new_end in ((start - 1, end), (start + 1, end), (start, end - 1), (start, end + 1)):
        if not (0 <= new_start < new_end <= n):
            continue
        if any(i in occupied for i in range(new_start, new_end)):
            continue
        options.append((new_start, new_end))
    return options


def _corrupt_entities(sentence: Sentence, rate: float, n_entity_types: int, rng, report):
    """Independent draw per entity: type flip or boundary shift, whichever
    modes stay valid against the current spans."""
    descriptors = []
    report.n_entities += len(sentence.entities)
    for k in range(len(sentence.entities)):
        if rng.random() >= rate:
            continue
        start, end, etype = sentence.entities[k]
        modes = []
        if n_entity_types >= 2:
            modes.append("type")
        shifts = _valid_shift(sentence, k, start, end)
        if shifts:
            modes.append("shift")
        if not modes:
            continue
        report.entity_corrupted += 1
        entities = list(sentence.entities)
        mode = modes[int(rng.integers(len(modes)))]
        if mode == "type":
            new_type = int(rng.integers(n_entity_types - 1))
            if new_type >= etype:
                new_type += 1
            entities[k] = (start, end, new_type)
            descriptors.append(f"ent_type:{k}:{etype}->{new_type}")
        else:
            new_start, new_end = shifts[int(rng.integers(len(shifts)))]
            entities[k] = (new_start, new_end, etype)
            descriptors.append(f"ent_shift:{k}:[{start},{end})->[{new_start},{new_end})")
        sentence = replace(sentence, entities=tuple(entities))
    return sentence, descriptors


def _instance_flags(clean: Sentence, noisy: Sentence, vocab: TagVocabulary) -> list[str]:
    """Per-instance clean/corrupted flags: an instance is corrupted iff its
    query position or gold tag sequence changed."""
    clean_instances = build_instances(clean, vocab)
    noisy_instances = build_instances(noisy, vocab)
    flags = []
    for a, b in zip(clean_instances, noisy_instances):
        same = a.query == b.query and a.tags == b.tags
        flags.append(PROVENANCE_CLEAN if same else PROVENANCE_CORRUPTED)
    return flags


def inject_noise(corpus: Corpus, noise: NoiseSpec):
    """Corrupt a clean corpus.

    Returns (noisy_corpus, provenance_records, NoiseReport).  Records carry,
    per sentence: the flag, the corruption descriptors, and per-instance
    flags aligned with the entity order.
    """
    vocab = corpus.tag_vocabulary()
    n_rel = len(corpus.relation_types)
    n_ent = len(corpus.entity_types)
    sentences = []
    records = []
    report = NoiseReport(len(corpus.sentences))
    for index, clean in enumerate(corpus.sentences):
        rng = np.random.default_rng([noise.seed, index])
        noisy, descriptors = _corrupt_relation_labels(clean, noise.relation_rate, n_rel, rng, report)
        noisy, ent_descriptors = _corrupt_entities(noisy, noise.entity_rate, n_ent, rng, report)
        descriptors += ent_descriptors
        flag = PROVENANCE_CORRUPTED if descriptors else PROVENANCE_CLEAN
        noisy = replace(noisy, provenance=flag)
        noisy.validate(n_ent, n_rel)
        if descriptors:
            report.corrupted_sentences += 1
        records.append(
            {
                "sentence": index,
                "provenance": flag,
                "corruptions": descriptors,
                "instances": _instance_flags(clean, noisy, vocab),
            }
        )
        sentences.append(noisy)
    log.info(
        "noise: %d/%d sentences corrupted (relation %.3f, entity %.3f)",
        report.corrupted_sentences,
        report.n_sentences,
        report.realized_relation_rate,
        report.realized_entity_rate,
    )
    noisy_corpus = Corpus(sentences, list(corpus.entity_types), list(corpus.relation_types))
    return noisy_corpus, records, report


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as handle:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "entity_types": corpus.entity_types,
            "relation_types": corpus.relation_types,
        }
        handle.write(json.dumps(header) + "\n")
        for sentence in corpus.sentences:
            row = {
                "tokens": list(sentence.tokens),
                "entities": [
                    [s, e, corpus.entity_types[t]] for s, e, t in sentence.entities
                ],
                "relations": [
                    [h, corpus.relation_types[r], t] for h, r, t in sentence.relations
                ],
            }
            if sentence.provenance is not None:
                row["provenance"] = sentence.provenance
            handle.write(json.dumps(row) + "\n")


def load_corpus(path) -> Corpus:
    with open(path) as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:1: bad header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise CorpusError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise CorpusError(
            f"{path}: corpus version {header.get('version')!r}, expected {FORMAT_VERSION!r}"
        )
    entity_types = list(header["entity_types"])
    relation_types = list(header["relation_types"])
    entity_ids = {name: i for i, name in enumerate(entity_types)}
    relation_ids = {name: i for i, name in enumerate(relation_types)}
    sentences = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entities = tuple((s, e, entity_ids[t]) for s, e, t in row.get("entities", []))
            relations = tuple((h, relation_ids[r], t) for h, r, t in row.get("relations", []))
            sentence = Sentence(
                tokens=tuple(row["tokens"]),
                entities=entities,
                relations=relations,
                provenance=row.get("provenance"),
            )
            sentence.validate(len(entity_types), len(relation_types))
        except CorpusError:
            raise
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed sentence: {exc}") from exc
        sentences.append(sentence)
    return Corpus(sentences, entity_types, relation_types)


def save_provenance(records, path) -> None:
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


def load_provenance(path) -> list[dict]:
    records = []
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed provenance row: {exc}") from exc
    return records


def instances_from_corpus(corpus: Corpus, vocab: TagVocabulary, provenance_records=None) -> list[Instance]:
    """Training/scoring instances for a whole corpus.  When a provenance
    sidecar is given, its per-instance flags override the sentence-level
    ones."""
    flag_by_sentence = {}
    if provenance_records:
        for record in provenance_records:
            flag_by_sentence[record["sentence"]] = record.get("instances", [])
    instances = []
    for index, sentence in enumerate(corpus.sentences):
        built = build_instances(sentence, vocab, sentence_index=index)
        flags = flag_by_sentence.get(index)
        if flags is not None and len(flags) == len(built):
            for instance, flag in zip(built, flags):
                instance.provenance = flag
        instances.extend(built)
    return instances


def default_grammar() -> GrammarSpec:
    """Built-in grammar: three entity types, four relation types, ambiguous
    cues shared across relations, and relation-free distractor patterns."""
    per = [
        "alice", "bob", "carol", "dave", "erin", "frank", "grace", "henry",
        "irene", "jack", "karen", "leo", "mona", "nate", "olga", "peter",
        "quinn", "rosa", "tina", "victor", "wendy", "yuri",
        "mary ann", "de la cruz", "van dam", "lee young", "al amin", "jo beth",
        "jordan", "mercury", "hudson",
    ]
    org = [
        "acme", "initech", "globex", "hooli", "vandelay", "wonka", "stark",
        "wayne", "umbrella", "cyberdyne", "tyrell", "aperture", "octan",
        "zorg", "monarch", "virtucon",
        "globex corp", "initech labs", "stark industries", "wayne enterprises",
        "umbrella group", "octan energy", "pied piper", "massive dynamic",
        "jordan", "mercury", "hudson",
    ]
    loc = [
        "paris", "berlin", "madrid", "oslo", "cairo", "lima", "quito",
        "dakar", "hanoi", "osaka", "perth", "bogota", "dublin", "leeds",
        "turin", "geneva",
        "new york", "los angeles", "santa fe", "port louis", "san juan",
        "cape town", "abu dhabi", "kuala lumpur",
        "mercury", "hudson",
    ]
    templates = [
        # works_for: person -> org
        Template("{e0} works for {e1} .", ("PER", "ORG"), ((0, "works_for", 1),), 0.9),
        Template("{e0} is employed by {e1} .", ("PER", "ORG"), ((0, "works_for", 1),), 0.7),
        Template("{e1} hired {e0} last spring .", ("PER", "ORG"), ((0, "works_for", 1),), 0.5),
        Template("{e0} joined {e1} .", ("PER", "ORG"), ((0, "works_for", 1),), 0.4),
        Template("{e0} started at {e1} recently .", ("PER", "ORG"), ((0, "works_for", 1),), 0.2),
        # leads: person -> org, same type signature as works_for
        Template("{e0} leads {e1} .", ("PER", "ORG"), ((0, "leads", 1),), 0.8),
        Template("{e0} runs {e1} .", ("PER", "ORG"), ((0, "leads", 1),), 0.6),
        Template("{e1} is chaired by {e0} .", ("PER", "ORG"), ((0, "leads", 1),), 0.4),
        Template("{e0} took charge of {e1} .", ("PER", "ORG"), ((0, "leads", 1),), 0.2),
        # based_in: org -> loc
        Template("{e0} is based in {e1} .", ("ORG", "LOC"), ((0, "based_in", 1),), 0.9),
        Template("{e0} opened offices in {e1} .", ("ORG", "LOC"), ((0, "based_in", 1),), 0.5),
        Template("{e0} operates from {e1} .", ("ORG", "LOC"), ((0, "based_in", 1),), 0.4),
        # moved to: cue shared with lives_in, disambiguated by the head type
        Template("{e0} moved to {e1} .", ("ORG", "LOC"), ((0, "based_in", 1),), 0.3),
        # lives_in: person -> loc
        Template("{e0} lives in {e1} .", ("PER", "LOC"), ((0, "lives_in", 1),), 0.9),
        Template("{e0} moved to {e1} .", ("PER", "LOC"), ((0, "lives_in", 1),), 0.5),
        Template("{e0} settled in {e1} .", ("PER", "LOC"), ((0, "lives_in", 1),), 0.4),
        # two relations in one sentence
        Template(
            "{e0} works for {e1} in {e2} .",
            ("PER", "ORG", "LOC"),
            ((0, "works_for", 1), (1, "based_in", 2)),
            0.5,
        ),
        Template(
            "{e0} leads {e1} from {e2} .",
            ("PER", "ORG", "LOC"),
            ((0, "leads", 1), (1, "based_in", 2)),
            0.3,
        ),
        # distractors: entity pairs without relations
        Template("{e0} met {e1} yesterday .", ("PER", "PER"), (), 0.6),
        Template("{e0} mentioned {e1} in passing .", ("PER", "ORG"), (), 0.5),
        Template("{e0} and {e1} were unrelated .", ("ORG", "LOC"), (), 0.4),
        Template("{e0} never visited {e1} .", ("PER", "LOC"), (), 0.4),
        Template("{e0} declined to comment on {e1} .", ("ORG", "ORG"), (), 0.3),
        # single entities and empty filler
        Template("{e0} gave a short speech .", ("PER",), (), 0.3),
        Template("analysts discussed {e0} briefly .", ("ORG",), (), 0.2),
        Template("nothing notable happened today .", (), (), 0.1),
    ]
    distractors = [
        "reportedly", "yesterday", "apparently", "meanwhile", "today",
        "quietly", "suddenly", "officially", "allegedly", "recently",
    ]
    return GrammarSpec(
        entity_lexicons={"PER": per, "ORG": org, "LOC": loc},
        templates=templates,
        distractor_vocabulary=distractors,
        jitter_probability=0.25,
        jitter_max_tokens=2,
    )


def load_grammar(path) -> GrammarSpec:
    with open(path) as handle:
        raw = json.load(handle)
    templates = [
        Template(
            pattern=t["pattern"],
            entity_types=tuple(t.get("entity_types", ())),
            relations=tuple((h, r, t2) for h, r, t2 in t.get("relations", ())),
            weight=float(t.get("weight", 1.0)),
        )
        for t in raw["templates"]
    ]
    grammar = GrammarSpec(
        entity_lexicons={k: list(v) for k, v in raw["entity_lexicons"].items()},
        templates=templates,
        distractor_vocabulary=list(raw.get("distractor_vocabulary", [])),
        jitter_probability=float(raw.get("jitter_probability", 0.0)),
        jitter_max_tokens=int(raw.get("jitter_max_tokens", 2)),
    )
    grammar.validate()
    return grammar
