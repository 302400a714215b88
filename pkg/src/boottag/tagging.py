"""Query-position tagging scheme for joint entity/relation extraction.

A sentence with gold entities and relations is unrolled into one tagging
instance per entity: the entity's start token is the *query position* p,
the query entity's span carries entity-type tags, every entity related to
the query (query as head) carries relation-type tags, and everything else
is O.  Decoding inverts the scheme: an entity span at p plus one relation
span per related entity yields (e1, re, e2) triplets.

Spans use BIO encoding.  Predicted sequences may violate BIO, so decoding
first repairs orphan I- tags (I-X without a matching predecessor becomes
B-X) and never fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = [
    "CorpusError",
    "Sentence",
    "TagVocabulary",
    "Instance",
    "Triplet",
    "build_instances",
    "decode_triplets",
    "enumerate_inference_queries",
    "repair_bio",
]

O_TAG = 0

PROVENANCE_CLEAN = "clean"
PROVENANCE_CORRUPTED = "corrupted"
PROVENANCE_UNKNOWN = "unknown"


class CorpusError(ValueError):
    """A sentence or corpus file violates the format invariants."""


@dataclass(frozen=True)
class Sentence:
    """One tokenized sentence with gold annotations.

    entities are (start, end_exclusive, entity_type_id) with non-overlapping
    in-bounds spans; relations are (head_entity_index, relation_type_id,
    tail_entity_index) referencing the entities list.
    """

    tokens: tuple[str, ...]
    entities: tuple[tuple[int, int, int], ...] = ()
    relations: tuple[tuple[int, int, int], ...] = ()
    provenance: str | None = None

    def validate(self, n_entity_types: int, n_relation_types: int) -> None:
        n = len(self.tokens)
        if n < 1:
            raise CorpusError("sentence has no tokens")
        occupied = [False] * n
        for k, (start, end, etype) in enumerate(self.entities):
            if not (0 <= start < end <= n):
                raise CorpusError(f"entity {k} span [{start},{end}) out of bounds for n={n}")
            if not (0 <= etype < n_entity_types):
                raise CorpusError(f"entity {k} has unknown type id {etype}")
            for i in range(start, end):
                if occupied[i]:
                    raise CorpusError(f"entity {k} overlaps another entity at token {i}")
                occupied[i] = True
        seen_pairs = set()
        for k, (head, rtype, tail) in enumerate(self.relations):
            if not (0 <= head < len(self.entities)) or not (0 <= tail < len(self.entities)):
                raise CorpusError(f"relation {k} references missing entity ({head},{tail})")
            if head == tail:
                raise CorpusError(f"relation {k} relates entity {head} to itself")
            if not (0 <= rtype < n_relation_types):
                raise CorpusError(f"relation {k} has unknown type id {rtype}")
            if (head, tail) in seen_pairs:
                raise CorpusError(f"relation {k} duplicates pair ({head},{tail})")
            seen_pairs.add((head, tail))


class TagVocabulary:
    """Closed tag set: O plus B/I tags for every entity and relation type.

    Ids are dense: O is 0, then (B,I) per entity type in declared order,
    then (B,I) per relation type.  Total count is
    1 + 2*len(entity_types) + 2*len(relation_types).
    """

    def __init__(self, entity_types: list[str], relation_types: list[str]):
        if len(set(entity_types)) != len(entity_types):
            raise CorpusError("duplicate entity type names")
        if len(set(relation_types)) != len(relation_types):
            raise CorpusError("duplicate relation type names")
        self.entity_types = list(entity_types)
        self.relation_types = list(relation_types)
        self.tag_names = ["O"]
        for name in self.entity_types:
            self.tag_names += [f"B-E:{name}", f"I-E:{name}"]
        for name in self.relation_types:
            self.tag_names += [f"B-R:{name}", f"I-R:{name}"]

    @property
    def n_tags(self) -> int:
        return len(self.tag_names)

    def b_entity(self, etype: int) -> int:
        return 1 + 2 * etype

    def i_entity(self, etype: int) -> int:
        return 2 + 2 * etype

    def b_relation(self, rtype: int) -> int:
        return 1 + 2 * len(self.entity_types) + 2 * rtype

    def i_relation(self, rtype: int) -> int:
        return 2 + 2 * len(self.entity_types) + 2 * rtype

    def tag_name(self, tag: int) -> str:
        return self.tag_names[tag]

    def split(self, tag: int) -> tuple[str, str, int]:
        """Return (prefix, family, type_id) where prefix is 'O'|'B'|'I' and
        family is ''|'E'|'R'."""
        if tag == O_TAG:
            return "O", "", -1
        k = tag - 1
        n_ent = 2 * len(self.entity_types)
        if k < n_ent:
            return ("B" if k % 2 == 0 else "I"), "E", k // 2
        k -= n_ent
        return ("B" if k % 2 == 0 else "I"), "R", k // 2

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TagVocabulary)
            and self.entity_types == other.entity_types
            and self.relation_types == other.relation_types
        )

    def __repr__(self) -> str:
        return f"TagVocabulary(entities={self.entity_types}, relations={self.relation_types})"


@dataclass
class Instance:
    """A (sentence, query position) pair with optional gold tags.

    provenance is bookkeeping for audits only; the training path consumes a
    stripped view (see bootstrap.strip_provenance).
    """

    sentence: Sentence
    query: int
    tags: list[int] | None
    instance_id: str
    provenance: str = PROVENANCE_UNKNOWN

    @property
    def n_tokens(self) -> int:
        return len(self.sentence.tokens)

    def stripped(self) -> "Instance":
        return replace(self, provenance=PROVENANCE_UNKNOWN)


@dataclass(frozen=True)
class Triplet:
    """Decoded (e1, re, e2): head span with its entity type, relation type id,
    tail span.  The scheme never tags the tail's entity type, so e2 is a bare
    span."""

    e1_span: tuple[int, int]
    e1_type: int
    relation: int
    e2_span: tuple[int, int]


def build_instances(
    sentence: Sentence,
    vocab: TagVocabulary,
    sentence_index: int = 0,
) -> list[Instance]:
    """Unroll a gold sentence into one tagging instance per entity.

    The instance for entity k has query position p = span start of k, the
    query span tagged with k's entity type, and the span of every entity j
    with a gold relation (k, r, j) tagged with relation type r.  Relations
    are tagged only in the head entity's instance.

    Raises CorpusError if the sentence violates its invariants (overlapping
    spans, dangling relation endpoints, ...).
    """
    sentence.validate(len(vocab.entity_types), len(vocab.relation_types))
    n = len(sentence.tokens)
    instances = []
    for k, (start, end, etype) in enumerate(sentence.entities):
        tags = [O_TAG] * n
        tags[start] = vocab.b_entity(etype)
        for i in range(start + 1, end):
            tags[i] = vocab.i_entity(etype)
        for head, rtype, tail in sentence.relations:
            if head != k:
                continue
            t_start, t_end, _ = sentence.entities[tail]
            tags[t_start] = vocab.b_relation(rtype)
            for i in range(t_start + 1, t_end):
                tags[i] = vocab.i_relation(rtype)
        instances.append(
            Instance(
                sentence=sentence,
                query=start,
                tags=tags,
                instance_id=f"s{sentence_index}e{k}",
                provenance=sentence.provenance or PROVENANCE_UNKNOWN,
            )
        )
    return instances


def repair_bio(tags: list[int], vocab: TagVocabulary) -> list[int]:
    """Repair BIO violations: an I-X whose predecessor is not B-X or I-X of
    the same label becomes B-X.  Total on arbitrary tag sequences."""
    repaired = list(tags)
    for i, tag in enumerate(repaired):
        prefix, family, type_id = vocab.split(tag)
        if prefix != "I":
            continue
        if i == 0:
            repaired[i] = tag - 1  # I ids are always B id + 1
            continue
        p_prefix, p_family, p_type = vocab.split(repaired[i - 1])
        if p_prefix == "O" or (p_family, p_type) != (family, type_id):
            repaired[i] = tag - 1
    return repaired


def _spans(tags: list[int], vocab: TagVocabulary) -> list[tuple[int, int, str, int]]:
    """Maximal (start, end, family, type_id) spans of a repaired sequence."""
    spans = []
    i = 0
    n = len(tags)
    while i < n:
        prefix, family, type_id = vocab.split(tags[i])
        if prefix != "B":
            i += 1
            continue
        j = i + 1
        while j < n:
            p2, f2, t2 = vocab.split(tags[j])
            if p2 == "I" and (f2, t2) == (family, type_id):
                j += 1
            else:
                break
        spans.append((i, j, family, type_id))
        i = j
    return spans


def decode_triplets(tags: list[int], vocab: TagVocabulary, query: int) -> list[Triplet]:
    """Invert the tagging scheme for one instance.

    e1 is the entity span containing the query position; every relation span
    yields one triplet with that span as e2.  Malformed sequences are
    repaired first, so decoding is total.  Returns [] when no entity span
    covers the query.
    """
    repaired = repair_bio(tags, vocab)
    spans = _spans(repaired, vocab)
    e1 = None
    for start, end, family, type_id in spans:
        if family == "E" and start <= query < end:
            e1 = (start, end, type_id)
            break
    if e1 is None:
        return []
    triplets = []
    for start, end, family, type_id in spans:
        if family != "R":
            continue
        triplets.append(
            Triplet(
                e1_span=(e1[0], e1[1]),
                e1_type=e1[2],
                relation=type_id,
                e2_span=(start, end),
            )
        )
    return triplets


def enumerate_inference_queries(sentence: Sentence) -> list[int]:
    """All token positions.  Gold spans are unknown at inference, so every
    position is queried and downstream aggregation dedupes the triplets."""
    return list(range(len(sentence.tokens)))
