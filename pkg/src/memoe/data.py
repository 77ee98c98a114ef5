"""Synthetic fact-editing corpus generator.

Facts live in a templated micro-language over a closed vocabulary
("the capital of bogi is vasu ."), organized into relation families that
double as group labels.  A corpus bundles pretraining sentences for the
base model, counterfactual edit records with rephrase and locality
probes, and the gazetteer that anchor routing matches against.

Locality probes are drawn from a dedicated pool of facts that is
pretrained alongside the editable facts but never exposed as an edit
record, so locality stays meaningful no matter which subset of records
an experiment edits.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

from .anchors import Gazetteer
from .rng import substream

# (family name, fact template, rephrase templates); templates are prompts
# that the object word completes, sentence = prompt + " <object> ."
FAMILIES = (
    ("capital", "the capital of {s} is", (
        "the capital city of {s} is",
        "{s} has capital",
        "the seat of {s} is",
    )),
    ("leader", "the leader of {s} is", (
        "{s} is led by",
        "the ruler of {s} is",
        "the chief of {s} is",
    )),
    ("language", "the language of {s} is", (
        "the people of {s} speak",
        "{s} speaks",
        "the tongue of {s} is",
    )),
    ("currency", "the currency of {s} is", (
        "{s} pays with",
        "the money of {s} is",
        "the coin of {s} is",
    )),
    ("anthem", "the anthem of {s} is", (
        "{s} sings",
        "the song of {s} is",
        "the hymn of {s} is",
    )),
)

MAX_REPHRASES = min(len(r) for _, _, r in FAMILIES)

TEMPLATE_WORDS = frozenset(
    w
    for _, fact, rephrases in FAMILIES
    for tpl in (fact,) + rephrases
    for w in tpl.replace("{s}", "").split()
) | {"."}


def default_vocab(size=240):
    """Deterministic pool of pronounceable two-syllable entity words."""
    syllables = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
    words = ["".join(p) for p in itertools.product(syllables, repeat=2)]
    # stride through the product order so neighboring words differ
    step = 97
    picked = [words[(i * step) % len(words)] for i in range(size)]
    assert len(set(picked)) == size
    return picked


@dataclass(frozen=True)
class EditRecord:
    """One counterfactual edit plus its rephrase and locality probes."""

    record_id: str
    group_id: str
    subject: str
    prompt: str
    target_new: str
    rephrase_prompt: str
    locality_prompt: str
    locality_ground_truth: str | None = None

    def __post_init__(self):
        for name in ("record_id", "group_id", "subject", "prompt", "target_new",
                     "rephrase_prompt", "locality_prompt"):
            if not getattr(self, name):
                raise ValueError("EditRecord field %r is empty" % name)


RECORD_FIELDS = (
    "record_id",
    "group_id",
    "subject",
    "prompt",
    "target_new",
    "rephrase_prompt",
    "locality_prompt",
    "locality_ground_truth",
)


@dataclass(frozen=True)
class CorpusSpec:
    num_facts: int = 50
    num_relations: int = 5
    entities_per_relation: int = 10
    rephrases_per_fact: int = 2
    seed: int = 42
    vocab: tuple = field(default_factory=lambda: tuple(default_vocab()))

    def __post_init__(self):
        if self.num_facts < 2:
            raise ValueError("num_facts must be >= 2")
        if not 1 <= self.num_relations <= len(FAMILIES):
            raise ValueError("num_relations must be in 1..%d" % len(FAMILIES))
        if not 1 <= self.rephrases_per_fact <= MAX_REPHRASES:
            raise ValueError("rephrases_per_fact must be in 1..%d" % MAX_REPHRASES)
        if self.num_facts > self.num_relations * self.entities_per_relation:
            raise ValueError(
                "num_facts=%d exceeds num_relations*entities_per_relation=%d"
                % (self.num_facts, self.num_relations * self.entities_per_relation)
            )
        object.__setattr__(self, "vocab", tuple(self.vocab))

    def to_dict(self):
        return {
            "num_facts": self.num_facts,
            "num_relations": self.num_relations,
            "entities_per_relation": self.entities_per_relation,
            "rephrases_per_fact": self.rephrases_per_fact,
            "seed": self.seed,
            "vocab": list(self.vocab),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError("unknown CorpusSpec fields: %s" % sorted(unknown))
        return cls(**d)


@dataclass(frozen=True)
class Corpus:
    pretrain: tuple
    records: tuple
    gazetteer: Gazetteer


def _family_sizes(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def generate(spec: CorpusSpec) -> Corpus:
    """Build (pretraining sentences, edit records, gazetteer) from the seed."""
    pool = []
    seen = set()
    for w in spec.vocab:
        if w not in TEMPLATE_WORDS and w not in seen:
            seen.add(w)
            pool.append(w)
    # editable facts and their locality partners each need a subject and an object
    need = 4 * spec.num_facts
    if len(pool) < need:
        raise ValueError(
            "vocabulary too small: %d usable tokens, need at least %d" % (len(pool), need)
        )

    rng = substream(spec.seed, "corpus")
    pool = [pool[i] for i in rng.permutation(len(pool))]
    subjects = pool[: spec.num_facts]
    objects = pool[spec.num_facts : 2 * spec.num_facts]
    loc_subjects = pool[2 * spec.num_facts : 3 * spec.num_facts]
    loc_objects = pool[3 * spec.num_facts : 4 * spec.num_facts]

    sizes = _family_sizes(spec.num_facts, spec.num_relations)
    if min(sizes) < 2:
        raise ValueError(
            "each relation family needs >= 2 facts for counterfactual targets, got sizes %s"
            % sizes
        )

    facts = []       # (family index, subject, object)
    loc_facts = []   # same shape, locality-only pool
    cursor = 0
    for fam_idx, size in enumerate(sizes):
        for j in range(cursor, cursor + size):
            facts.append((fam_idx, subjects[j], objects[j]))
            loc_facts.append((fam_idx, loc_subjects[j], loc_objects[j]))
        cursor += size

    pretrain = []
    for fam_idx, subj, obj in facts:
        _, fact_tpl, rephrases = FAMILIES[fam_idx]
        pretrain.append("%s %s ." % (fact_tpl.format(s=subj), obj))
        for tpl in rephrases[: spec.rephrases_per_fact]:
            pretrain.append("%s %s ." % (tpl.format(s=subj), obj))
    for fam_idx, subj, obj in loc_facts:
        _, fact_tpl, _ = FAMILIES[fam_idx]
        pretrain.append("%s %s ." % (fact_tpl.format(s=subj), obj))

    # group objects by family for counterfactual draws
    fam_objects = {}
    for fam_idx, _, obj in facts:
        fam_objects.setdefault(fam_idx, []).append(obj)

    records = []
    for i, (fam_idx, subj, obj) in enumerate(facts):
        fam_name, fact_tpl, rephrases = FAMILIES[fam_idx]
        others = [o for o in fam_objects[fam_idx] if o != obj]
        target = others[int(rng.integers(len(others)))]
        reph_tpl = rephrases[int(rng.integers(spec.rephrases_per_fact))]
        # locality probe: a pool fact about an unrelated subject, preferring
        # a different relation family when one exists
        loc_candidates = [lf for lf in loc_facts if lf[0] != fam_idx] or loc_facts
        loc_fam, loc_subj, _ = loc_candidates[int(rng.integers(len(loc_candidates)))]
        records.append(
            EditRecord(
                record_id="r%04d" % i,
                group_id=fam_name,
                subject=subj,
                prompt=fact_tpl.format(s=subj),
                target_new=target,
                rephrase_prompt=reph_tpl.format(s=subj),
                locality_prompt=FAMILIES[loc_fam][1].format(s=loc_subj),
            )
        )

    entries = [(subj, "q%04d" % i) for i, subj in enumerate(subjects)]
    entries += [(subj, "q%04d" % (len(subjects) + i)) for i, subj in enumerate(loc_subjects)]
    return Corpus(pretrain=tuple(pretrain), records=tuple(records), gazetteer=Gazetteer(entries))


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {name: getattr(rec, name) for name in RECORD_FIELDS}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            for name in RECORD_FIELDS:
                if name not in row:
                    raise ValueError("line %d: missing field %r" % (lineno, name))
            extra = set(row) - set(RECORD_FIELDS)
            if extra:
                raise ValueError("line %d: unknown fields %s" % (lineno, sorted(extra)))
            records.append(EditRecord(**row))
    return records


def attach_locality_ground_truth(records, snapshot, tokenizer):
    """Fill locality_ground_truth with the base model's one-token greedy answer."""
    from .model import greedy_decode

    out = []
    for rec in records:
        ids = greedy_decode(snapshot, tokenizer.encode(rec.locality_prompt), 1)
        out.append(replace(rec, locality_ground_truth=tokenizer.decode(ids)))
    return out


def slice_by_mixture(records, counts):
    """Take the first counts[i] records of each group, groups in sorted name order."""
    groups = sorted({r.group_id for r in records})
    if len(counts) != len(groups):
        raise ValueError("got %d counts for %d groups" % (len(counts), len(groups)))
    picked = []
    for name, want in zip(groups, counts):
        have = [r for r in records if r.group_id == name]
        if want < 0 or want > len(have):
            raise ValueError("group %r has %d records, asked for %d" % (name, len(have), want))
        picked.extend(have[:want])
    return picked
