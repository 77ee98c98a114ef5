"""Knowledge-anchor extraction.

Entities are found by greedy longest-match against a gazetteer (a flat
surface-form -> entity-id table), and each match is embedded by averaging
the frozen base model's token-embedding rows for its surface words.  The
per-sequence anchor embedding is the elementwise mean over matched
entities, or the zero vector when nothing matches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import split_words


class Gazetteer:
    """Immutable surface-form -> entity-id lookup, case-folded at load."""

    def __init__(self, pairs):
        entries = {}
        for surface, entity_id in pairs:
            words = tuple(w.lower() for w in split_words(surface))
            if not words:
                raise ValueError("gazetteer surface form is empty: %r" % (surface,))
            if not entity_id:
                raise ValueError("gazetteer entity id is empty for %r" % (surface,))
            prior = entries.get(words)
            if prior is not None and prior != entity_id:
                raise ValueError(
                    "conflicting ids for surface %r: %r vs %r"
                    % (" ".join(words), prior, entity_id)
                )
            entries[words] = entity_id
        self._entries = entries
        self.longest_entry_len = max((len(w) for w in entries), default=0)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, words):
        return tuple(words) in self._entries

    def entity_id(self, words):
        return self._entries[tuple(words)]

    def items(self):
        return self._entries.items()

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if "\t" not in line:
                    raise ValueError("line %d: expected 'surface<TAB>id', got %r" % (lineno, line))
                surface, entity_id = line.split("\t", 1)
                pairs.append((surface, entity_id))
        return cls(pairs)

    def save(self, path):
        rows = sorted((" ".join(words), eid) for words, eid in self._entries.items())
        with open(path, "w", encoding="utf-8") as fh:
            for surface, entity_id in rows:
                fh.write("%s\t%s\n" % (surface, entity_id))


def extract_entities(text, gazetteer: Gazetteer):
    """Greedy left-to-right longest match; returns (start, end, entity_id) word spans."""
    words = [w.lower() for w in split_words(text)]
    spans = []
    i = 0
    n = len(words)
    while i < n:
        best = 0
        cap = min(gazetteer.longest_entry_len, n - i)
        for width in range(cap, 0, -1):
            if tuple(words[i : i + width]) in gazetteer:
                best = width
                break
        if best:
            spans.append((i, i + best, gazetteer.entity_id(words[i : i + best])))
            i += best
        else:
            i += 1
    return spans


def entity_embedding_table(gazetteer: Gazetteer, tokenizer, tok_emb):
    """Map entity id -> mean of its surface words' embedding rows."""
    tok_emb = np.asarray(tok_emb, dtype=np.float64)
    table = {}
    for words, entity_id in gazetteer.items():
        ids = tokenizer.encode(" ".join(words))
        table[entity_id] = tok_emb[ids].mean(axis=0)
    return table


def anchor_embedding(spans, table, d_model):
    """Elementwise mean of matched entities' embeddings; zero vector if none."""
    if not spans:
        return np.zeros(d_model, dtype=np.float64)
    rows = []
    for _, _, entity_id in spans:
        if entity_id not in table:
            raise ValueError("unknown entity id %r" % (entity_id,))
        rows.append(np.asarray(table[entity_id], dtype=np.float64))
    out = np.mean(rows, axis=0)
    if out.shape != (d_model,):
        raise ValueError("entity embeddings have dim %d, expected %d" % (out.shape[-1], d_model))
    return out


@dataclass(frozen=True)
class AnchorSet:
    """Matched entity spans plus their pooled embedding."""

    spans: tuple
    embedding: np.ndarray

    def __post_init__(self):
        last = -1
        for start, end, _ in self.spans:
            if start < last:
                raise ValueError("anchor spans overlap or are unsorted")
            if end <= start:
                raise ValueError("empty anchor span (%d, %d)" % (start, end))
            last = end


def find_anchors(text, gazetteer: Gazetteer, table, d_model) -> AnchorSet:
    """Extract entities from text and pool their embeddings, once per sequence."""
    spans = tuple(extract_entities(text, gazetteer))
    return AnchorSet(spans=spans, embedding=anchor_embedding(spans, table, d_model))
