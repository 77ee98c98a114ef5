"""Gazetteer matching and anchor-embedding tests."""

import numpy as np
import pytest

from memoe.anchors import (
    AnchorSet,
    Gazetteer,
    anchor_embedding,
    entity_embedding_table,
    extract_entities,
    find_anchors,
)
from memoe.tokenizer import Tokenizer, split_words


def greedy_oracle(text, entries):
    """Reference matcher: at each position take the longest entry, by direct scan."""
    words = [w.lower() for w in split_words(text)]
    spans = []
    i = 0
    while i < len(words):
        best = None
        for surface, eid in entries.items():
            ew = tuple(surface.split())
            if tuple(words[i : i + len(ew)]) == ew:
                if best is None or len(ew) > len(best[0]):
                    best = (ew, eid)
        if best is None:
            i += 1
        else:
            spans.append((i, i + len(best[0]), best[1]))
            i += len(best[0])
    return spans


def test_president_and_united_states_both_match():
    g = Gazetteer([("president", "e-pres"), ("United States", "e-us")])
    spans = extract_entities("Who is the president of the United States?", g)
    assert spans == [(3, 4, "e-pres"), (6, 8, "e-us")]


def test_empty_string_matches_nothing():
    g = Gazetteer([("president", "e1")])
    assert extract_entities("", g) == []


def test_longest_match_wins_over_substring():
    g = Gazetteer(
        [
            ("new york", "e-ny"),
            ("york", "e-y"),
            ("new", "e-n"),
            ("paris", "e-p"),
            ("london", "e-l"),
        ]
    )
    spans = extract_entities("i moved from york to new york", g)
    assert spans == [(3, 4, "e-y"), (5, 7, "e-ny")]


def test_case_folding_at_load_and_lookup():
    g = Gazetteer([("United States", "e-us")])
    assert extract_entities("UNITED STATES border", g) == [(0, 2, "e-us")]
    assert extract_entities("united states border", g) == [(0, 2, "e-us")]


def test_insertion_order_never_changes_extraction():
    pairs = [("new york", "a"), ("york", "b"), ("new", "c"), ("york city", "d")]
    text = "new york city has a new bridge near york"
    base = extract_entities(text, Gazetteer(pairs))
    rng = np.random.default_rng(7)
    for _ in range(20):
        perm = [pairs[i] for i in rng.permutation(len(pairs))]
        assert extract_entities(text, Gazetteer(perm)) == base


def test_matcher_agrees_with_exhaustive_oracle():
    rng = np.random.default_rng(123)
    alphabet = ["ka", "ro", "mi", "ta", "su", "le"]
    for _ in range(200):
        n_entries = int(rng.integers(1, 6))
        entries = {}
        for j in range(n_entries):
            width = int(rng.integers(1, 4))
            surface = " ".join(rng.choice(alphabet, size=width))
            entries.setdefault(surface, "e%d" % j)
        text = " ".join(rng.choice(alphabet, size=int(rng.integers(0, 12))))
        got = extract_entities(text, Gazetteer(list(entries.items())))
        assert got == greedy_oracle(text, entries)


def test_conflicting_duplicate_surface_rejected():
    with pytest.raises(ValueError, match="conflicting"):
        Gazetteer([("paris", "e1"), ("Paris", "e2")])
    # identical duplicate is fine
    g = Gazetteer([("paris", "e1"), ("Paris", "e1")])
    assert len(g) == 1


def test_tsv_round_trip(tmp_path):
    g = Gazetteer([("new york", "e-ny"), ("president", "e-p")])
    path = tmp_path / "gaz.tsv"
    g.save(path)
    g2 = Gazetteer.load(path)
    assert sorted(g2.items()) == sorted(g.items())


def test_malformed_tsv_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("paris\te1\nno tab here\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        Gazetteer.load(path)


def test_singleton_embedding_is_verbatim():
    table = {"e1": np.array([1.0, -2.0, 3.0])}
    out = anchor_embedding([(0, 1, "e1")], table, 3)
    assert np.array_equal(out, table["e1"])


def test_two_entity_mean():
    table = {"a": np.array([1.0, 3.0]), "b": np.array([3.0, 1.0])}
    out = anchor_embedding([(0, 1, "a"), (2, 3, "b")], table, 2)
    assert np.array_equal(out, np.array([2.0, 2.0]))


def test_no_entities_gives_zero_vector():
    out = anchor_embedding([], {}, 5)
    assert out.shape == (5,)
    assert np.array_equal(out, np.zeros(5))


def test_unknown_entity_id_rejected():
    with pytest.raises(ValueError, match="unknown entity id"):
        anchor_embedding([(0, 1, "ghost")], {"e1": np.zeros(2)}, 2)


def test_mean_magnitude_bounded_by_max_entity_magnitude():
    rng = np.random.default_rng(55)
    for _ in range(100):
        k = int(rng.integers(1, 5))
        table = {"e%d" % j: rng.normal(size=6) for j in range(k)}
        spans = [(j, j + 1, "e%d" % j) for j in range(k)]
        out = anchor_embedding(spans, table, 6)
        cap = np.max(np.abs(np.stack(list(table.values()))), axis=0)
        assert np.all(np.abs(out) <= cap + 1e-15)


def test_entity_table_pools_multi_token_surfaces():
    tok = Tokenizer.build(["new york is big", "paris is small"])
    emb = np.arange(tok.vocab_size * 4, dtype=np.float64).reshape(tok.vocab_size, 4)
    g = Gazetteer([("new york", "e-ny"), ("paris", "e-p")])
    table = entity_embedding_table(g, tok, emb)
    i_new, i_york = tok.encode("new york")
    assert np.array_equal(table["e-ny"], (emb[i_new] + emb[i_york]) / 2.0)
    assert np.array_equal(table["e-p"], emb[tok.encode("paris")[0]])


def test_find_anchors_is_pure_and_validates_spans():
    tok = Tokenizer.build(["new york is big"])
    emb = np.random.default_rng(3).normal(size=(tok.vocab_size, 4))
    g = Gazetteer([("new york", "e-ny")])
    table = entity_embedding_table(g, tok, emb)
    a = find_anchors("new york is big", g, table, 4)
    b = find_anchors("new york is big", g, table, 4)
    assert a.spans == b.spans == ((0, 2, "e-ny"),)
    assert np.array_equal(a.embedding, b.embedding)
    with pytest.raises(ValueError, match="overlap"):
        AnchorSet(spans=((0, 2, "a"), (1, 3, "b")), embedding=np.zeros(4))
