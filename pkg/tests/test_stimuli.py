import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propinherit.stimuli import (
    CategoryPair, LexiconError, Stimulus, bin_similarity, build_evaluation_sets,
    make_mismatch_set, make_property_swap_set, make_stimuli, parse, read_jsonl, render,
    sample_pairs, write_jsonl,
)
from propinherit.world import Concept, WorldSpec, generate_world
from worlds import hand_world


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec())


def _pairs(sims, premise="c"):
    return [CategoryPair(premise, f"x{i}", False, s) for i, s in enumerate(sims)]


def test_toy_pair_counts():
    w = hand_world()
    pairs = sample_pairs(w, "synthetic")
    assert len(pairs) == 8
    assert sum(p.taxonomic for p in pairs) == 4


def test_top_and_bottom_sets_disjoint_by_ranking_oracle(world):
    for space in world.spaces:
        pairs = sample_pairs(world, space)
        vecs = world.spaces[space].vectors
        for c in world.taxonomy:
            negs = [p.conclusion for p in pairs if p.premise == c and not p.taxonomic]
            sim = {x: float(vecs[c] @ vecs[x]) for x in world.non_members(c)}
            half = len(world.taxonomy[c]) // 2
            top, bottom = set(negs[:half]), set(negs[half:])
            assert len(top) == len(bottom) == half and not top & bottom
            middle = [sim[x] for x in sim if x not in top | bottom]
            # every chosen item sits on the correct side of every unchosen one
            assert min(sim[x] for x in top) >= max(middle) - 1e-12
            assert max(sim[x] for x in bottom) <= min(middle) + 1e-12
            assert min(sim[x] for x in top) > max(sim[x] for x in bottom)


def test_sampling_balanced(world):
    pairs = sample_pairs(world, "sense")
    assert len(pairs) == 2 * sum(len(m) for m in world.taxonomy.values())
    assert sum(p.taxonomic for p in pairs) * 2 == len(pairs)


def test_too_few_negatives_names_category():
    w = hand_world()
    w.taxonomy["food"] = ("honey", "bread", "robin")
    with pytest.raises(ValueError, match="food"):
        sample_pairs(w, "synthetic")


def test_clean_median_split():
    out = bin_similarity(_pairs([0.1, 0.2, 0.8, 0.9]))
    assert [p.bin for p in out] == ["Low", "Low", "High", "High"]


def test_all_equal_balanced():
    out = bin_similarity(_pairs([0.5] * 6))
    assert sum(p.bin == "High" for p in out) == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=101, max_size=101))
def test_random_group_bins_within_one(values):
    out = bin_similarity(_pairs(values))
    hi = sum(p.bin == "High" for p in out)
    assert abs(hi - (101 - hi)) <= 1
    # strict sides of the median never cross
    med = float(np.median(values))
    for p in out:
        if p.similarity > med:
            assert p.bin == "High"
        elif p.similarity < med:
            assert p.bin == "Low"


def test_bins_are_per_premise():
    out = bin_similarity(_pairs([0.1, 0.2], "a") + _pairs([0.8, 0.9], "b"))
    assert [p.bin for p in out] == ["Low", "High", "Low", "High"]


def test_render_prompt_two_exact():
    w = hand_world()
    s = render(w, CategoryPair("bird", "robin", True, 0.9), "daxable")
    assert s.text == ("Answer the question. Given that birds are daxable, is it true that robins are daxable? "
                      "Answer with Yes/No. The answer is:")
    assert s.label == "Yes"


def test_mass_noun_uses_singular_copula():
    w = hand_world()
    s = render(w, CategoryPair("food", "honey", True, 0.9), "daxable")
    assert "honey is daxable" in s.text
    s = render(w, CategoryPair("food", "honey", True, 0.9), "feps")
    assert "honey has feps" in s.text


def test_mismatch_variant_label_no():
    w = hand_world()
    s = render(w, CategoryPair("bird", "robin", True, 0.9), "daxable", "feps")
    assert "birds are daxable" in s.text and "robins have feps" in s.text
    assert s.label == "No"


def test_reversal_swaps_text_only():
    w = hand_world()
    pair = CategoryPair("bird", "robin", True, 0.9)
    s = render(w, pair, direction="reversed")
    assert "Given that robins are daxable, is it true that birds are daxable?" in s.text
    assert s.label == "No" and s.pair == pair
    assert render(w, pair, direction="reversed", symmetric_reversal=True).label == "Yes"


def test_missing_lexicon_entry():
    w = hand_world()
    with pytest.raises(LexiconError):
        render(w, CategoryPair("bird", "penguin", True, 0.9))
    with pytest.raises(ValueError):
        render(w, CategoryPair("bird", "robin", True, 0.9), template=5)


def test_plural_required_unless_mass():
    with pytest.raises(Exception):
        Concept("robin")


def test_swap_set_counts():
    w = hand_world()
    base = []
    for i in range(100):
        tax = i % 2 == 0
        pair = CategoryPair("bird", "robin", True, 0.9) if tax else CategoryPair("bird", "bread", False, 0.1)
        base.append(render(w, pair, id=f"ts-{i}"))
    out = make_property_swap_set(base, w, seed=3)
    feps = [s for s in out if s.premise_property == "feps"]
    dax = [s for s in out if s.premise_property == "daxable"]
    assert len(feps) == 50 and len(dax) == 50
    assert sum(s.taxonomic for s in feps) == 25 and sum(s.taxonomic for s in dax) == 25
    assert all(s.conclusion_property == s.premise_property for s in out)
    again = make_property_swap_set(base, w, seed=3)
    assert [s.text for s in again] == [s.text for s in out]


def test_swap_set_two_items():
    w = hand_world()
    base = [render(w, CategoryPair("bird", "robin", True, 0.9)), render(w, CategoryPair("bird", "bread", False, 0.1))]
    out = make_property_swap_set(base, w)
    assert sum(s.premise_property == "feps" for s in out) == 1


def test_mismatch_set_all_no(world):
    ts = make_stimuli(world, sample_pairs(world, "sense"))
    ms = make_mismatch_set(ts, world)
    assert all(s.label == "No" and not s.matched for s in ms)


def test_evaluation_sets_balanced(world):
    for space in world.spaces:
        sets = build_evaluation_sets(world, space)
        for group in (sets.ts, sets.ps, sets.ms):
            assert sum(s.taxonomic for s in group) * 2 == len(group)
        assert all(s.direction == "reversed" and s.label == "No" for s in sets.ds)
        ids = [s.id for s in sets.all()]
        assert len(ids) == len(set(ids))


@pytest.mark.parametrize("template", [1, 2, 3, 4])
def test_parse_round_trip(world, template):
    pairs = sample_pairs(world, "sense")[:40]
    for s in make_mismatch_set(make_stimuli(world, pairs, template=template), world):
        p = parse(s.text, world)
        assert p["template"] == template
        assert (p["first_lemma"], p["second_lemma"]) == (s.pair.premise, s.pair.conclusion)
        assert (p["premise_property"], p["conclusion_property"]) == (s.premise_property, s.conclusion_property)


def test_parse_rejects_foreign_text():
    with pytest.raises(ValueError):
        parse("hello there")


def test_jsonl_round_trip(tmp_path, world):
    sets = build_evaluation_sets(world, "spose")
    write_jsonl(sets.all(), tmp_path / "s.jsonl")
    back = read_jsonl(tmp_path / "s.jsonl")
    assert back == sets.all()
    assert isinstance(back[0], Stimulus)
