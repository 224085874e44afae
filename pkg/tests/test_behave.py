import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_spearman, brute_ts
from propinherit import behave as B
from propinherit.stimuli import CategoryPair, build_evaluation_sets, render
from propinherit.world import WorldSpec, generate_world
from worlds import hand_world


def table_scorer(table):
    """Scripted responder: prompt text -> P_rel(Yes)."""

    def score(prompts, conts):
        out = []
        for p in prompts:
            y = table[p]
            out.append({"Yes": math.log(y) if y > 0 else -math.inf,
                        "No": math.log(1 - y) if y < 1 else -math.inf})
        return out

    return score


def test_p_rel_examples():
    assert B.p_rel_yes({"Yes": 0.3, "No": 0.3}) == 0.5
    probs = {"Yes": 0.20, "yes": 0.25, "No": 0.10, "no": 0.05}
    assert B.p_rel_yes(probs, ("Yes", "yes"), ("No", "no")) == pytest.approx(0.25 / 0.35, abs=1e-15)
    assert B.p_rel_yes({"Yes": 0.2, "No": 0.0}) == 1.0
    with pytest.raises(B.UndefinedScoreError):
        B.p_rel_yes({"Yes": 0.0, "No": 0.0})
    with pytest.raises(ValueError):
        B.p_rel_yes({"Yes": 0.1}, ("Yes",), ("Yes",))


def _records(rows, direction="forward"):
    w = hand_world()
    recs = []
    for i, (tax, p) in enumerate(rows):
        pair = CategoryPair("bird", "robin", True, 0.9) if tax else CategoryPair("bird", "bread", False, 0.1)
        s = render(w, pair, direction=direction, id=f"ts-{i:03d}")
        recs.append(B.ScoreRecord(s, p, 1 - p))
    return recs


def test_ts_edge_cases():
    assert B.taxonomic_sensitivity(_records([(True, 0.9)] * 3 + [(False, 0.1)] * 3)) == 1.0
    assert B.taxonomic_sensitivity(_records([(True, 0.5), (False, 0.5)])) == 0.0
    with pytest.raises(B.MetricError):
        B.taxonomic_sensitivity([])


def test_scripted_eight_records_match_count_oracle():
    rows = [(True, 0.9), (True, 0.5), (True, 0.51), (True, 0.2),
            (False, 0.49), (False, 0.5), (False, 0.8), (False, 0.0)]
    assert B.taxonomic_sensitivity(_records(rows)) == brute_ts(rows) == 4 / 8


@pytest.fixture(scope="module")
def sets():
    return build_evaluation_sets(generate_world(WorldSpec()), "spose")


def _run(sets, fn):
    table = {s.text: fn(s) for s in sets.all()}
    return B.evaluate(sets, table_scorer(table)).report


def test_always_no_responder(sets):
    rep = _run(sets, lambda s: 0.1)
    assert rep.ms == 1.0 and rep.ts <= 0.5 and rep.ds == 0.0


def test_order_blind_yes_on_taxonomic(sets):
    rep = _run(sets, lambda s: 0.9 if s.taxonomic else 0.1)
    assert rep.ds == 0.0 and rep.ts == 1.0


def test_perfect_responder(sets):
    rep = _run(sets, lambda s: 0.9 if s.label == "Yes" else 0.1)
    assert (rep.ts, rep.ps, rep.ms, rep.ds) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_match_brute_force(sets):
    rng = np.random.default_rng(4)
    table = {s.text: float(rng.choice([0.5, rng.random()])) for s in sets.all()}
    ev = B.evaluate(sets, table_scorer(table))
    rep, recs = ev.report, ev.records
    assert rep.ts == brute_ts([(s.taxonomic, table[s.text]) for s in sets.ts])
    assert rep.ps == brute_ts([(s.taxonomic, table[s.text]) for s in sets.ps])
    assert rep.ms == sum(table[s.text] < 0.5 for s in sets.ms) / len(sets.ms)
    rev = {(s.pair.premise, s.pair.conclusion): table[s.text] for s in sets.ds}
    fwd = [s for s in sets.ts if s.taxonomic]
    ds = sum(table[s.text] > 0.5 and rev[(s.pair.premise, s.pair.conclusion)] < 0.5 for s in fwd) / len(fwd)
    assert rep.ds == ds
    ts_sorted = sorted(sets.ts, key=lambda s: s.id)
    expect_rho = brute_spearman([table[s.text] for s in ts_sorted], [s.pair.similarity for s in ts_sorted])
    assert rep.rho == pytest.approx(expect_rho, abs=1e-12)


def test_spearman_examples():
    assert B.spearman([1, 2, 3, 4], [2, 4, 6, 9]) == pytest.approx(1.0)
    assert B.spearman([1, 2, 3, 4], [9, 6, 4, 2]) == pytest.approx(-1.0)
    xs, ys = [1, 2, 2, 3], [10, 20, 30, 40]
    assert abs(B.spearman(xs, ys) - brute_spearman(xs, ys)) < 1e-12
    with pytest.raises(B.MetricError):
        B.spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(B.MetricError):
        B.spearman([1, 2], [1, 2])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=3, max_size=30))
def test_spearman_with_ties_matches_oracle(pairs):
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        with pytest.raises(B.MetricError):
            B.spearman(xs, ys)
        return
    assert abs(B.spearman(xs, ys) - brute_spearman(xs, ys)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8), st.floats(0.05, 1.0))
def test_affine_maps_fixing_half_preserve_sensitivities(ps, a):
    rows = [(i % 2 == 0, p) for i, p in enumerate(ps)]
    mapped = [(t, 0.5 + a * (p - 0.5)) for t, p in rows]
    assert B.taxonomic_sensitivity(_records(rows)) == B.taxonomic_sensitivity(_records(mapped))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=20, unique=True))
def test_monotone_map_preserves_rho(ps):
    sims = list(range(len(ps)))
    mapped = [p ** 3 for p in ps]
    assert B.spearman(ps, sims) == pytest.approx(B.spearman(mapped, sims), abs=1e-12)


def test_slice_means_partition(sets):
    rng = np.random.default_rng(9)
    table = {s.text: float(rng.random()) for s in sets.all()}
    ev = B.evaluate(sets, table_scorer(table))
    sl = ev.report.slices
    total = sum(v["mean"] * v["n"] for v in sl.values()) / sum(v["n"] for v in sl.values())
    assert abs(total - np.mean([r.p_rel_yes for r in ev.records["ts"]])) < 1e-12
    assert set(sl) <= {f"{t},{s}" for t, s in B.SLICES}


def test_chance_responder_within_binomial_bounds(sets):
    rng = np.random.default_rng(2024)
    table = {s.text: float(rng.random()) for s in sets.all()}
    rep = B.evaluate(sets, table_scorer(table)).report
    for value, n in ((rep.ts, len(sets.ts)), (rep.ps, len(sets.ps)), (rep.ms, len(sets.ms))):
        assert abs(value - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_unpaired_direction_rejected(sets):
    table = {s.text: 0.7 for s in sets.all()}
    recs, _ = B.score_stimuli(sets.ts, table_scorer(table))
    rev, _ = B.score_stimuli(sets.ds[1:], table_scorer(table))
    with pytest.raises(B.MetricError, match="partner"):
        B.directional_sensitivity(recs, rev)


def test_zero_probability_items_excluded(sets):
    table = {s.text: 0.7 for s in sets.ts}
    first = sets.ts[0]

    def score(prompts, conts):
        out = table_scorer(table)(prompts, conts)
        for p, d in zip(prompts, out):
            if p == first.text:
                d["Yes"] = d["No"] = -math.inf
        return out

    recs, excluded = B.score_stimuli(sets.ts, score)
    assert excluded == [first.id] and len(recs) == len(sets.ts) - 1


def test_results_csv_and_json(tmp_path, sets):
    ev = B.evaluate(sets, table_scorer({s.text: 0.25 for s in sets.all()}))
    B.write_results_csv(ev.records["ts"], tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == ",".join(B.CSV_FIELDS)
    B.write_metrics_json([ev.report], tmp_path / "m.json")
    import json
    back = json.loads((tmp_path / "m.json").read_text())
    assert back[0]["ms"] == 1.0


def test_planted_model_is_fully_directional():
    from propinherit.nanolm import build_planted_model, planted_world

    world = planted_world()
    sets = build_evaluation_sets(world, "spose")
    rep = B.evaluate(sets, B.model_scorer(build_planted_model(world))).report
    assert rep.ds == 1.0 and rep.ts == 1.0
    blind = B.evaluate(sets, B.model_scorer(build_planted_model(world, order_sensitive=False))).report
    assert blind.ds == 0.0
