import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propinherit import das as D
from propinherit import nanolm as N
from propinherit import stimuli as S
from propinherit import tensor as T

from worlds import hand_world


@pytest.fixture(scope="module")
def planted():
    world = N.planted_world()
    sets = S.build_evaluation_sets(world, sorted(world.spaces)[0])
    pool = D.das_pool(world, sets.ts)
    ds = D.build_counterfactual_dataset(pool, "balanced", D.CausalModel(world), seed=0)
    models = {flag: N.build_planted_model(world, order_sensitive=flag) for flag in (True, False)}
    site = D.InterventionSite(models[True].config.n_layers - 1, "final")
    return SimpleNamespace(world=world, sets=sets, pool=pool, ds=ds, models=models, site=site)


@pytest.fixture(scope="module")
def trained(planted):
    return D.train_das(planted.models[True], planted.ds.train, planted.site, D.DasHparams.desk())


# ---------------------------------------------------------------- roles


def test_roles_point_at_the_noun_slots():
    w = hand_world()
    s = S.render(w, S.CategoryPair("bird", "robin", True, 0.5, "synthetic"), direction="reversed")
    text = s.text.replace(s.first_noun, "zev-bako")
    tok = N.Tokenizer.from_texts([text])
    s = dataclasses.replace(s, text=text, first_noun="zev-bako")
    pos = D.role_positions(SimpleNamespace(tokenizer=tok), s)
    words = ["<bos>"] + tok.split(s.text)
    assert (words[pos["premise-first"]], words[pos["premise-last"]]) == ("zev", "bako")
    assert words[pos["conclusion-first"]] == words[pos["conclusion-last"]] == "birds"
    assert pos["final"] == len(words) - 1


def test_site_contract(planted):
    with pytest.raises(D.SiteError):
        D.InterventionSite(0, "middle")
    m = planted.models[True]
    with pytest.raises(D.SiteError):
        D.train_das(m, planted.ds.train, D.InterventionSite(m.config.n_layers, "final"))


# ---------------------------------------------------------------- intervention algebra


def _column_form(base, source, r, g):
    # independent statement of R^T (g * R s + (1 - g) * R b) with column vectors
    return r.T @ (g * (r @ source) + (1 - g) * (r @ base))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.integers(0, 7), width=st.integers(0, 8))
def test_intervene_matches_column_form(seed, lo, width):
    rng = np.random.default_rng(seed)
    d = 8
    iv = D.RotationIntervention.splice(d, range(lo, min(d, lo + width)))
    iv.skew = rng.normal(size=(d, d))
    b, s = rng.normal(size=d), rng.normal(size=d)
    got = D.intervene(b, s, iv)
    want = _column_form(b, s, iv.rotation(), iv.mask())
    np.testing.assert_allclose(got, want, atol=1e-12)
    # locality in rotated coordinates
    r = iv.rotation()
    diff = np.abs(r @ got - r @ b) > 1e-9
    changed = np.abs(r @ s - r @ b) > 1e-9
    assert diff.sum() == (changed & iv.mask().astype(bool)).sum() <= iv.width


def test_identity_rotation_is_a_coordinate_splice(rng):
    iv = D.RotationIntervention.splice(5, [1, 3])
    b, s = rng.normal(size=5), rng.normal(size=5)
    assert np.array_equal(D.intervene(b, s, iv), np.where([0, 1, 0, 1, 0], s, b))
    assert np.array_equal(D.intervene(b, s, D.RotationIntervention.splice(5, [])), b)


def test_intervene_contract(rng):
    iv = D.RotationIntervention.init(4)
    with pytest.raises(ValueError, match="dimension"):
        D.intervene(np.zeros(3), np.zeros(4), iv)


def test_gate_formula():
    iv = D.RotationIntervention.init(10, theta=(0.3, -0.7))
    lo = 1 / (1 + math.exp(-0.3))
    hi = lo + (1 - lo) / (1 + math.exp(0.7))
    assert iv.bounds() == pytest.approx((lo, hi), abs=1e-15)
    for tau in (1.0, 0.1):
        want = [1 / (1 + math.exp(-(hi - x) / tau)) / (1 + math.exp(-(x - lo) / tau))
                for x in (np.arange(10) + 0.5) / 10]
        np.testing.assert_allclose(iv.soft_gate(tau), want, atol=1e-14)
    hard = iv.freeze().mask()
    assert np.array_equal(hard, [(lo < x < hi) for x in (np.arange(10) + 0.5) / 10])
    with pytest.raises(ValueError):
        iv.soft_gate(0.0)


def test_save_load_round_trip(tmp_path, rng):
    iv = D.RotationIntervention.init(6, theta=(-1.0, 0.5))
    iv.skew = rng.normal(size=(6, 6))
    iv = iv.freeze()
    iv.site = D.InterventionSite(2, "final")
    iv.save(tmp_path / "iv.npz")
    back = D.RotationIntervention.load(tmp_path / "iv.npz")
    assert np.array_equal(back.rotation(), iv.rotation())
    assert np.array_equal(back.mask(), iv.mask()) and back.site == iv.site


# ---------------------------------------------------------------- counterfactual data


def test_causal_model_labels(planted):
    cm = D.CausalModel(planted.world)
    for p in planted.ds.train + planted.ds.test:
        want = "Yes" if p.source.pair.taxonomic and p.base.matched else "No"
        assert p.label == want == cm.output(p.base, is_a=cm.is_a(p.source))
    rev = S.make_reversed_set(planted.sets.ts, planted.world)
    assert not any(cm.is_a(s) for s in rev)


def test_balanced_sources_are_a_permutation(planted):
    ds = planted.ds
    pairs = ds.train + ds.test
    assert len(pairs) == len(planted.pool)
    assert sorted(p.base.id for p in pairs) == sorted(p.source.id for p in pairs) == sorted(s.id for s in planted.pool)
    for p in pairs:
        assert p.base.premise_property == p.source.premise_property
    assert len(ds.train) == round(0.75 * len(pairs))


def test_rounds_repeat_the_permutation(planted):
    ds = D.build_counterfactual_dataset(planted.pool, "balanced", D.CausalModel(), seed=3, rounds=3)
    pairs = ds.train + ds.test
    assert len(pairs) == 3 * len(planted.pool)
    counts = {}
    for p in pairs:
        counts[p.source.id] = counts.get(p.source.id, 0) + 1
    assert set(counts.values()) == {3}


@pytest.fixture(scope="module")
def overlap_pool():
    from propinherit.world import WorldSpec, generate_world

    world = generate_world(WorldSpec())
    return D.das_pool(world, S.build_evaluation_sets(world, "sense").ts)


def test_control_and_ambiguous_settings(planted, overlap_pool):
    cm = D.CausalModel()
    ctl = D.build_counterfactual_dataset(planted.pool, "control", cm, seed=0)
    assert ctl.label_pair == ("chart", "view")
    assert [p.label for p in ctl.train] == [D.CONTROL_MAP[p.label] for p in planted.ds.train]
    amb = D.build_counterfactual_dataset(overlap_pool, "ambiguous", cm, seed=0)
    diag = {"+Tax,+Sim", "-Tax,-Sim"}
    for p in amb.train + amb.test:
        assert D._slice(p.base) in diag and D._slice(p.source) in diag
    assert amb.gen and all(D._slice(p.base) not in diag for p in amb.gen)
    una = D.build_counterfactual_dataset(overlap_pool, "unambiguous", cm, seed=0)
    bal = D.build_counterfactual_dataset(overlap_pool, "balanced", cm, seed=0)
    assert una.train == bal.train and una.gen
    # the planted world has no off-diagonal slices at all
    with pytest.raises(ValueError, match="gen split is empty"):
        D.build_counterfactual_dataset(planted.pool, "ambiguous", cm)


def test_dataset_contract(planted):
    with pytest.raises(ValueError, match="setting"):
        D.build_counterfactual_dataset(planted.pool, "mixed", D.CausalModel())
    one = [s for s in planted.pool if s.pair.taxonomic][:4]
    with pytest.raises(ValueError, match="empty"):
        D.build_counterfactual_dataset(one, "ambiguous", D.CausalModel())
    a, b = planted.sets.ts[0], planted.sets.ps[0]
    b = dataclasses.replace(b, premise_property="feps", conclusion_property="feps")
    with pytest.raises(ValueError, match="differ"):
        D.CounterfactualPair.make(D.CausalModel(), a, b)


# ---------------------------------------------------------------- planted oracle


def test_planted_intervention_has_iia_one(planted):
    m = planted.models[True]
    iv = D.RotationIntervention.splice(m.config.d_model, [0])
    assert D.evaluate_iia(m, iv, planted.ds.test, planted.site) == 1.0
    assert D.evaluate_iia(m, iv, planted.ds.train, planted.site) == 1.0


def test_identity_intervention_equals_base_agreement(planted):
    m = planted.models[True]
    empty = D.RotationIntervention.splice(m.config.d_model, [])
    pairs = planted.ds.test
    assert D.evaluate_iia(m, empty, pairs, planted.site) == D.base_agreement(m, pairs)


def test_zero_steps_gives_the_initial_intervention(planted):
    m = planted.models[True]
    res = D.train_das(m, planted.ds.train, planted.site, D.DasHparams(epochs=0))
    assert res.losses == [] and np.array_equal(res.intervention.rotation(), np.eye(m.config.d_model))
    baseline = D.base_agreement(m, planted.ds.test)
    assert D.evaluate_iia(m, res.intervention, planted.ds.test, planted.site) == pytest.approx(baseline, abs=0.1)


def test_training_recovers_the_planted_variable(planted, trained):
    m = planted.models[True]
    assert D.evaluate_iia(m, trained.intervention, planted.ds.test, planted.site) == 1.0
    assert len(trained.orthogonality) > 0 and max(trained.orthogonality) < 1e-10
    assert trained.losses[-1] < trained.losses[0]


def test_control_labels_score_below_balanced(planted, trained):
    m = planted.models[True]
    ctl = D.build_counterfactual_dataset(planted.pool, "control", D.CausalModel(), seed=0)
    bal = D.evaluate_iia(m, trained.intervention, planted.ds.test, planted.site)
    assert D.evaluate_iia(m, trained.intervention, ctl.test, planted.site, ctl.label_pair) < bal


def test_training_is_seed_deterministic(planted):
    m = planted.models[True]
    hp = D.DasHparams(epochs=1, lr=0.05, seed=4)
    a = D.train_das(m, planted.ds.train[:32], planted.site, hp)
    b = D.train_das(m, planted.ds.train[:32], planted.site, hp)
    assert a.losses == b.losses and np.array_equal(a.intervention.skew, b.intervention.skew)


def test_grad_accumulation_steps(planted):
    m = planted.models[True]
    res = D.train_das(m, planted.ds.train[:48], planted.site, D.DasHparams(epochs=1, batch_size=16, grad_accum=2))
    assert len(res.losses) == 3 and len(res.orthogonality) == 2  # last partial group still steps


def test_hparams_contract():
    with pytest.raises(ValueError):
        D.DasHparams(batch_size=0)
    with pytest.raises(ValueError):
        D.DasHparams(lr=-1)
    hp = D.DasHparams()
    assert (hp.epochs, hp.batch_size, hp.lr) == (2, 16, 1e-3)
    assert hp.tau(0, 5) == 1.0 and hp.tau(4, 5) == pytest.approx(0.01)


def test_divergence_reports_the_step(planted, monkeypatch):
    def boom(*a, **k):
        raise T.NumericalError("non-finite value in cross_entropy")

    monkeypatch.setattr(D.T, "cross_entropy", boom)
    with pytest.raises(D.DasError, match="step 0"):
        D.train_das(planted.models[True], planted.ds.train[:8], planted.site)


# ---------------------------------------------------------------- SDI


def test_sdi_separates_order_sensitive_and_blind_models(planted):
    pairs = planted.ds.train + planted.ds.test
    iv = D.RotationIntervention.splice(planted.models[True].config.d_model, [0])
    blind = D.sdi_evaluate(planted.models[False], iv, pairs, planted.site, planted.world)
    strict = D.sdi_evaluate(planted.models[True], iv, pairs, planted.site, planted.world)
    assert blind.sdi == 1.0 and strict.sdi == 0.0
    assert strict.counts["flipped by intervention"] > 0


def test_sdi_with_nothing_flipped_is_an_error(planted):
    m = planted.models[True]
    empty = D.RotationIntervention.splice(m.config.d_model, [])
    with pytest.raises(D.DasError, match="no pairs"):
        D.sdi_evaluate(m, empty, planted.ds.test, planted.site, planted.world)


# ---------------------------------------------------------------- sweep


def test_sweep_peaks_at_the_planted_cell(planted):
    m = planted.models[True]
    cells = D.sweep(m, planted.ds, layers=[m.config.n_layers - 2, m.config.n_layers - 1],
                    hparams=D.DasHparams.desk())
    best = D.best_cell(cells)
    assert (best.layer, best.role) == (planted.site.layer, "final") and best.iia == 1.0
    assert sum(c.iia == best.iia for c in cells) == 1


def test_sweep_records_cell_failures(planted, monkeypatch, tmp_path):
    real = D.train_das

    def flaky(model, pairs, site, *a, **k):
        if site.role == "premise-last":
            raise D.DasError("synthetic failure")
        return real(model, pairs, site, *a, **k)

    monkeypatch.setattr(D, "train_das", flaky)
    m = planted.models[True]
    cells = D.sweep(m, planted.ds, layers=[m.config.n_layers - 1], roles=["premise-last", "final"],
                    hparams=D.DasHparams(epochs=1, lr=0.05))
    assert cells[0].iia is None and "synthetic failure" in cells[0].error
    assert cells[1].iia is not None
    D.write_grid_csv(cells, tmp_path / "grid.csv")
    back = D.read_grid_csv(tmp_path / "grid.csv")
    assert back == cells
    svg = D.render_svg(cells, "planted")
    assert svg.startswith("<svg") and "n/a" in svg and f"{cells[1].iia:.2f}" in svg
