"""Scoring stimuli and the behavioural metric suite.

A *scorer* maps a list of prompts to next-token log-probabilities for a
fixed set of continuations.  Metrics never look at the model directly, so
in-process and remote scoring produce identical reports when they return
identical numbers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .stimuli import EvaluationSets, Stimulus

YES_VARIANTS = ("Yes",)
NO_VARIANTS = ("No",)
SLICES = (("-Tax", "-Sim"), ("-Tax", "+Sim"), ("+Tax", "-Sim"), ("+Tax", "+Sim"))


class UndefinedScoreError(ValueError):
    """Both label families have zero probability."""


class MetricError(ValueError):
    pass


class Scorer(Protocol):
    def __call__(self, prompts: Sequence[str], continuations: Sequence[str]) -> list[dict[str, float]]:
        """Log-probability of each single-token continuation after each prompt."""


def p_rel_yes(probs: Mapping[str, float], yes_variants: Sequence[str] = YES_VARIANTS,
              no_variants: Sequence[str] = NO_VARIANTS) -> float:
    """Relative probability of Yes: max over each label's variants, then
    yes / (yes + no)."""
    if not yes_variants or not no_variants:
        raise ValueError("label variant sets must be non-empty")
    if set(yes_variants) & set(no_variants):
        raise ValueError("Yes and No variant sets overlap")
    yes = max(float(probs[v]) for v in yes_variants)
    no = max(float(probs[v]) for v in no_variants)
    if yes < 0 or no < 0:
        raise ValueError("probabilities must be non-negative")
    if yes + no == 0:
        raise UndefinedScoreError("both label families have zero probability")
    return yes / (yes + no)


@dataclass(frozen=True)
class ScoreRecord:
    stimulus: Stimulus
    p_yes: float
    p_no: float

    @property
    def id(self) -> str:
        return self.stimulus.id

    @property
    def p_rel_yes(self) -> float:
        return self.p_yes / (self.p_yes + self.p_no)

    @property
    def p_rel_no(self) -> float:
        return self.p_no / (self.p_yes + self.p_no)

    @property
    def taxonomic(self) -> bool:
        return self.stimulus.taxonomic


def score_stimuli(
    stimuli: Sequence[Stimulus],
    scorer: Scorer,
    yes_variants: Sequence[str] = YES_VARIANTS,
    no_variants: Sequence[str] = NO_VARIANTS,
) -> tuple[list[ScoreRecord], list[str]]:
    """Score every stimulus; returns records sorted by id and the ids excluded
    because both label families had zero probability."""
    conts = list(dict.fromkeys(list(yes_variants) + list(no_variants)))
    logps = scorer([s.text for s in stimuli], conts)
    if len(logps) != len(stimuli):
        raise ValueError(f"scorer returned {len(logps)} results for {len(stimuli)} prompts")
    records, excluded = [], []
    for s, lp in zip(stimuli, logps):
        probs = {c: math.exp(lp[c]) for c in conts}
        try:
            p_rel_yes(probs, yes_variants, no_variants)
        except UndefinedScoreError:
            excluded.append(s.id)
            continue
        yes = max(probs[v] for v in yes_variants)
        no = max(probs[v] for v in no_variants)
        records.append(ScoreRecord(s, yes, no))
    records.sort(key=lambda r: r.id)
    return records, excluded


def model_scorer(model) -> Scorer:
    """In-process scorer over a :class:`~propinherit.nanolm.TransformerModel`."""
    from .nanolm import next_token_logprobs

    def score(prompts, continuations):
        ids = [model.tokenizer.id(c) for c in continuations]
        out = []
        for p in prompts:
            lp = next_token_logprobs(model, model.encode(p))
            out.append({c: float(lp[i]) for c, i in zip(continuations, ids)})
        return out

    return score


# ---------------------------------------------------------------- metrics


def _nonempty(records: Sequence) -> None:
    if not records:
        raise MetricError("no records to score")


def taxonomic_sensitivity(records: Sequence[ScoreRecord]) -> float:
    """Share of items on the correct side of 0.5 (Yes for taxonomic pairs,
    No otherwise); exactly 0.5 counts as a miss."""
    _nonempty(records)
    hits = sum((r.p_rel_yes > 0.5) if r.taxonomic else (r.p_rel_yes < 0.5) for r in records)
    return hits / len(records)


def property_sensitivity(swap_records: Sequence[ScoreRecord]) -> float:
    return taxonomic_sensitivity(swap_records)


def mismatch_sensitivity(records: Sequence[ScoreRecord]) -> float:
    _nonempty(records)
    if any(r.stimulus.matched for r in records):
        raise MetricError("mismatch sensitivity needs mismatched-property items only")
    return sum(r.p_rel_yes < 0.5 for r in records) / len(records)


def _pair_key(s: Stimulus) -> tuple:
    return (s.pair.premise, s.pair.conclusion, s.premise_property, s.conclusion_property, s.template)


def pair_directions(forward: Sequence[ScoreRecord], reversed_: Sequence[ScoreRecord]) -> list[tuple[ScoreRecord, ScoreRecord]]:
    """Match taxonomic forward records with their reversed counterparts."""
    fwd = {_pair_key(r.stimulus): r for r in forward if r.taxonomic and r.stimulus.direction == "forward"}
    rev = {}
    for r in reversed_:
        if r.stimulus.direction != "reversed":
            raise MetricError(f"{r.id} is not a reversed item")
        rev[_pair_key(r.stimulus)] = r
    missing = sorted(set(fwd) ^ set(rev))
    if missing:
        raise MetricError(f"{len(missing)} forward/reversed item(s) lack a partner, e.g. {missing[0]}")
    return [(fwd[k], rev[k]) for k in sorted(fwd)]


def directional_sensitivity(forward: Sequence[ScoreRecord], reversed_: Sequence[ScoreRecord]) -> float:
    pairs = pair_directions(forward, reversed_)
    _nonempty(pairs)
    return sum(f.p_rel_yes > 0.5 and r.p_rel_yes < 0.5 for f, r in pairs) / len(pairs)


def average_ranks(xs: Sequence[float]) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise MetricError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 3:
        raise MetricError("spearman needs at least 3 observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        raise MetricError("zero rank variance; correlation undefined")
    return float(rx @ ry) / den


def slice_means(records: Sequence[ScoreRecord]) -> dict[str, dict[str, float]]:
    """Mean P_rel(Yes) and count per (±Tax, ±Sim) slice; empty slices omitted."""
    groups: dict[str, list[float]] = {}
    for r in records:
        if r.stimulus.pair.bin is None:
            raise MetricError(f"{r.id} has no similarity bin")
        key = f"{'+' if r.taxonomic else '-'}Tax,{'+' if r.stimulus.pair.bin == 'High' else '-'}Sim"
        groups.setdefault(key, []).append(r.p_rel_yes)
    out = {}
    for t, s in SLICES:
        key = f"{t},{s}"
        if key in groups:
            out[key] = {"mean": float(np.mean(groups[key])), "n": len(groups[key])}
    return out


@dataclass
class MetricsReport:
    model: str
    space: str
    template: int
    ts: float
    ps: float
    ms: float
    ds: float
    rho: float | None
    rho_ds: float | None
    slices: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    excluded: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _safe_spearman(xs, ys) -> float | None:
    try:
        return spearman(xs, ys)
    except MetricError:
        return None


@dataclass
class Evaluation:
    report: MetricsReport
    records: dict[str, list[ScoreRecord]]


def evaluate(sets: EvaluationSets, scorer: Scorer, model: str = "model", space: str = "",
             template: int = 2, yes_variants=YES_VARIANTS, no_variants=NO_VARIANTS) -> Evaluation:
    recs, excluded = {}, 0
    for name in ("ts", "ps", "ms", "ds"):
        recs[name], ex = score_stimuli(getattr(sets, name), scorer, yes_variants, no_variants)
        excluded += len(ex)
    ts = recs["ts"]
    pairs = pair_directions(ts, recs["ds"])
    report = MetricsReport(
        model=model,
        space=space or (ts[0].stimulus.pair.space if ts else ""),
        template=template,
        ts=taxonomic_sensitivity(ts),
        ps=property_sensitivity(recs["ps"]),
        ms=mismatch_sensitivity(recs["ms"]),
        ds=directional_sensitivity(ts, recs["ds"]),
        rho=_safe_spearman([r.p_rel_yes for r in ts], [r.stimulus.pair.similarity for r in ts]),
        rho_ds=_safe_spearman([f.p_rel_yes for f, _ in pairs], [r.p_rel_yes for _, r in pairs]),
        slices=slice_means(ts),
        counts={k: len(v) for k, v in recs.items()},
        excluded=excluded,
    )
    return Evaluation(report, recs)


# ---------------------------------------------------------------- output

CSV_FIELDS = ("stimulus_id", "taxonomic", "similarity", "bin", "direction",
              "property_premise", "property_conclusion", "p_rel_yes")


def write_results_csv(records: Iterable[ScoreRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in sorted(records, key=lambda r: r.id):
            s = r.stimulus
            w.writerow([s.id, int(s.taxonomic), repr(s.pair.similarity), s.pair.bin or "", s.direction,
                        s.premise_property, s.conclusion_property, repr(r.p_rel_yes)])


def write_metrics_json(reports: Iterable[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
