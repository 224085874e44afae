"""Premise-conclusion stimuli: pair sampling, similarity bins and prompt rendering."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .world import World

TEMPLATES = {
    1: "Answer the question. Given that {a} {pa}, is it true that {b} {pb}? Answer with Yes/No.\n",
    2: "Answer the question. Given that {a} {pa}, is it true that {b} {pb}? Answer with Yes/No. The answer is:",
    3: "Answer the question. Given that {a} {pa}, is it true that {b} {pb}?\nAnswer with Yes/No.\n",
    4: "Given that {a} {pa}, is it true that {b} {pb}? Answer with Yes/No:",
}
DEFAULT_TEMPLATE = 2

TEMPLATE_WORDS = (
    "Answer", "the", "question", ".", "Given", "that", ",", "is", "it", "true", "?", "with",
    "Yes", "/", "No", "The", "answer", ":", "\n", "are", "has", "have", "-",
)


class LexiconError(KeyError):
    """A concept lacks the surface form a template needs."""


@dataclass(frozen=True)
class PropertyPhrase:
    word: str
    kind: str  # "copular" ("is daxable") or "possessive" ("has feps")

    def realize(self, plural: bool) -> str:
        if self.kind == "copular":
            return f"{'are' if plural else 'is'} {self.word}"
        return f"{'have' if plural else 'has'} {self.word}"


DAXABLE = PropertyPhrase("daxable", "copular")
FEPS = PropertyPhrase("feps", "possessive")
PROPERTIES = {p.word: p for p in (DAXABLE, FEPS)}

# Many training properties, so that a toy model learns property identity in
# general rather than memorising a few words.
_CLUSTERS = ("gl", "br", "pl", "sn", "tr", "kr", "fl", "gr", "bl", "cr", "dr", "fr", "pr", "sk", "sl", "sp")
TRAIN_PROPERTIES = tuple(
    [PropertyPhrase(w, "copular") for w in
     ("wuggable", "tovish", "glorpy", "zibbly", "kefty", "snarvy", "plimsy", "brindy", "molky", "jurvish")]
    + [PropertyPhrase(c + v + end, "copular") for end in ("ggy", "mpy") for c in _CLUSTERS for v in "aeiou"]
    + [PropertyPhrase(w, "possessive") for w in ("torps", "wugs", "gaxes", "nibbers", "quolls", "zorbs")]
    + [PropertyPhrase(c + v + end, "possessive") for end in ("cks", "nds") for c in _CLUSTERS for v in "aeiou"]
)


def property_by_word(word: str) -> PropertyPhrase:
    for p in (DAXABLE, FEPS) + TRAIN_PROPERTIES:
        if p.word == word:
            return p
    raise KeyError(f"unknown property {word!r}")


@dataclass(frozen=True)
class CategoryPair:
    premise: str
    conclusion: str
    taxonomic: bool
    similarity: float
    space: str = ""
    bin: str | None = None  # "High" / "Low"

    def __post_init__(self):
        if self.premise == self.conclusion:
            raise ValueError("premise and conclusion must differ")


@dataclass(frozen=True)
class Stimulus:
    id: str
    pair: CategoryPair
    premise_property: str
    conclusion_property: str
    direction: str
    template: int
    text: str
    label: str
    first_noun: str   # surface of the noun in the premise slot of the text
    second_noun: str  # surface of the noun in the conclusion slot of the text

    @property
    def taxonomic(self) -> bool:
        return self.pair.taxonomic

    @property
    def matched(self) -> bool:
        return self.premise_property == self.conclusion_property

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "premise": self.pair.premise,
            "conclusion": self.pair.conclusion,
            "taxonomic": self.pair.taxonomic,
            "similarity": self.pair.similarity,
            "space": self.pair.space,
            "bin": self.pair.bin,
            "direction": self.direction,
            "premise_property": self.premise_property,
            "conclusion_property": self.conclusion_property,
            "template": self.template,
            "text": self.text,
            "label": self.label,
            "first_noun": self.first_noun,
            "second_noun": self.second_noun,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Stimulus":
        pair = CategoryPair(d["premise"], d["conclusion"], bool(d["taxonomic"]), float(d["similarity"]),
                            d.get("space", ""), d.get("bin"))
        return cls(d["id"], pair, d["premise_property"], d["conclusion_property"], d["direction"],
                   int(d["template"]), d["text"], d["label"], d["first_noun"], d["second_noun"])


# ---------------------------------------------------------------- pairs


def sample_pairs(world: World, space: str) -> list[CategoryPair]:
    """All k members plus the top and bottom halves of non-members by similarity.

    For odd k the extra negative comes from the high-similarity end.
    """
    sp = world.spaces[space]
    pairs: list[CategoryPair] = []
    for cat, members in world.taxonomy.items():
        k = len(members)
        negatives = world.non_members(cat)
        if len(negatives) < k:
            raise ValueError(f"category {cat!r}: only {len(negatives)} non-members for k={k}")
        for m in members:
            pairs.append(CategoryPair(cat, m, True, sp.similarity(cat, m), space))
        scored = sorted(negatives, key=lambda x: (-sp.similarity(cat, x), x))
        n_top = k - k // 2
        chosen = scored[:n_top] + scored[len(scored) - k // 2:]
        for x in chosen:
            pairs.append(CategoryPair(cat, x, False, sp.similarity(cat, x), space))
    return pairs


def bin_similarity(pairs: Sequence[CategoryPair]) -> list[CategoryPair]:
    """Median split per premise; values at the median fill the smaller bin,
    alternating High/Low (High first) in descending order when counts tie."""
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.premise, []).append(i)
    bins: dict[int, str] = {}
    for idx in groups.values():
        sims = np.array([pairs[i].similarity for i in idx])
        med = float(np.median(sims))
        order = sorted(idx, key=lambda i: -pairs[i].similarity)
        n_hi = n_lo = 0
        ties = []
        for i in order:
            s = pairs[i].similarity
            if s > med:
                bins[i] = "High"
                n_hi += 1
            elif s < med:
                bins[i] = "Low"
                n_lo += 1
            else:
                ties.append(i)
        for i in ties:
            if n_hi <= n_lo:
                bins[i] = "High"
                n_hi += 1
            else:
                bins[i] = "Low"
                n_lo += 1
    return [replace(p, bin=bins[i]) for i, p in enumerate(pairs)]


# ---------------------------------------------------------------- rendering


def _noun(world: World, lemma: str) -> tuple[str, bool]:
    c = world.concepts.get(lemma)
    if c is None:
        raise LexiconError(f"concept {lemma!r} is not in the lexicon")
    if not c.mass and not c.plural:
        raise LexiconError(f"concept {lemma!r} has no plural form")
    return c.surface, not c.mass


def render(
    world: World,
    pair: CategoryPair,
    premise_property: str = "daxable",
    conclusion_property: str | None = None,
    direction: str = "forward",
    template: int = DEFAULT_TEMPLATE,
    id: str = "",
    symmetric_reversal: bool = False,
) -> Stimulus:
    if template not in TEMPLATES:
        raise ValueError(f"template id must be one of {sorted(TEMPLATES)}, got {template}")
    if direction not in ("forward", "reversed"):
        raise ValueError(f"direction must be forward or reversed, got {direction!r}")
    conclusion_property = conclusion_property or premise_property
    first, second = (pair.premise, pair.conclusion) if direction == "forward" else (pair.conclusion, pair.premise)
    a, a_pl = _noun(world, first)
    b, b_pl = _noun(world, second)
    pa = property_by_word(premise_property).realize(a_pl)
    pb = property_by_word(conclusion_property).realize(b_pl)
    text = TEMPLATES[template].format(a=a, b=b, pa=pa, pb=pb)
    taxonomic = pair.taxonomic if (direction == "forward" or symmetric_reversal) else False
    yes = taxonomic and premise_property == conclusion_property
    return Stimulus(id, pair, premise_property, conclusion_property, direction, template, text,
                    "Yes" if yes else "No", a, b)


_PROP = r"(?:is|are|has|have) \S+"


def _template_regex(tid: int) -> re.Pattern:
    parts = re.split(r"(\{a\}|\{b\}|\{pa\}|\{pb\})", TEMPLATES[tid])
    groups = {"{a}": r"(?P<a>.+?)", "{b}": r"(?P<b>.+?)", "{pa}": rf"(?P<pa>{_PROP})", "{pb}": rf"(?P<pb>{_PROP})"}
    return re.compile("".join(groups.get(p, re.escape(p)) for p in parts) + r"\Z", re.S)


_REGEXES = {tid: _template_regex(tid) for tid in TEMPLATES}


def parse(text: str, world: World | None = None) -> dict:
    """Recover slot contents and template id from a rendered stimulus.

    With ``world`` given, noun surfaces are mapped back to lemmas.
    """
    for tid, rx in _REGEXES.items():
        m = rx.match(text)
        if m:
            out = {
                "template": tid,
                "first_noun": m["a"],
                "second_noun": m["b"],
                "premise_property": m["pa"].split(" ", 1)[1],
                "conclusion_property": m["pb"].split(" ", 1)[1],
            }
            if world is not None:
                lookup = world.surfaces()
                out["first_lemma"] = lookup[m["a"]]
                out["second_lemma"] = lookup[m["b"]]
            return out
    raise ValueError("text does not match any known template")


# ---------------------------------------------------------------- stimulus sets


def make_stimuli(
    world: World,
    pairs: Sequence[CategoryPair],
    prop: str = "daxable",
    template: int = DEFAULT_TEMPLATE,
    direction: str = "forward",
    tag: str = "ts",
) -> list[Stimulus]:
    return [
        render(world, p, prop, prop, direction, template, id=f"{tag}-{p.space}-t{template}-{i:05d}")
        for i, p in enumerate(pairs)
    ]


def make_property_swap_set(stimuli: Sequence[Stimulus], world: World, seed: int = 0) -> list[Stimulus]:
    """Re-render half the items (rounded down) with feps on both sides,
    choosing half of the taxonomic and half of the non-taxonomic items."""
    rng = np.random.default_rng(seed)
    tax = [i for i, s in enumerate(stimuli) if s.taxonomic]
    non = [i for i, s in enumerate(stimuli) if not s.taxonomic]
    chosen = set(rng.choice(tax, len(tax) // 2, replace=False).tolist()) if tax else set()
    chosen |= set(rng.choice(non, len(non) // 2, replace=False).tolist()) if non else set()
    extra = len(stimuli) // 2 - len(chosen)
    if extra > 0:
        rest = sorted(set(range(len(stimuli))) - chosen)
        chosen |= set(rng.choice(rest, extra, replace=False).tolist())
    out = []
    for i, s in enumerate(stimuli):
        prop = "feps" if i in chosen else s.premise_property
        out.append(render(world, s.pair, prop, prop, s.direction, s.template, id=s.id.replace("ts-", "ps-", 1)))
    return out


def make_mismatch_set(stimuli: Sequence[Stimulus], world: World, seed: int = 0) -> list[Stimulus]:
    """Substitute the other nonce property on a uniformly chosen side."""
    rng = np.random.default_rng(seed)
    other = {"daxable": "feps", "feps": "daxable"}
    out = []
    for s in stimuli:
        p = s.premise_property
        if rng.random() < 0.5:
            pp, cp = other[p], p
        else:
            pp, cp = p, other[p]
        out.append(render(world, s.pair, pp, cp, s.direction, s.template, id=s.id.replace("ts-", "ms-", 1)))
    return out


def make_reversed_set(stimuli: Sequence[Stimulus], world: World, symmetric: bool = False) -> list[Stimulus]:
    return [
        render(world, s.pair, s.premise_property, s.conclusion_property, "reversed", s.template,
               id=s.id.replace("ts-", "ds-", 1), symmetric_reversal=symmetric)
        for s in stimuli
    ]


@dataclass
class EvaluationSets:
    ts: list[Stimulus]
    ps: list[Stimulus]
    ms: list[Stimulus]
    ds: list[Stimulus]

    def all(self) -> list[Stimulus]:
        return self.ts + self.ps + self.ms + self.ds


def build_evaluation_sets(world: World, space: str, template: int = DEFAULT_TEMPLATE, seed: int = 0) -> EvaluationSets:
    pairs = bin_similarity(sample_pairs(world, space))
    ts = make_stimuli(world, pairs, "daxable", template)
    return EvaluationSets(
        ts=ts,
        ps=make_property_swap_set(ts, world, seed),
        ms=make_mismatch_set(ts, world, seed + 1),
        ds=make_reversed_set([s for s in ts if s.taxonomic], world),
    )


def write_jsonl(stimuli: Iterable[Stimulus], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in stimuli:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_jsonl(path) -> list[Stimulus]:
    with open(path, encoding="utf-8") as fh:
        return [Stimulus.from_json(json.loads(line)) for line in fh if line.strip()]
