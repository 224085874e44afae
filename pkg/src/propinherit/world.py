"""Concept universe: lexicon, taxonomy and embedding spaces.

A world is either generated (synthetic taxonomy with controllable similarity
structure) or ingested from THINGS-style TSV exports.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

HELD_OUT_PROPERTIES = ("daxable", "feps")
SPACE_TAGS = ("word-sense-like", "spose-like", "synthetic")


class WorldError(ValueError):
    """Invalid world specification or malformed input data."""


class DataWarning(UserWarning):
    """Recoverable ingestion problem (dropped or deduplicated rows)."""


@dataclass(frozen=True)
class Concept:
    lemma: str
    plural: str | None = None
    mass: bool = False
    sense_id: str | None = None

    def __post_init__(self):
        if not self.lemma:
            raise WorldError("concept lemma must be non-empty")
        if not self.mass and not self.plural:
            raise WorldError(f"concept {self.lemma!r} needs a plural form unless it is a mass noun")

    @property
    def surface(self) -> str:
        """Form used in stimuli: plural, or the lemma for mass nouns."""
        return self.lemma if self.mass else self.plural

    @property
    def is_plural(self) -> bool:
        return not self.mass


@dataclass
class EmbeddingSpace:
    name: str
    tag: str
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        if self.tag not in SPACE_TAGS:
            raise WorldError(f"unknown embedding tag {self.tag!r}")
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise WorldError(f"space {self.name!r} mixes vector dimensions {sorted(dims)}")
        for k, v in self.vectors.items():
            if not np.isfinite(v).all():
                raise WorldError(f"non-finite embedding for {k!r} in space {self.name!r}")
            n = np.linalg.norm(v)
            if n == 0:
                raise WorldError(f"zero embedding for {k!r} in space {self.name!r}")
            self.vectors[k] = v / n

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def similarity(self, a: str, b: str) -> float:
        return cosine(self.vectors[a], self.vectors[b])


@dataclass(frozen=True)
class LabelRule:
    """How corpus QA labels are assigned.

    ``taxonomy``: Yes iff the conclusion is a member of the premise category.
    ``similarity``: Yes iff cosine(premise, conclusion) > threshold.
    ``mixed``: Yes iff beta * taxonomic + (1 - beta) * cosine > threshold.
    """

    kind: str = "taxonomy"
    threshold: float = 0.5
    beta: float = 0.5
    space: str = "spose"

    def __post_init__(self):
        if self.kind not in ("taxonomy", "similarity", "mixed"):
            raise WorldError(f"unknown label rule {self.kind!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise WorldError("mixed-rule beta must lie in [0, 1]")


@dataclass(frozen=True)
class WorldSpec:
    n_superordinates: int = 8
    k: int = 8
    dim: int = 64
    noise: float = 0.15
    overlap: float = 0.9
    atypical_weight: float = 0.3
    compound_rate: float = 0.25
    mass_rate: float = 0.1
    label_rule: LabelRule = field(default_factory=LabelRule)
    seed: int = 7

    def validate(self) -> None:
        if self.k < 2 or self.k % 2:
            raise WorldError(f"members per category k must be even and >= 2, got {self.k}")
        if self.n_superordinates < 2:
            raise WorldError("need at least two superordinate categories")
        if self.dim < self.n_superordinates + 2:
            raise WorldError("embedding dim must exceed the number of categories by at least 2")
        if not 0.0 <= self.overlap <= 1.5:
            raise WorldError("overlap must lie in [0, 1.5]")
        if not 0.0 <= self.noise <= 1.0:
            raise WorldError("noise must lie in [0, 1]")
        if not 0.0 < self.atypical_weight <= 1.0:
            raise WorldError("atypical_weight must lie in (0, 1]")
        for name in ("compound_rate", "mass_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise WorldError(f"{name} must lie in [0, 1]")


@dataclass
class World:
    concepts: dict[str, Concept]
    taxonomy: dict[str, tuple[str, ...]]
    spaces: dict[str, EmbeddingSpace]
    label_rule: LabelRule = field(default_factory=LabelRule)
    spec: WorldSpec | None = None

    @property
    def superordinates(self) -> list[str]:
        return list(self.taxonomy)

    @property
    def subordinates(self) -> list[str]:
        seen = {}
        for members in self.taxonomy.values():
            for m in members:
                seen.setdefault(m, None)
        return list(seen)

    def is_member(self, category: str, concept: str) -> bool:
        return concept in self.taxonomy.get(category, ())

    def non_members(self, category: str) -> list[str]:
        members = set(self.taxonomy[category])
        return [c for c in self.subordinates if c not in members and c != category]

    def summary(self) -> dict:
        return {
            "n_superordinates": len(self.taxonomy),
            "n_subordinates": len(self.subordinates),
            "n_taxonomic_pairs": sum(len(m) for m in self.taxonomy.values()),
            "spaces": {n: s.tag for n, s in self.spaces.items()},
        }

    def label(self, premise: str, conclusion: str) -> bool:
        """Corpus label for a matched-property question under the world's rule."""
        rule = self.label_rule
        tax = self.is_member(premise, conclusion)
        if rule.kind == "taxonomy":
            return tax
        sim = self.spaces[rule.space].similarity(premise, conclusion)
        if rule.kind == "similarity":
            return sim > rule.threshold
        return rule.beta * float(tax) + (1.0 - rule.beta) * sim > rule.threshold

    def surfaces(self) -> dict[str, str]:
        """Surface form -> lemma."""
        return {c.surface: lemma for lemma, c in self.concepts.items()}


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine needs equal dimensions, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- generation

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_CODAS = ["", "n", "l", "r", "m", "k"]


def _nonce_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syl)) + rng.choice(_CODAS)
        if w in taken or w + "s" in taken:
            continue
        taken.add(w)
        out.append(w)
    return out


def _reserved_words() -> set[str]:
    from .stimuli import TEMPLATE_WORDS, TRAIN_PROPERTIES

    words = set(TEMPLATE_WORDS) | set(HELD_OUT_PROPERTIES) | {p.word for p in TRAIN_PROPERTIES}
    return words | {"Yes", "No", "chart", "view", "a", "kind", "of"}


def _build_lexicon(spec: WorldSpec, rng: np.random.Generator):
    taken = _reserved_words()
    cat_names = _nonce_words(rng, spec.n_superordinates, taken)
    n_members = spec.n_superordinates * spec.k
    stems = _nonce_words(rng, n_members, taken)
    concepts: dict[str, Concept] = {}
    for c in cat_names:
        concepts[c] = Concept(c, c + "s", False, f"{c}.n.01")
    members: list[str] = []
    for stem in stems:
        u = rng.random()
        if u < spec.compound_rate:
            lemma = f"{_nonce_words(rng, 1, taken)[0]}-{stem}"
        else:
            lemma = stem
        mass = rng.random() < spec.mass_rate
        concepts[lemma] = Concept(lemma, None if mass else lemma + "s", mass, f"{lemma}.n.01")
        members.append(lemma)
    taxonomy = {c: tuple(members[i * spec.k:(i + 1) * spec.k]) for i, c in enumerate(cat_names)}
    return concepts, taxonomy


def _generate_space(spec: WorldSpec, taxonomy, name: str, tag: str, rng: np.random.Generator) -> EmbeddingSpace:
    cats = list(taxonomy)
    n = len(cats)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.dim)))
    protos = {c: basis[:, i] for i, c in enumerate(cats)}
    n_typ = max(1, (spec.k - 1) // 2)
    n_atyp = spec.k - n_typ
    # atypical members get private orthogonal directions when the dimension
    # allows, so they cannot drift toward a foreign category by chance
    private_ok = spec.dim - n - n * n_atyp >= 2
    private = iter(basis[:, n : n + n * n_atyp].T) if private_ok else None
    complement = basis[:, n + n * n_atyp :] if private_ok else basis[:, n:]

    def noise_vec(scale: float) -> np.ndarray:
        z = complement @ rng.normal(size=complement.shape[1])
        return scale * z / np.linalg.norm(z)

    # fewer than half the members are typical so the member median sits among
    # the atypical ones and borrowed lookalikes clear it
    typical: dict[str, bool] = {}
    for c in cats:
        order = rng.permutation(spec.k)
        for rank, j in enumerate(order):
            typical[taxonomy[c][j]] = rank < n_typ

    # typical member j of category i is lent to category i+1+j, so every
    # category borrows from distinct neighbours and no pair of means merges
    lookalike_of: dict[str, str] = {}
    for i, c in enumerate(cats):
        lenders = [m for m in taxonomy[c] if typical[m]]
        for j, m in enumerate(lenders[: n - 1]):
            lookalike_of[m] = cats[(i + 1 + j) % n]

    vectors: dict[str, np.ndarray] = {}
    for c in cats:
        for m in taxonomy[c]:
            if typical[m]:
                v = protos[c] + noise_vec(spec.noise)
            else:
                off = next(private) if private is not None else noise_vec(1.0)
                v = spec.atypical_weight * protos[c] + off
            if m in lookalike_of:
                v = v + spec.overlap * protos[lookalike_of[m]]
            vectors[m] = v / np.linalg.norm(v)
    for c in cats:
        if tag == "spose-like":
            mean = np.mean([vectors[m] for m in taxonomy[c]], axis=0)
            vectors[c] = mean / np.linalg.norm(mean)
        else:
            v = protos[c] + noise_vec(spec.noise)
            vectors[c] = v / np.linalg.norm(v)
    return EmbeddingSpace(name, tag, vectors)


def check_similarity_structure(world: World, space: str) -> None:
    """Raise if members are not separable from non-members as designed.

    Checks (a) mean within-category similarity exceeds cross-category, (b) when
    overlap is on, each category has a non-member above its median member
    similarity, and that no concept is closer to a foreign category than to
    its own.
    """
    sp = world.spaces[space]
    within, across = [], []
    for c, members in world.taxonomy.items():
        msims = [sp.similarity(c, m) for m in members]
        nsims = sorted((sp.similarity(c, x) for x in world.non_members(c)), reverse=True)
        within += msims
        across += nsims
        med = float(np.median(msims))
        if world.spec is not None and world.spec.overlap > 0 and not nsims[0] > med:
            raise WorldError(f"category {c!r}: no non-member exceeds the median member similarity")
    if np.mean(within) <= np.mean(across):
        raise WorldError("within-category similarity does not exceed cross-category similarity")
    for m in world.subordinates:
        own = max(sp.similarity(c, m) for c in world.taxonomy if world.is_member(c, m))
        for c in world.taxonomy:
            if not world.is_member(c, m) and sp.similarity(c, m) >= own:
                raise WorldError(f"{m!r} is at least as similar to {c!r} as to its own category; overlap too high")


def generate_world(spec: WorldSpec | None = None) -> World:
    spec = spec or WorldSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    concepts, taxonomy = _build_lexicon(spec, rng)
    spaces = {
        "sense": _generate_space(spec, taxonomy, "sense", "word-sense-like", np.random.default_rng([spec.seed, 1])),
        "spose": _generate_space(spec, taxonomy, "spose", "spose-like", np.random.default_rng([spec.seed, 2])),
    }
    world = World(concepts, taxonomy, spaces, spec.label_rule, spec)
    if spec.label_rule.space not in spaces:
        raise WorldError(f"label rule refers to unknown space {spec.label_rule.space!r}")
    for name in spaces:
        check_similarity_structure(world, name)
    return world


# ---------------------------------------------------------------- ingestion


def _read_tsv(path: Path, expected: Sequence[str] | None, min_cols: int) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise WorldError(f"{path}: empty file (header row required)") from None
        if expected is not None and [h.strip() for h in header[: len(expected)]] != list(expected):
            raise WorldError(f"{path}:1: header must start with {list(expected)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) < min_cols or not row[0].strip():
                raise WorldError(f"{path}:{lineno}: malformed row {row!r}")
            rows.append((lineno, [x.strip() for x in row]))
    return rows


def _load_embeddings(path: Path, known: set[str]) -> dict[str, np.ndarray]:
    rows = _read_tsv(path, ["lemma"], 2)
    vectors: dict[str, np.ndarray] = {}
    dim = None
    unknown = 0
    for lineno, row in rows:
        try:
            vec = np.array([float(x) for x in row[1:]], dtype=np.float64)
        except ValueError:
            raise WorldError(f"{path}:{lineno}: non-numeric embedding value") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise WorldError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
        if not np.isfinite(vec).all() or not vec.any():
            raise WorldError(f"{path}:{lineno}: embedding must be finite and non-zero")
        if row[0] not in known:
            unknown += 1
            continue
        vectors[row[0]] = vec
    if unknown:
        warnings.warn(f"{path}: ignored {unknown} embedding(s) for unknown concepts", DataWarning)
    return vectors


def load_world(
    concepts_path,
    taxonomy_path,
    embeddings: Mapping[str, tuple[str | Path, str]],
    label_rule: LabelRule | None = None,
) -> World:
    """Ingest TSV exports.

    ``embeddings`` maps a space name to ``(path, tag)``.  For spose-like
    spaces, superordinate vectors missing from the file are the renormalised
    mean of their members' vectors.
    """
    concepts: dict[str, Concept] = {}
    for lineno, row in _read_tsv(Path(concepts_path), ["lemma", "plural", "mass_flag"], 3):
        lemma, plural, mass = row[0], row[1], row[2]
        if mass not in ("0", "1"):
            raise WorldError(f"{concepts_path}:{lineno}: mass_flag must be 0 or 1")
        sense = row[3] if len(row) > 3 and row[3] else None
        try:
            concepts[lemma] = Concept(lemma, plural or None, mass == "1", sense)
        except WorldError as exc:
            raise WorldError(f"{concepts_path}:{lineno}: {exc}") from None

    pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    dupes = 0
    for lineno, row in _read_tsv(Path(taxonomy_path), ["superordinate", "member"], 2):
        pair = (row[0], row[1])
        for name in pair:
            if name not in concepts:
                raise WorldError(f"{taxonomy_path}:{lineno}: unknown concept {name!r}")
        if pair[0] == pair[1]:
            raise WorldError(f"{taxonomy_path}:{lineno}: concept cannot be its own superordinate")
        if pair in seen:
            dupes += 1
            continue
        seen.add(pair)
        pairs.append(pair)
    if not pairs:
        raise WorldError(f"{taxonomy_path}: taxonomy is empty")
    if dupes:
        warnings.warn(f"{taxonomy_path}: removed {dupes} duplicate (concept, category) row(s)", DataWarning)

    known = set(concepts)
    raw = {name: (_load_embeddings(Path(p), known), tag) for name, (p, tag) in embeddings.items()}
    if not raw:
        raise WorldError("at least one embedding space is required")

    def has_vec(lemma: str, is_super: bool) -> bool:
        for vecs, tag in raw.values():
            if lemma not in vecs and not (is_super and tag == "spose-like"):
                return False
        return True

    kept = [(c, m) for c, m in pairs if has_vec(m, False) and has_vec(c, True)]
    if len(kept) < len(pairs):
        warnings.warn(
            f"dropped {len(pairs) - len(kept)} taxonomy row(s) lacking embeddings", DataWarning
        )
    if not kept:
        raise WorldError("no taxonomy rows survive embedding filtering")
    taxonomy: dict[str, list[str]] = {}
    for c, m in kept:
        taxonomy.setdefault(c, []).append(m)

    spaces = {}
    for name, (vecs, tag) in raw.items():
        vecs = dict(vecs)
        if tag == "spose-like":
            for c, members in taxonomy.items():
                if c not in vecs:
                    mean = np.mean([vecs[m] / np.linalg.norm(vecs[m]) for m in members], axis=0)
                    vecs[c] = mean
        spaces[name] = EmbeddingSpace(name, tag, vecs)
    used = set(taxonomy) | {m for ms in taxonomy.values() for m in ms}
    rule = label_rule or LabelRule(space=next(iter(spaces)))
    return World({k: v for k, v in concepts.items() if k in used},
                 {c: tuple(ms) for c, ms in taxonomy.items()}, spaces, rule)


def save_world(world: World, directory) -> dict[str, Path]:
    """Write the world as TSVs in the ingestion schema; returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"concepts": d / "concepts.tsv", "taxonomy": d / "taxonomy.tsv"}
    with open(paths["concepts"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["lemma", "plural", "mass_flag", "sense_id"])
        for c in world.concepts.values():
            w.writerow([c.lemma, c.plural or "", int(c.mass), c.sense_id or ""])
    with open(paths["taxonomy"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["superordinate", "member"])
        for c, ms in world.taxonomy.items():
            for m in ms:
                w.writerow([c, m])
    for name, sp in world.spaces.items():
        p = d / f"embeddings_{name}.tsv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["lemma"] + [f"d{i}" for i in range(sp.dim)])
            for lemma, v in sp.vectors.items():
                w.writerow([lemma] + [repr(float(x)) for x in v])
        paths[f"embeddings_{name}"] = p
    return paths


def renormalised_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    m = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
    return m / np.linalg.norm(m)


# ---------------------------------------------------------------- corpus


@dataclass(frozen=True)
class CorpusConfig:
    properties: tuple = ()  # PropertyPhrase items; empty -> the built-in training list
    reps: int = 3
    mismatch_rate: float = 0.25
    reversed_items: bool = True
    statements: bool = True
    templates: tuple[int, ...] = (2,)
    held_out: tuple[str, ...] = HELD_OUT_PROPERTIES
    seed: int = 0


@dataclass
class Corpus:
    """Training items as (prompt, answer) text pairs; loss falls on the answer."""

    items: list[tuple[str, str]]
    held_out_properties: tuple[str, ...]
    n_yes: int = 0
    n_no: int = 0

    def texts(self) -> list[str]:
        return [f"{p} {a}".strip() for p, a in self.items]


def emit_corpus(world: World, config: CorpusConfig | None = None) -> Corpus:
    """Taxonomy statements plus labelled QA items over training properties.

    Positive questions are replicated so the two labels are roughly balanced.
    """
    from .stimuli import TRAIN_PROPERTIES, CategoryPair, render

    config = config or CorpusConfig()
    props = tuple(config.properties) or TRAIN_PROPERTIES
    clash = sorted({p.word for p in props} & set(config.held_out))
    if clash:
        raise WorldError(f"training properties collide with held-out properties: {clash}")
    rng = np.random.default_rng(config.seed)
    words = [p.word for p in props]

    def pick() -> str:
        return words[int(rng.integers(len(words)))]

    def template() -> int:
        return int(config.templates[int(rng.integers(len(config.templates)))])

    pos, neg = [], []
    for cat in world.taxonomy:
        for x in world.subordinates:
            (pos if world.label(cat, x) else neg).append((cat, x))
    if not pos or not neg:
        raise WorldError("label rule yields a single class; corpus would be degenerate")
    boost = max(1, round(len(neg) / len(pos)))
    items: list[tuple[str, str]] = []
    n_yes = n_no = 0

    def qa(cat: str, x: str, pp: str, cp: str, direction: str, label: bool):
        nonlocal n_yes, n_no
        pair = CategoryPair(cat, x, world.is_member(cat, x), 0.0)
        st = render(world, pair, pp, cp, direction, template())
        items.append((st.text, "Yes" if label else "No"))
        if label:
            n_yes += 1
        else:
            n_no += 1

    rule = world.label_rule
    for group, times in ((pos, boost), (neg, 1)):
        for cat, x in group:
            label = world.label(cat, x)
            for _ in range(times * config.reps):
                w = pick()
                if rng.random() < config.mismatch_rate:
                    other = pick()
                    while other == w:
                        other = pick()
                    pp, cp = (w, other) if rng.random() < 0.5 else (other, w)
                    qa(cat, x, pp, cp, "forward", False)
                else:
                    qa(cat, x, w, w, "forward", label)
            if config.reversed_items and label:
                if rule.kind == "taxonomy":
                    rlabel = False
                else:
                    sim = world.spaces[rule.space].similarity(cat, x)
                    rlabel = sim > rule.threshold if rule.kind == "similarity" else (1 - rule.beta) * sim > rule.threshold
                for _ in range(times):
                    w = pick()
                    qa(cat, x, w, w, "reversed", rlabel)
    if config.statements:
        for cat, members in world.taxonomy.items():
            for m in members:
                c = world.concepts[m]
                verb = "are" if c.is_plural else "is"
                items.append((f"{c.surface} {verb} a kind of", world.concepts[cat].lemma))
    order = rng.permutation(len(items))
    return Corpus([items[i] for i in order], tuple(config.held_out), n_yes, n_no)
