"""Boundless distributed alignment search over the toy transformer.

An intervention rotates a residual vector with an orthogonal ``R`` (Cayley
transform of learned skew parameters), swaps a contiguous window of rotated
coordinates from a source run into a base run, and rotates back.  Training
adjusts only the rotation and the two window boundaries.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nanolm import TraceBundle, TransformerModel, forward_with_trace, pad_batch, run
from .stimuli import Stimulus, render

ROLES = ("premise-first", "premise-last", "conclusion-first", "conclusion-last", "final")
SETTINGS = ("balanced", "control", "ambiguous", "unambiguous")
LABEL_PAIRS = {"yes/no": ("Yes", "No"), "chart/view": ("chart", "view")}
CONTROL_MAP = {"Yes": "chart", "No": "view"}


class DasError(RuntimeError):
    pass


class SiteError(ValueError):
    pass


# ---------------------------------------------------------------- causal model


@dataclass(frozen=True)
class CausalModel:
    """premise, conclusion, properties -> {property-match, is-a} -> AND.

    The is-a node is false for reversed-direction items (strict asymmetry).
    """

    world: object = None

    def property_match(self, s: Stimulus) -> bool:
        return s.premise_property == s.conclusion_property

    def is_a(self, s: Stimulus) -> bool:
        return s.direction == "forward" and s.pair.taxonomic

    def output(self, s: Stimulus, is_a: bool | None = None, property_match: bool | None = None) -> str:
        rel = self.is_a(s) if is_a is None else is_a
        match = self.property_match(s) if property_match is None else property_match
        return "Yes" if rel and match else "No"


# ---------------------------------------------------------------- sites


@dataclass(frozen=True)
class InterventionSite:
    layer: int
    role: str
    stream: str = "resid"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SiteError(f"unknown token role {self.role!r}; expected one of {ROLES}")

    def label(self) -> str:
        return f"L{self.layer}:{self.role}"


def _find(seq: list[str], sub: list[str], start: int = 0) -> int:
    for i in range(start, len(seq) - len(sub) + 1):
        if seq[i: i + len(sub)] == sub:
            return i
    return -1


def role_positions(model: TransformerModel, s: Stimulus) -> dict[str, int]:
    """Absolute token positions (with the leading bos) of every role."""
    tok = model.tokenizer
    words = ["<bos>"] + tok.split(s.text)
    first, second = tok.split(s.first_noun), tok.split(s.second_noun)
    a = _find(words, ["Given", "that"] + first)
    b = _find(words, ["true", "that"] + second, max(a, 0))
    if a < 0 or b < 0:
        raise SiteError(f"cannot locate noun slots in stimulus {s.id}")
    a += 2
    b += 2
    return {
        "premise-first": a,
        "premise-last": a + len(first) - 1,
        "conclusion-first": b,
        "conclusion-last": b + len(second) - 1,
        "final": len(words) - 1,
    }


# ---------------------------------------------------------------- intervention


def bin_centres(d: int) -> np.ndarray:
    return (np.arange(d) + 0.5) / d


@dataclass
class RotationIntervention:
    """Skew parameters (d x d, upper triangle used), boundary logits and the
    hard mask frozen after training."""

    skew: np.ndarray
    theta: np.ndarray  # (2,) -> b_lo = sigmoid(t0), b_hi = b_lo + (1 - b_lo) sigmoid(t1)
    tau_end: float = 0.01
    hard_mask: np.ndarray | None = None
    site: InterventionSite | None = None

    @classmethod
    def init(cls, d: int, theta=(-4.0, -1.0), tau_end: float = 0.01) -> "RotationIntervention":
        return cls(np.zeros((d, d)), np.array(theta, dtype=np.float64), tau_end)

    @classmethod
    def splice(cls, d: int, coords: Sequence[int], site: InterventionSite | None = None) -> "RotationIntervention":
        """Identity rotation with a fixed hard mask over ``coords``."""
        mask = np.zeros(d, dtype=bool)
        mask[list(coords)] = True
        return cls(np.zeros((d, d)), np.array([-4.0, -1.0]), hard_mask=mask, site=site)

    @property
    def d(self) -> int:
        return self.skew.shape[0]

    def rotation(self) -> np.ndarray:
        return T.cayley(self.skew).data

    def bounds(self) -> tuple[float, float]:
        lo = 1.0 / (1.0 + math.exp(-self.theta[0]))
        return lo, lo + (1.0 - lo) / (1.0 + math.exp(-self.theta[1]))

    def soft_gate(self, tau: float) -> np.ndarray:
        return _gate(T.Tensor(self.theta), self.d, tau).data

    def mask(self) -> np.ndarray:
        if self.hard_mask is not None:
            return self.hard_mask.astype(np.float64)
        return (self.soft_gate(self.tau_end) > 0.5).astype(np.float64)

    def freeze(self) -> "RotationIntervention":
        return replace(self, hard_mask=self.soft_gate(self.tau_end) > 0.5)

    @property
    def width(self) -> int:
        return int(self.mask().sum())

    def save(self, path) -> None:
        meta = {"tau_end": self.tau_end, "site": asdict(self.site) if self.site else None}
        with open(path, "wb") as fh:
            np.savez(fh, skew=self.skew, theta=self.theta, mask=self.mask(), meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "RotationIntervention":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            site = InterventionSite(**meta["site"]) if meta["site"] else None
            return cls(z["skew"], z["theta"], meta["tau_end"], z["mask"].astype(bool), site)


def _gate(theta: T.Tensor, d: int, tau: float) -> T.Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    lo = T.sigmoid(T.getitem(theta, 0))
    hi = T.add(lo, T.mul(T.sub(1.0, lo), T.sigmoid(T.getitem(theta, 1))))
    x = bin_centres(d)
    upper = T.sigmoid(T.mul(T.sub(hi, x), 1.0 / tau))
    lower = T.sigmoid(T.mul(T.sub(x, lo), 1.0 / tau))
    return T.mul(upper, lower)


def _apply(base: T.Tensor, source: T.Tensor, rot: T.Tensor, gate) -> T.Tensor:
    """Row-vector form of R^T (g * R s + (1 - g) * R b)."""
    rt = T.transpose(rot)
    rb = T.matmul(base, rt)
    rs = T.matmul(source, rt)
    mixed = T.add(rb, T.mul(gate, T.sub(rs, rb)))
    return T.matmul(mixed, rot)


def intervene(base_vec, source_vec, intervention: RotationIntervention, tau: float | None = None) -> np.ndarray:
    """Intervened vector(s).  ``tau=None`` uses the hard mask."""
    b = np.atleast_2d(np.asarray(base_vec, dtype=np.float64))
    s = np.atleast_2d(np.asarray(source_vec, dtype=np.float64))
    d = intervention.d
    if b.shape[-1] != d or s.shape[-1] != d:
        raise ValueError(f"vector dimension must be {d}, got {b.shape[-1]} and {s.shape[-1]}")
    gate = intervention.mask() if tau is None else intervention.soft_gate(tau)
    out = _apply(T.Tensor(b), T.Tensor(s), T.Tensor(intervention.rotation()), gate).data
    return out[0] if np.ndim(base_vec) == 1 else out


# ---------------------------------------------------------------- counterfactual data


@dataclass(frozen=True)
class CounterfactualPair:
    base: Stimulus
    source: Stimulus
    label: str  # causal-model output of base with its is-a node set from source

    @classmethod
    def make(cls, causal: CausalModel, base: Stimulus, source: Stimulus) -> "CounterfactualPair":
        if (base.template, base.direction, base.premise_property, base.conclusion_property) != (
                source.template, source.direction, source.premise_property, source.conclusion_property):
            raise ValueError(f"{base.id} and {source.id} differ in more than their nouns")
        return cls(base, source, causal.output(base, is_a=causal.is_a(source)))


@dataclass
class CounterfactualDataset:
    setting: str
    train: list[CounterfactualPair]
    test: list[CounterfactualPair]
    gen: list[CounterfactualPair] = field(default_factory=list)
    label_pair: tuple[str, str] = ("Yes", "No")


def _slice(s: Stimulus) -> str:
    return f"{'+' if s.taxonomic else '-'}Tax,{'+' if s.pair.bin == 'High' else '-'}Sim"


_DIAGONAL = {"+Tax,+Sim", "-Tax,-Sim"}
_OFF_DIAGONAL = {"+Tax,-Sim", "-Tax,+Sim"}


def _group_key(s: Stimulus) -> tuple:
    return (s.template, s.direction, s.premise_property, s.conclusion_property)


def _permutation_pairs(causal, stimuli, rng, rounds: int, stratify: bool) -> list[CounterfactualPair]:
    """Each round pairs every base with a source drawn without replacement
    from its compatibility group (a permutation of the group)."""
    groups: dict[tuple, list[Stimulus]] = {}
    for s in sorted(stimuli, key=lambda s: s.id):
        groups.setdefault(_group_key(s), []).append(s)
    out = []
    for _ in range(rounds):
        for key in sorted(groups):
            g = groups[key]
            if stratify:
                # a derangement within each slice keeps slice proportions in sources
                by_slice: dict[str, list[int]] = {}
                for i, s in enumerate(g):
                    by_slice.setdefault(_slice(s), []).append(i)
                perm = np.arange(len(g))
                for idx in by_slice.values():
                    perm[idx] = np.array(idx)[rng.permutation(len(idx))]
            else:
                perm = rng.permutation(len(g))
            out.extend(CounterfactualPair.make(causal, g[i], g[int(perm[i])]) for i in range(len(g)))
    return out


def _split(pairs, train_frac, rng):
    idx = rng.permutation(len(pairs))
    n = int(round(train_frac * len(pairs)))
    return [pairs[i] for i in idx[:n]], [pairs[i] for i in idx[n:]]


def build_counterfactual_dataset(
    stimuli: Sequence[Stimulus],
    setting: str,
    causal: CausalModel,
    seed: int = 0,
    train_frac: float = 0.75,
    rounds: int = 1,
    stratify: bool = False,
) -> CounterfactualDataset:
    """Train/test (and, where defined, gen) counterfactual pairs.

    ``rounds`` repeats the without-replacement pairing with fresh
    permutations to enlarge small stimulus sets.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if any(s.pair.bin is None for s in stimuli):
        raise ValueError("stimuli need similarity bins")
    rng = np.random.default_rng(seed)
    if setting in ("balanced", "control", "unambiguous"):
        pairs = _permutation_pairs(causal, stimuli, rng, rounds, stratify)
        train, test = _split(pairs, train_frac, rng)
        gen: list[CounterfactualPair] = []
        if setting == "unambiguous":
            off = [s for s in stimuli if _slice(s) in _OFF_DIAGONAL]
            gen = _permutation_pairs(causal, off, rng, rounds, stratify)
        ds = CounterfactualDataset(setting, train, test, gen)
        if setting == "control":
            ds.label_pair = LABEL_PAIRS["chart/view"]
            remap = lambda ps: [replace(p, label=CONTROL_MAP[p.label]) for p in ps]  # noqa: E731
            ds.train, ds.test = remap(ds.train), remap(ds.test)
    else:
        diag = [s for s in stimuli if _slice(s) in _DIAGONAL]
        off = [s for s in stimuli if _slice(s) in _OFF_DIAGONAL]
        train, test = _split(_permutation_pairs(causal, diag, rng, rounds, stratify), train_frac, rng)
        gen = _permutation_pairs(causal, off, rng, rounds, stratify)
        ds = CounterfactualDataset(setting, train, test, gen)
    for name in ("train", "test") + (("gen",) if setting in ("ambiguous", "unambiguous") else ()):
        if not getattr(ds, name):
            raise ValueError(f"{setting}: the {name} split is empty after filtering slices")
    return ds


def das_pool(world, ts: Sequence[Stimulus]) -> list[Stimulus]:
    """Matched forward stimuli under both nonce properties ("daxable" items
    plus a "feps" rendering of every pair)."""
    out = list(ts)
    for s in ts:
        out.append(render(world, s.pair, "feps", "feps", s.direction, s.template, id=s.id + "-feps"))
    return out


# ---------------------------------------------------------------- batched patching


class TraceCache:
    """Clean traces and role positions per stimulus text, computed once."""

    def __init__(self, model: TransformerModel):
        self.model = model
        self._traces: dict[str, TraceBundle] = {}
        self._roles: dict[str, dict[str, int]] = {}

    def trace(self, s: Stimulus) -> TraceBundle:
        t = self._traces.get(s.text)
        if t is None:
            t = self._traces[s.text] = forward_with_trace(self.model, self.model.encode(s.text))
        return t

    def position(self, s: Stimulus, role: str) -> int:
        r = self._roles.get(s.text)
        if r is None:
            r = self._roles[s.text] = role_positions(self.model, s)
        return r[role]


def _check_site(model: TransformerModel, site: InterventionSite) -> None:
    if not 0 <= site.layer < model.config.n_layers:
        raise SiteError(f"layer {site.layer} out of range for a {model.config.n_layers}-layer model")
    if site.stream != "resid":
        raise SiteError("interventions are defined on the post-block residual stream")


def _label_logits(model, cache, pairs, site, rot, gate, label_pair):
    """Patched final-position logits restricted to ``label_pair`` (B, 2)."""
    tok = model.tokenizer
    ids, lens = pad_batch([cache.trace(p.base).tokens for p in pairs], tok.pad_id)
    b, t = ids.shape
    d = model.config.d_model
    resid = np.zeros((b, t, d))
    src = np.empty((b, d))
    onehot = np.zeros((b, t, 1))
    for r, p in enumerate(pairs):
        tb = cache.trace(p.base)
        resid[r, : len(tb.tokens)] = tb.resid[site.layer]
        j = cache.position(p.base, site.role)
        i = cache.position(p.source, site.role)
        src[r] = cache.trace(p.source).resid[site.layer, i]
        onehot[r, j, 0] = 1.0
    base_vec = (resid * onehot).sum(axis=1)
    new = _apply(T.Tensor(base_vec), T.Tensor(src), rot, gate)
    x = T.add(T.mul(T.Tensor(resid), 1.0 - onehot), T.mul(T.reshape(new, (b, 1, d)), onehot))
    logits = run(model, ids, start=(site.layer, x))
    cols = [tok.id(label_pair[0]), tok.id(label_pair[1])]
    final = T.getitem(logits, (np.arange(b), lens - 1))
    return T.getitem(final, (slice(None), cols))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class DasHparams:
    epochs: int = 2
    batch_size: int = 16
    lr: float = 1e-3
    grad_accum: int = 1
    tau_start: float = 1.0
    tau_end: float = 0.01
    seed: int = 0
    init_theta: tuple[float, float] = (-4.0, -1.0)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "grad_accum"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("lr and temperatures must be positive")

    @classmethod
    def desk(cls, **overrides) -> "DasHparams":
        """Settings for the small toy pools (a few hundred pairs): more
        epochs and a larger step so the boundaries can move."""
        return replace(cls(epochs=10, lr=0.05), **overrides)

    def tau(self, step: int, total: int) -> float:
        if total <= 1:
            return self.tau_end
        return self.tau_start + (self.tau_end - self.tau_start) * step / (total - 1)


@dataclass
class DasResult:
    intervention: RotationIntervention
    losses: list[float]
    orthogonality: list[float]  # ||R^T R - I||_F after every optimizer step
    soft_width: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_das(
    model: TransformerModel,
    pairs: Sequence[CounterfactualPair],
    site: InterventionSite,
    hparams: DasHparams = DasHparams(),
    label_pair: tuple[str, str] = ("Yes", "No"),
    cache: TraceCache | None = None,
) -> DasResult:
    """Fit rotation and boundaries with 2-way cross-entropy on the label pair."""
    if not pairs:
        raise ValueError("no counterfactual pairs to train on")
    _check_site(model, site)
    cache = cache or TraceCache(model)
    for p in pairs:  # fail early on unresolvable roles
        cache.position(p.base, site.role)
        cache.position(p.source, site.role)
    d = model.config.d_model
    skew = T.Tensor(np.zeros((d, d)), requires_grad=True)
    theta = T.Tensor(np.array(hparams.init_theta, dtype=np.float64), requires_grad=True)
    opt = T.Adam([skew, theta], lr=hparams.lr)
    rng = np.random.default_rng(hparams.seed)
    n_batches = math.ceil(len(pairs) / hparams.batch_size)
    total = max(1, hparams.epochs * n_batches // hparams.grad_accum)
    losses, ortho = [], []
    step = 0
    eye = np.eye(d)
    for epoch in range(hparams.epochs):
        order = rng.permutation(len(pairs))
        acc: dict | None = None
        for bi in range(n_batches):
            batch = [pairs[i] for i in order[bi * hparams.batch_size: (bi + 1) * hparams.batch_size]]
            tau = hparams.tau(step, total)
            try:
                rot = T.cayley(skew)
                gate = _gate(theta, d, tau)
                logits = _label_logits(model, cache, batch, site, rot, gate, label_pair)
                targets = np.array([0 if p.label == label_pair[0] else 1 for p in batch])
                loss = T.cross_entropy(logits, targets)
            except T.NumericalError as exc:
                raise DasError(f"DAS training failed at step {step}: {exc}") from None
            g = T.grad(loss, [skew, theta])
            acc = {k: v.data for k, v in g.items()} if acc is None else {k: acc[k] + g[k].data for k in acc}
            losses.append(float(loss.data))
            if (bi + 1) % hparams.grad_accum == 0 or bi == n_batches - 1:
                opt.step({k: T.Tensor(v / hparams.grad_accum) for k, v in acc.items()})
                acc = None
                r = T.cayley(skew).data
                ortho.append(float(np.linalg.norm(r.T @ r - eye)))
                step += 1
    iv = RotationIntervention(skew.data.copy(), theta.data.copy(), hparams.tau_end, site=site)
    soft = float(iv.soft_gate(hparams.tau_end).sum())
    return DasResult(iv.freeze(), losses, ortho, soft)


def untrained(model: TransformerModel, site: InterventionSite, hparams: DasHparams = DasHparams()) -> RotationIntervention:
    """The intervention a zero-step run would return."""
    iv = RotationIntervention.init(model.config.d_model, hparams.init_theta, hparams.tau_end)
    iv.site = site
    return iv.freeze()


# ---------------------------------------------------------------- evaluation


def patched_p_rel(
    model: TransformerModel,
    intervention: RotationIntervention,
    pairs: Sequence[CounterfactualPair],
    site: InterventionSite,
    label_pair: tuple[str, str] = ("Yes", "No"),
    cache: TraceCache | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """P_rel(label_pair[0]) after the hard-mask intervention, per pair."""
    _check_site(model, site)
    cache = cache or TraceCache(model)
    rot = T.Tensor(intervention.rotation())
    gate = intervention.mask()
    out = []
    for k in range(0, len(pairs), batch_size):
        lg = _label_logits(model, cache, pairs[k: k + batch_size], site, rot, gate, label_pair).data
        # P_rel from the two logits: exp(a) / (exp(a) + exp(b))
        out.append(1.0 / (1.0 + np.exp(lg[:, 1] - lg[:, 0])))
    return np.concatenate(out)


def evaluate_iia(
    model: TransformerModel,
    intervention: RotationIntervention,
    pairs: Sequence[CounterfactualPair],
    site: InterventionSite,
    label_pair: tuple[str, str] = ("Yes", "No"),
    cache: TraceCache | None = None,
) -> float:
    if not pairs:
        raise ValueError("no counterfactual pairs to evaluate")
    p = patched_p_rel(model, intervention, pairs, site, label_pair, cache)
    want = np.array([pr.label == label_pair[0] for pr in pairs])
    return float(np.mean((p > 0.5) == want))


def base_agreement(model: TransformerModel, pairs: Sequence[CounterfactualPair],
                   label_pair: tuple[str, str] = ("Yes", "No"), cache: TraceCache | None = None) -> float:
    """Agreement of the un-patched model with the counterfactual labels."""
    cache = cache or TraceCache(model)
    a, b = (model.tokenizer.id(x) for x in label_pair)
    hits = 0
    for p in pairs:
        lg = cache.trace(p.base).logits[-1]
        hits += (lg[a] > lg[b]) == (p.label == label_pair[0])
    return hits / len(pairs)


# ---------------------------------------------------------------- directional insensitivity


@dataclass
class SdiResult:
    sdi: float
    counts: dict[str, int]


def sdi_evaluate(
    model: TransformerModel,
    intervention: RotationIntervention,
    pairs: Sequence[CounterfactualPair],
    site: InterventionSite,
    world,
    cache: TraceCache | None = None,
) -> SdiResult:
    """Share of pairs whose forward No->Yes flip survives reversing the noun
    order in both base and source.

    Pairs are kept when the base is non-taxonomic and the source taxonomic,
    the un-patched model labels both forward items correctly, and the
    intervention flips the forward base to Yes.
    """
    cache = cache or TraceCache(model)
    yes, no = model.tokenizer.id("Yes"), model.tokenizer.id("No")
    counts = {"input": len(pairs)}
    kept = [p for p in pairs if not p.base.taxonomic and p.source.taxonomic and p.base.direction == "forward"]
    counts["base -Tax, source +Tax"] = len(kept)

    def says_yes(s):
        lg = cache.trace(s).logits[-1]
        return lg[yes] > lg[no]

    kept = [p for p in kept if not says_yes(p.base) and says_yes(p.source)]
    counts["labelled correctly"] = len(kept)
    if kept:
        flipped = patched_p_rel(model, intervention, kept, site, cache=cache) > 0.5
        kept = [p for p, f in zip(kept, flipped) if f]
    counts["flipped by intervention"] = len(kept)
    if not kept:
        raise DasError(f"SDI filter left no pairs: {counts}")

    def rev(s: Stimulus) -> Stimulus:
        return render(world, s.pair, s.premise_property, s.conclusion_property, "reversed", s.template,
                      id=s.id + "-rev")

    reversed_pairs = [CounterfactualPair(rev(p.base), rev(p.source), "Yes") for p in kept]
    p_yes = patched_p_rel(model, intervention, reversed_pairs, site, cache=cache)
    return SdiResult(float(np.mean(p_yes > 0.5)), counts)


# ---------------------------------------------------------------- sweep


@dataclass
class CellResult:
    layer: int
    role: str
    setting: str
    iia: float | None
    mask_width: int | None = None
    final_loss: float | None = None
    gen_iia: float | None = None
    error: str | None = None


def run_cell(model, dataset: CounterfactualDataset, site: InterventionSite, hparams: DasHparams,
             cache: TraceCache | None = None) -> tuple[CellResult, DasResult | None]:
    """Train and evaluate one (layer, role) cell; failures are captured."""
    cache = cache or TraceCache(model)
    try:
        res = train_das(model, dataset.train, site, hparams, dataset.label_pair, cache)
        iia = evaluate_iia(model, res.intervention, dataset.test, site, dataset.label_pair, cache)
        gen = (evaluate_iia(model, res.intervention, dataset.gen, site, dataset.label_pair, cache)
               if dataset.gen else None)
        return CellResult(site.layer, site.role, dataset.setting, iia, res.intervention.width,
                          res.final_loss, gen), res
    except Exception as exc:  # recorded per cell; the sweep carries on
        return CellResult(site.layer, site.role, dataset.setting, None, error=f"{type(exc).__name__}: {exc}"), None


def sweep(
    model: TransformerModel,
    dataset: CounterfactualDataset,
    layers: Sequence[int] | None = None,
    roles: Sequence[str] = ROLES,
    hparams: DasHparams = DasHparams(),
    progress: Callable[[CellResult], None] | None = None,
) -> list[CellResult]:
    layers = list(range(model.config.n_layers)) if layers is None else list(layers)
    cache = TraceCache(model)
    out = []
    for layer in layers:
        for role in roles:
            cell, _ = run_cell(model, dataset, InterventionSite(layer, role), hparams, cache)
            out.append(cell)
            if progress:
                progress(cell)
    return out


GRID_FIELDS = ("layer", "role", "setting", "iia", "mask_width", "final_loss", "gen_iia", "error")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_grid_csv(cells: Sequence[CellResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_FIELDS)
        for c in cells:
            w.writerow([_fmt(getattr(c, f)) for f in GRID_FIELDS])


def read_grid_csv(path) -> list[CellResult]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            num = lambda k, f=float: f(row[k]) if row[k] else None  # noqa: E731
            out.append(CellResult(int(row["layer"]), row["role"], row["setting"], num("iia"),
                                  num("mask_width", int), num("final_loss"), num("gen_iia"), row["error"] or None))
    return out


def best_cell(cells: Sequence[CellResult]) -> CellResult:
    ok = [c for c in cells if c.iia is not None]
    if not ok:
        raise DasError("no successful cells")
    return max(ok, key=lambda c: c.iia)


def render_svg(cells: Sequence[CellResult], title: str = "") -> str:
    """Layer x role heatmap of IIA; failed cells are hatched grey."""
    roles = list(dict.fromkeys(c.role for c in cells))
    layers = sorted({c.layer for c in cells})
    cw, ch, left, top = 96, 28, 70, 40
    width = left + cw * len(roles) + 20
    height = top + ch * len(layers) + 50
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="18" font-size="13">{_esc(title)}</text>',
    ]
    for j, r in enumerate(roles):
        parts.append(f'<text x="{left + j * cw + cw / 2}" y="{top - 6}" text-anchor="middle">{_esc(r)}</text>')
    lookup = {(c.layer, c.role): c for c in cells}
    for i, layer in enumerate(reversed(layers)):
        y = top + i * ch
        parts.append(f'<text x="{left - 8}" y="{y + ch / 2 + 4}" text-anchor="end">layer {layer}</text>')
        for j, r in enumerate(roles):
            c = lookup.get((layer, r))
            x = left + j * cw
            if c is None or c.iia is None:
                parts.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="#bbbbbb" stroke="#fff"/>')
                parts.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle">n/a</text>')
                continue
            shade = int(round(255 * (1.0 - c.iia)))
            fill = f"#{shade:02x}{shade:02x}ff"
            ink = "#fff" if c.iia > 0.6 else "#000"
            parts.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="#fff"/>')
            parts.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle" fill="{ink}">{c.iia:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
