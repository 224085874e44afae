"""A minimal decoder-only transformer with hookable residual streams.

Forward passes are written once against :mod:`propinherit.tensor`, so the
same code serves training, tracing, patching and gradient-based
interventions.  A *hook* sees every post-block residual (and every MLP
output) and may replace it; tracing and patching are thin hooks.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T

RESERVED = ("<pad>", "<bos>", "Yes", "No", "chart", "view")
CHECKPOINT_VERSION = 1
STREAMS = ("resid", "mlp")

_TOKEN_RE = re.compile(r"[A-Za-z0-9']+|\n|[^\sA-Za-z0-9']")


class VocabularyError(KeyError):
    """A token is not in the vocabulary."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0])


class TrainingError(RuntimeError):
    pass


class ContextError(ValueError):
    pass


# ---------------------------------------------------------------- tokenizer


class Tokenizer:
    """Case-sensitive word-level tokenizer.

    Words are runs of letters, digits and apostrophes; every other
    non-space character (including hyphens) and each newline is its own
    token.
    """

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        seen: dict[str, None] = {}
        for t in texts:
            for w in cls.split(t):
                seen.setdefault(w, None)
        return cls(seen)

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi["<pad>"]

    @property
    def bos_id(self) -> int:
        return self.stoi["<bos>"]

    def id(self, word: str) -> int:
        try:
            return self.stoi[word]
        except KeyError:
            raise VocabularyError(f"token {word!r} is not in the vocabulary") from None

    def encode(self, text: str, bos: bool = False) -> list[int]:
        ids = [self.id(w) for w in self.split(text)]
        return [self.bos_id] + ids if bos else ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i != self.bos_id)

    def normalize(self, text: str) -> str:
        return " ".join(self.split(text))


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 0
    max_context: int = 64
    seed: int = 0
    d_ff: int = 0  # 0 -> 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")
        if self.vocab_size and self.vocab_size < len(RESERVED):
            raise ValueError("vocab_size must cover the reserved tokens")

    @property
    def ff(self) -> int:
        return self.d_ff or 4 * self.d_model


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ff
    shapes = {"tok": (cfg.vocab_size, d), "pos": (cfg.max_context, d)}
    for i in range(cfg.n_layers):
        p = f"b{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "unembed": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            out[name] = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            out[name] = np.zeros(shape)
        elif name in ("w2", "wo") or name.endswith((".w2", ".wo")):
            out[name] = rng.normal(0.0, 0.02 / math.sqrt(2 * cfg.n_layers), shape)
        else:
            out[name] = rng.normal(0.0, 0.02, shape)
    return out


class TransformerModel:
    """Parameters plus tokenizer.  Treat as immutable outside training."""

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer, params: dict[str, np.ndarray] | None = None):
        if config.vocab_size != len(tokenizer):
            raise ValueError(f"config vocab_size {config.vocab_size} != tokenizer size {len(tokenizer)}")
        self.config = config
        self.tokenizer = tokenizer
        raw = params if params is not None else init_params(config)
        shapes = _param_shapes(config)
        if set(raw) != set(shapes):
            raise ValueError(f"parameter names mismatch: {sorted(set(raw) ^ set(shapes))}")
        self.params: dict[str, T.Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(raw[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = T.Tensor(arr, name=name)
        self._mask = np.triu(np.full((config.max_context, config.max_context), -1e9), 1)

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text, bos=True)


Hook = Callable[[int, str, T.Tensor], T.Tensor]


def _attention(P, i: int, h: T.Tensor, mask: np.ndarray, n_heads: int) -> T.Tensor:
    b, t, d = h.shape
    dh = d // n_heads
    p = f"b{i}."

    def heads(w, bias):
        x = T.add(T.matmul(h, P[p + w]), P[p + bias])
        return T.transpose(T.reshape(x, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), mask[:t, :t])
    o = T.matmul(T.softmax(scores, axis=-1), v)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, t, d))
    return T.add(T.matmul(o, P[p + "wo"]), P[p + "bo"])


def run(
    model: TransformerModel,
    ids: np.ndarray,
    hook: Hook | None = None,
    start: tuple[int, T.Tensor] | None = None,
    select: tuple[np.ndarray, np.ndarray] | None = None,
) -> T.Tensor:
    """Logits (B, T, V) for a right-padded id batch (B, T).

    ``select=(rows, cols)`` unembeds only those positions, giving (N, V).

    ``start=(layer, resid)`` resumes after block ``layer`` from a given
    post-block residual instead of embedding ``ids`` (which then only fixes
    the length).  ``hook(layer, stream, x)`` may replace the MLP output
    (stream "mlp") or the post-block residual (stream "resid").
    """
    cfg, P = model.config, model.params
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, time) array")
    t = ids.shape[1]
    if t > cfg.max_context:
        raise ContextError(f"sequence length {t} exceeds max_context {cfg.max_context}")
    if start is None:
        x = T.add(T.embedding(P["tok"], ids), T.getitem(P["pos"], slice(0, t)))
        first = 0
    else:
        first, x = start[0] + 1, start[1]
    for i in range(first, cfg.n_layers):
        p = f"b{i}."
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        x = T.add(x, _attention(P, i, h, model._mask, cfg.n_heads))
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        f = T.add(T.matmul(T.gelu(T.add(T.matmul(h, P[p + "w1"]), P[p + "b1"])), P[p + "w2"]), P[p + "b2"])
        if hook is not None:
            f = hook(i, "mlp", f)
        x = T.add(x, f)
        if hook is not None:
            x = hook(i, "resid", x)
    if select is not None:
        x = T.getitem(x, select)
    return T.matmul(T.layer_norm(x, P["lnf.g"], P["lnf.b"]), P["unembed"])


def pad_batch(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a (B, T) array; returns it with per-row lengths."""
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lens.max())), pad, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out, lens


# ---------------------------------------------------------------- tracing and patching


@dataclass
class TraceBundle:
    """Post-block residuals ``resid[layer][pos]`` and MLP outputs, plus logits."""

    tokens: list[int]
    resid: np.ndarray   # (n_layers, T, d)
    mlp: np.ndarray     # (n_layers, T, d)
    logits: np.ndarray  # (T, V)

    def stream(self, name: str) -> np.ndarray:
        if name not in STREAMS:
            raise ValueError(f"unknown stream {name!r}; expected one of {STREAMS}")
        return self.resid if name == "resid" else self.mlp


def _check_tokens(model: TransformerModel, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if len(ids) > model.config.max_context:
        raise ContextError(f"input has {len(ids)} tokens but max_context is {model.config.max_context}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValueError("token id out of range")
    return ids


def forward(model: TransformerModel, tokens: Sequence[int]) -> np.ndarray:
    """Plain forward pass; logits (T, V)."""
    return run(model, _check_tokens(model, tokens)[None]).data[0]


def forward_with_trace(model: TransformerModel, tokens: Sequence[int]) -> TraceBundle:
    ids = _check_tokens(model, tokens)
    resid, mlp = [], []

    def hook(layer, stream, x):
        (resid if stream == "resid" else mlp).append(x.data[0])
        return x

    logits = run(model, ids[None], hook).data[0]
    return TraceBundle(list(map(int, ids)), np.stack(resid), np.stack(mlp), logits)


def _patch_hook(model: TransformerModel, n_tokens: int, patches, stream: str) -> Hook | None:
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}; expected one of {STREAMS}")
    cfg = model.config
    table: dict[int, list[tuple[int, np.ndarray]]] = {}
    seen = set()
    for layer, pos, vec in patches:
        if not 0 <= layer < cfg.n_layers:
            raise IndexError(f"patch layer {layer} out of range for {cfg.n_layers} layers")
        if not 0 <= pos < n_tokens:
            raise IndexError(f"patch position {pos} out of range for {n_tokens} tokens")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (cfg.d_model,):
            raise ValueError(f"patch vector has shape {vec.shape}, expected ({cfg.d_model},)")
        if (layer, pos) in seen:
            raise ValueError(f"duplicate patch at layer {layer}, position {pos}")
        seen.add((layer, pos))
        table.setdefault(layer, []).append((pos, vec))
    if not table:
        return None

    def hook(layer, s, x):
        if s != stream or layer not in table:
            return x
        keep = np.ones(x.shape)
        put = np.zeros(x.shape)
        for pos, vec in table[layer]:
            keep[0, pos] = 0.0
            put[0, pos] = vec
        return T.add(T.mul(x, keep), put)

    return hook


def patched_trace(
    model: TransformerModel,
    base_tokens: Sequence[int],
    patches: Sequence[tuple[int, int, np.ndarray]],
    stream: str = "resid",
) -> TraceBundle:
    """Trace of a forward pass in which the chosen stream at each patched
    ``(layer, position)`` is overwritten before later blocks run."""
    ids = _check_tokens(model, base_tokens)
    patch = _patch_hook(model, len(ids), patches, stream)
    resid, mlp = [], []

    def hook(layer, s, x):
        if patch is not None:
            x = patch(layer, s, x)
        (resid if s == "resid" else mlp).append(x.data[0])
        return x

    logits = run(model, ids[None], hook).data[0]
    return TraceBundle(list(map(int, ids)), np.stack(resid), np.stack(mlp), logits)


def patched_forward(
    model: TransformerModel,
    base_tokens: Sequence[int],
    patches: Sequence[tuple[int, int, np.ndarray]],
    stream: str = "resid",
) -> np.ndarray:
    """Next-token distribution at the final position after patching."""
    ids = _check_tokens(model, base_tokens)
    hook = _patch_hook(model, len(ids), patches, stream)
    return _softmax(run(model, ids[None], hook).data[0, -1])


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def next_token_logprobs(model: TransformerModel, tokens: Sequence[int]) -> np.ndarray:
    """Log-probabilities over the vocabulary after ``tokens`` (one sequence, unpadded)."""
    logits = forward(model, tokens)[-1]
    s = logits - logits.max()
    return s - np.log(np.exp(s).sum())


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainHparams:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50
    min_lr_frac: float = 0.1  # cosine decay floor, as a fraction of lr
    clip: float | None = 1.0  # global gradient-norm clip
    seed: int = 0
    loss_threshold: float | None = None
    log_every: int = 0
    # words whose embedding rows stay at a fixed random draw; used for nonce
    # property words so held-out ones look like the trained ones
    frozen_tokens: tuple[str, ...] = ()
    frozen_scale: float = 0.3


@dataclass
class TrainResult:
    model: TransformerModel
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-20:]
        return float(np.mean(tail)) if tail else float("nan")


def _lr_at(hp: TrainHparams, step: int) -> float:
    """Linear warmup, then cosine decay to ``min_lr_frac * lr``."""
    if step < hp.warmup:
        return hp.lr * (step + 1) / hp.warmup
    span = max(1, hp.steps - hp.warmup)
    frac = 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - hp.warmup) / span)))
    return hp.lr * (hp.min_lr_frac + (1.0 - hp.min_lr_frac) * frac)


def _prepare(tok: Tokenizer, corpus) -> list[tuple[list[int], int]]:
    """(ids, first-target index) per item; plain strings train on every token."""
    out = []
    for item in corpus:
        if isinstance(item, str):
            ids = tok.encode(item, bos=True)
            out.append((ids, 1))
        else:
            prompt, answer = item
            p = tok.encode(prompt, bos=True)
            a = tok.encode(answer)
            if not a:
                raise ValueError(f"empty answer for prompt {prompt!r}")
            out.append((p + a, len(p)))
    return out


def train_lm(
    corpus: Sequence,
    config: ModelConfig,
    hparams: TrainHparams = TrainHparams(),
    tokenizer: Tokenizer | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Next-token training.  Items are strings or ``(prompt, answer)`` pairs;
    for pairs only the answer tokens carry loss."""
    if not corpus:
        raise ValueError("training corpus is empty")
    tok = tokenizer or Tokenizer.from_texts(
        t for item in corpus for t in ([item] if isinstance(item, str) else item))
    items = _prepare(tok, corpus)
    longest = max(len(ids) for ids, _ in items)
    if longest > config.max_context:
        raise ContextError(f"corpus item of {longest} tokens exceeds max_context {config.max_context}")
    if config.vocab_size != len(tok):
        config = ModelConfig(**{**asdict(config), "vocab_size": len(tok)})
    model = TransformerModel(config, tok)
    frozen = np.array(sorted({tok.stoi[w] for w in hparams.frozen_tokens if w in tok.stoi}), dtype=np.int64)
    if len(frozen):
        emb = model.params["tok"].data.copy()
        draw = np.random.default_rng([config.seed, 1])
        emb[frozen] = draw.normal(0.0, hparams.frozen_scale, (len(frozen), config.d_model))
        model.params["tok"].data = emb
    params = list(model.params.values())
    for p in params:
        p.requires_grad = True
    opt = T.Adam(params, lr=hparams.lr)
    rng = np.random.default_rng(hparams.seed)
    result = TrainResult(model)
    order = rng.permutation(len(items))
    cursor = 0
    for step in range(hparams.steps):
        if cursor + hparams.batch_size > len(order):
            order, cursor = rng.permutation(len(items)), 0
        idx = order[cursor: cursor + hparams.batch_size]
        cursor += hparams.batch_size
        batch = [items[i] for i in idx]
        ids, lens = pad_batch([s for s, _ in batch], tok.pad_id)
        rows, cols, targets = [], [], []
        for r, (s, first) in enumerate(batch):
            for j in range(first, len(s)):
                rows.append(r)
                cols.append(j - 1)
                targets.append(s[j])
        opt.lr = _lr_at(hparams, step)
        try:
            picked = run(model, ids[:, :-1] if ids.shape[1] > 1 else ids, select=(np.array(rows), np.array(cols)))
            loss = T.cross_entropy(picked, np.array(targets))
        except T.NumericalError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}") from None
        if not np.isfinite(loss.data):
            raise TrainingError(f"training diverged at step {step}: loss is {loss.data}")
        grads = T.grad(loss, params)
        if len(frozen):
            g = grads[model.params["tok"]].data.copy()
            g[frozen] = 0.0
            grads[model.params["tok"]] = T.Tensor(g)
        if hparams.clip is not None:
            norm = math.sqrt(sum(float((g.data * g.data).sum()) for g in grads.values()))
            if norm > hparams.clip:
                for p in params:
                    grads[p] = T.Tensor(grads[p].data * (hparams.clip / norm))
        opt.step(grads)
        result.losses.append(float(loss.data))
        if progress is not None and hparams.log_every and step % hparams.log_every == 0:
            progress(step, float(loss.data))
    for p in params:
        p.requires_grad = False
    if hparams.loss_threshold is not None and result.final_loss > hparams.loss_threshold:
        raise TrainingError(
            f"final training loss {result.final_loss:.4f} above threshold {hparams.loss_threshold}")
    return result


def answer_accuracy(model: TransformerModel, items: Sequence[tuple[str, str]]) -> float:
    """Fraction of ``(prompt, answer)`` items whose Yes/No argmax matches."""
    yes, no = model.tokenizer.id("Yes"), model.tokenizer.id("No")
    hits = 0
    for prompt, answer in items:
        lp = next_token_logprobs(model, model.encode(prompt))
        hits += ("Yes" if lp[yes] > lp[no] else "No") == answer
    return hits / len(items)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: TransformerModel, path) -> Path:
    path = Path(path)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "vocab": model.tokenizer.itos}
    arrays = {f"p:{k}": v.data for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> TransformerModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
    vocab = meta["vocab"]
    if tuple(vocab[: len(RESERVED)]) != RESERVED:
        raise ValueError("checkpoint vocabulary does not start with the reserved tokens")
    return TransformerModel(ModelConfig(**meta["config"]), Tokenizer(vocab[len(RESERVED):]), params)


# ---------------------------------------------------------------- planted model


@dataclass(frozen=True)
class PlantedSite:
    """Where the planted relation bit lives: coordinate 0 of the post-block
    residual at ``layer`` and the final prompt position."""

    layer: int
    coordinate: int = 0


def planted_world(n_categories: int = 4, k: int = 4, seed: int = 11):
    """A small world whose nouns are all single tokens."""
    from .world import WorldSpec, generate_world

    return generate_world(WorldSpec(n_superordinates=n_categories, k=k, dim=64, overlap=0.0,
                                    compound_rate=0.0, mass_rate=0.0, seed=seed))


def build_planted_model(world=None, config: ModelConfig | None = None, order_sensitive: bool = True,
                        template: int = 2) -> TransformerModel:
    """Hand-set weights that answer Yes iff the conclusion noun is a member
    of the premise category.

    Token embeddings carry a one-hot category id for category nouns and a
    membership vector for member nouns.  Every block but the last is zero.
    In the last block one head reads the category id from the premise slot
    and another reads membership from the conclusion slot; the MLP ANDs
    them and writes +M or -M to residual coordinate 0 at the final
    position, which the unembedding maps to Yes/No.  With
    ``order_sensitive=False`` the heads find nouns by type instead of by
    slot, so the answer ignores argument order.

    Raises if the build-time margin checks fail.
    """
    from .stimuli import DEFAULT_TEMPLATE, TEMPLATE_WORDS, build_evaluation_sets

    world = world if world is not None else planted_world()
    config = config or ModelConfig(n_layers=4, d_model=64, n_heads=4, max_context=40)
    if config.n_layers < 2:
        raise ValueError("the planted model needs at least two layers")
    cats = world.superordinates
    n = len(cats)
    d = config.d_model
    dh = d // config.n_heads
    if config.n_heads < 2 or dh < n or d < 4 * n + 7:
        raise ValueError(f"d_model={d}, n_heads={config.n_heads} too small for {n} categories")

    sets = build_evaluation_sets(world, next(iter(world.spaces)), template or DEFAULT_TEMPLATE)
    texts = [s.text for s in sets.all()]
    words: dict[str, None] = {w: None for w in TEMPLATE_WORDS}
    for c in world.concepts.values():
        words.setdefault(c.surface, None)
    for t in texts:
        for w in Tokenizer.split(t):
            words.setdefault(w, None)
    tok = Tokenizer(words)
    for c in world.concepts.values():
        if len(Tokenizer.split(c.surface)) != 1:
            raise ValueError(f"planted model needs single-token nouns, got {c.surface!r}")
    config = ModelConfig(**{**asdict(config), "vocab_size": len(tok)})

    # slot positions, from a rendered forward stimulus (bos at 0)
    probe = sets.ts[0]
    ids = tok.encode(probe.text, bos=True)
    premise_pos = ids.index(tok.id(probe.first_noun))
    conclusion_pos = len(ids) - 1 - ids[::-1].index(tok.id(probe.second_noun))
    if max(len(tok.encode(t, bos=True)) for t in texts) > config.max_context:
        raise ContextError("planted prompts exceed max_context")

    CAT, MEM = 1, 1 + n
    IS_CAT, IS_CON, SLOT_P, SLOT_C = 2 * n + 1, 2 * n + 2, 2 * n + 3, 2 * n + 4
    A, B = 2 * n + 5, 3 * n + 5
    F = 10.0
    M = 2.0 * F

    params = {k: np.zeros(s) for k, s in _param_shapes(config).items()}
    for k in params:
        if k.endswith(".g"):
            params[k] = np.ones(params[k].shape)
    tokE, posE = params["tok"], params["pos"]
    for ci, c in enumerate(cats):
        tokE[tok.id(world.concepts[c].surface), CAT + ci] = 1.0
        tokE[tok.id(world.concepts[c].surface), IS_CAT] = 1.0
    for m in world.subordinates:
        row = tok.id(world.concepts[m].surface)
        tokE[row, IS_CON] = 1.0
        for ci, c in enumerate(cats):
            if world.is_member(c, m):
                tokE[row, MEM + ci] = 1.0
    posE[:, d - 2], posE[:, d - 1] = F, -F
    posE[premise_pos, SLOT_P] = 1.0
    posE[conclusion_pos, SLOT_C] = 1.0

    sigma = F * math.sqrt(2.0 / d)  # LayerNorm scale, dominated by the filler pair
    last = f"b{config.n_layers - 1}."
    key_a, key_b = (SLOT_P, SLOT_C) if order_sensitive else (IS_CAT, IS_CON)
    gap = 40.0 * math.sqrt(dh)
    for head, key, src, dst in ((0, key_a, CAT, A), (1, key_b, MEM, B)):
        o = head * dh
        params[last + "bq"][o] = gap
        params[last + "wk"][key, o] = sigma
        for ci in range(n):
            params[last + "wv"][src + ci, o + ci] = sigma
            params[last + "wo"][o + ci, dst + ci] = 1.0
    s = 10.0
    for ci in range(n):
        params[last + "w1"][A + ci, ci] = s * sigma
        params[last + "w1"][B + ci, ci] = s * sigma
        params[last + "b1"][ci] = -1.5 * s
        params[last + "w2"][ci, 0] = 2.0 * M / (0.25 * s)
    params[last + "b2"][0] = -M
    params["unembed"][0, tok.id("Yes")] = 10.0
    params["unembed"][0, tok.id("No")] = -10.0

    model = TransformerModel(config, tok, params)
    verify_planted(model, world, sets, order_sensitive)
    return model


def verify_planted(model: TransformerModel, world, sets, order_sensitive: bool = True) -> None:
    """Exhaustive build-time checks on every forward and reversed stimulus:
    the argmax is the relation answer, negating coordinate 0 at the final
    position of the last layer flips it, and negating any other single
    coordinate there leaves it unchanged."""
    tok = model.tokenizer
    yes, no = tok.id("Yes"), tok.id("No")
    last = model.config.n_layers - 1
    forward_items = sets.ts + sets.ps
    for st in forward_items + sets.ds:
        ids = model.encode(st.text)
        relation = st.taxonomic if (st.direction == "forward" or not order_sensitive) else False
        trace = forward_with_trace(model, ids)
        top = int(np.argmax(trace.logits[-1]))
        if top != (yes if relation else no):
            raise AssertionError(f"planted model answers {tok.itos[top]} on {st.id}")
        resid = trace.resid[last]
        flipped = np.repeat(resid[None], model.config.d_model, axis=0)
        idx = np.arange(model.config.d_model)
        flipped[idx, -1, idx] *= -1.0
        logits = run(model, np.tile(ids, (len(idx), 1)), start=(last, T.Tensor(flipped))).data[:, -1]
        tops = logits.argmax(axis=-1)
        if tops[0] == top or not np.all(tops[1:] == top):
            raise AssertionError(f"planted coordinate check failed on {st.id}")
