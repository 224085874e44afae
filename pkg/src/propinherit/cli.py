"""Command-line driver: one YAML config, one output directory.

    propinherit world gen|load   -c run.yaml
    propinherit lm train|eval    -c run.yaml
    propinherit stimuli gen      -c run.yaml
    propinherit behave run       -c run.yaml [--endpoint URL]
    propinherit das train|sweep|sdi -c run.yaml
    propinherit report render    -c run.yaml
    propinherit pipeline         -c run.yaml

Every command appends its inputs, seed and output hashes to
``<out>/manifest.json``.  Exit codes: 0 ok, 1 invalid config, 2 runtime
failure, 3 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from . import behave as B
from . import das as D
from . import nanolm as N
from . import stimuli as S
from . import world as W

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class PartialFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- config

DEFAULTS: dict[str, Any] = {
    "seed": 7,
    "out": "runs/toy",
    "workers": None,
    "world": {
        "source": "generate",
        "generate": {},
        "load": {"concepts": None, "taxonomy": None, "embeddings": {}},
        "label_rule": {},
    },
    "corpus": {},
    "model": {"n_layers": 4, "d_model": 64, "n_heads": 4, "max_context": 48, "d_ff": 128},
    "train": {"steps": 4000, "batch_size": 32, "lr": 1e-3, "warmup": 200},
    "stimuli": {"spaces": ["spose", "sense"], "template": 2},
    "behave": {"endpoint": None, "max_in_flight": 4},
    "das": {
        "model": "toy",
        "space": "spose",
        "settings": ["balanced", "control"],
        "layers": None,
        "roles": list(D.ROLES),
        "rounds": 1,
        "train_frac": 0.75,
        "hparams": {"epochs": 10, "lr": 0.05},
        "site": {"layer": None, "role": "final"},
    },
}

_WORLD_KEYS = {f.name for f in fields(W.WorldSpec)} - {"label_rule", "seed"}
_RULE_KEYS = {f.name for f in fields(W.LabelRule)}
_CORPUS_KEYS = {f.name for f in fields(W.CorpusConfig)} - {"properties", "held_out", "seed"}
_MODEL_KEYS = {f.name for f in fields(N.ModelConfig)} - {"vocab_size", "seed"}
_TRAIN_KEYS = {f.name for f in fields(N.TrainHparams)} - {"seed", "frozen_tokens"}
_DAS_HP_KEYS = {f.name for f in fields(D.DasHparams)} - {"seed"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(where, "expected a mapping")
        out[k] = _merge(base[k], v, where) if isinstance(base[k], dict) and base[k] and v else v
    return out


def _check_keys(section: dict, allowed: set, path: str) -> None:
    for k in section:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}", "unknown key")


def _set_path(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot set a key below a scalar")
    node[keys[-1]] = value


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict:
    """Merge defaults, the YAML file and ``key.path=value`` overrides, then validate."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(str(p), "config file not found")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(p), f"not valid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(str(p), "top level must be a mapping")
    for k, v in (overrides or {}).items():
        _set_path(raw, k, v)
    cfg = _merge(DEFAULTS, raw)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    if cfg["workers"] is not None and (not isinstance(cfg["workers"], int) or cfg["workers"] < 1):
        raise ConfigError("workers", "must be a positive integer or null")
    w = cfg["world"]
    if w["source"] not in ("generate", "load"):
        raise ConfigError("world.source", "must be 'generate' or 'load'")
    _check_keys(w["generate"], _WORLD_KEYS, "world.generate")
    _check_keys(w["label_rule"], _RULE_KEYS, "world.label_rule")
    if w["source"] == "load":
        ld = w["load"]
        for key in ("concepts", "taxonomy"):
            if not ld.get(key):
                raise ConfigError(f"world.load.{key}", "required when world.source is 'load'")
            if not Path(ld[key]).is_file():
                raise ConfigError(f"world.load.{key}", f"file not found: {ld[key]}")
        if not ld.get("embeddings"):
            raise ConfigError("world.load.embeddings", "at least one embedding space is required")
        for name, entry in ld["embeddings"].items():
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError(f"world.load.embeddings.{name}", "expected {path: ..., tag: ...}")
            if not Path(entry["path"]).is_file():
                raise ConfigError(f"world.load.embeddings.{name}.path", f"file not found: {entry['path']}")
    _check_keys(cfg["corpus"], _CORPUS_KEYS, "corpus")
    _check_keys(cfg["model"], _MODEL_KEYS, "model")
    _check_keys(cfg["train"], _TRAIN_KEYS, "train")
    st = cfg["stimuli"]
    if st["template"] not in S.TEMPLATES:
        raise ConfigError("stimuli.template", f"must be one of {sorted(S.TEMPLATES)}")
    if not st["spaces"]:
        raise ConfigError("stimuli.spaces", "at least one similarity space is required")
    d = cfg["das"]
    if d["model"] not in ("toy", "planted", "planted-blind"):
        raise ConfigError("das.model", "must be toy, planted or planted-blind")
    for s in d["settings"]:
        if s not in D.SETTINGS:
            raise ConfigError("das.settings", f"unknown setting {s!r}")
    for r in d["roles"]:
        if r not in D.ROLES:
            raise ConfigError("das.roles", f"unknown role {r!r}")
    if d["model"] == "toy" and d["space"] not in st["spaces"]:
        raise ConfigError("das.space", f"{d['space']!r} is not among stimuli.spaces")
    _check_keys(d["hparams"], _DAS_HP_KEYS, "das.hparams")
    try:
        D.DasHparams(**_das_hp_kwargs(cfg))
        N.TrainHparams(**cfg["train"])
        W.LabelRule(**w["label_rule"])
        N.ModelConfig(**cfg["model"])
    except (ValueError, TypeError) as exc:
        raise ConfigError("config", str(exc)) from None


def _das_hp_kwargs(cfg: dict) -> dict:
    hp = dict(cfg["das"]["hparams"])
    if "init_theta" in hp:
        hp["init_theta"] = tuple(hp["init_theta"])
    return {**hp, "seed": cfg["seed"]}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- artifacts


class Run:
    """Output directory with a manifest of what produced each artifact."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = cfg["seed"]

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts: str, hint: str) -> Path:
        p = self.out.joinpath(*parts)
        if not p.exists():
            raise FileNotFoundError(f"{p} is missing; run `{hint}` first")
        return p

    def record(self, command: str, inputs: list[Path], outputs: list[Path]) -> None:
        mpath = self.out / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {
            "version": MANIFEST_VERSION, "package": __version__, "steps": {}}
        rel = lambda p: str(Path(p).relative_to(self.out)) if Path(p).is_relative_to(self.out) else str(p)  # noqa: E731
        # the output location is not an input: runs elsewhere give the same manifest
        cfg = {k: v for k, v in self.cfg.items() if k != "out"}
        manifest["config"] = cfg
        manifest["config_sha256"] = config_hash(cfg)
        manifest["steps"][command] = {
            "seed": self.seed,
            "inputs": {rel(p): sha256_file(p) for p in sorted(map(Path, inputs))},
            "outputs": {rel(p): sha256_file(p) for p in sorted(map(Path, outputs))},
        }
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- world


def make_world(cfg: dict) -> W.World:
    w = cfg["world"]
    rule = W.LabelRule(**w["label_rule"])
    if w["source"] == "generate":
        return W.generate_world(W.WorldSpec(**w["generate"], label_rule=rule, seed=cfg["seed"]))
    ld = w["load"]
    emb = {name: (e["path"], e.get("tag", name)) for name, e in ld["embeddings"].items()}
    return W.load_world(ld["concepts"], ld["taxonomy"], emb, rule)


def world_paths(run: Run) -> dict:
    return {"concepts": run.out / "world" / "concepts.tsv", "taxonomy": run.out / "world" / "taxonomy.tsv"}


def cmd_world(run: Run, action: str) -> int:
    world = make_world(run.cfg)
    for space in run.cfg["stimuli"]["spaces"]:
        if space not in world.spaces:
            raise ConfigError("stimuli.spaces", f"world has no space {space!r}")
        W.check_similarity_structure(world, space)
    paths = W.save_world(world, run.out / "world")
    rule = _write_json(run.path("world", "label_rule.json"), asdict(world.label_rule))
    summary = _write_json(run.path("world", "summary.json"), world.summary())
    inputs = [] if action == "gen" else [Path(p) for p in _load_inputs(run.cfg)]
    run.record(f"world {action}", inputs, list(paths.values()) + [rule, summary])
    return EXIT_OK


def _load_inputs(cfg: dict) -> list[str]:
    ld = cfg["world"]["load"]
    return [ld["concepts"], ld["taxonomy"]] + [e["path"] for e in ld["embeddings"].values()]


def read_world(run: Run) -> W.World:
    p = run.need("world", "concepts.tsv", hint="world gen")
    d = p.parent
    rule = W.LabelRule(**json.loads((d / "label_rule.json").read_text()))
    tags = json.loads((d / "summary.json").read_text())["spaces"]
    spaces = {name: (d / f"embeddings_{name}.tsv", tag) for name, tag in sorted(tags.items())}
    return W.load_world(d / "concepts.tsv", d / "taxonomy.tsv", spaces, rule)


# ---------------------------------------------------------------- toy LM


def toy_tokenizer(world: W.World, corpus: W.Corpus, template: int) -> N.Tokenizer:
    """Vocabulary over the corpus plus every evaluation prompt the world can
    produce, so held-out stimuli never hit unknown words."""
    texts = corpus.texts()
    for space in sorted(world.spaces):
        try:
            sets = S.build_evaluation_sets(world, space, template)
        except ValueError:
            continue
        texts += [s.text for s in sets.all()]
        texts += [s.text for s in D.das_pool(world, sets.ts)]
    return N.Tokenizer.from_texts(texts)


def train_toy(cfg: dict, world: W.World, progress=None) -> tuple[N.TrainResult, W.Corpus]:
    corpus = W.emit_corpus(world, W.CorpusConfig(**cfg["corpus"], seed=cfg["seed"]))
    tok = toy_tokenizer(world, corpus, cfg["stimuli"]["template"])
    frozen = tuple(p.word for p in S.TRAIN_PROPERTIES) + W.HELD_OUT_PROPERTIES
    config = N.ModelConfig(**cfg["model"], vocab_size=len(tok), seed=cfg["seed"])
    hp = N.TrainHparams(**{**cfg["train"], "seed": cfg["seed"], "frozen_tokens": frozen})
    return N.train_lm(corpus.items, config, hp, tokenizer=tok, progress=progress), corpus


def cmd_lm(run: Run, action: str) -> int:
    world = read_world(run)
    wfiles = list(world_paths(run).values())
    if action == "train":
        log = []
        res, _ = train_toy(run.cfg, world, progress=lambda s, l: log.append((s, l)))
        ck = N.save_checkpoint(res.model, run.path("lm", "model.npz"))
        lp = run.path("lm", "train_loss.csv")
        with open(lp, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows((i, repr(v)) for i, v in enumerate(res.losses))
        run.record("lm train", wfiles, [ck, lp])
        return EXIT_OK
    ck = run.need("lm", "model.npz", hint="lm train")
    model = N.load_checkpoint(ck)
    out = {}
    for space in run.cfg["stimuli"]["spaces"]:
        sets = S.build_evaluation_sets(world, space, run.cfg["stimuli"]["template"], run.seed)
        out[space] = {name: N.answer_accuracy(model, [(s.text, s.label) for s in getattr(sets, name)])
                      for name in ("ts", "ps", "ms", "ds")}
    ev = _write_json(run.path("lm", "eval.json"), out)
    run.record("lm eval", wfiles + [ck], [ev])
    return EXIT_OK


# ---------------------------------------------------------------- stimuli and behaviour


def cmd_stimuli(run: Run) -> int:
    world = read_world(run)
    outs = []
    for space in run.cfg["stimuli"]["spaces"]:
        sets = S.build_evaluation_sets(world, space, run.cfg["stimuli"]["template"], run.seed)
        for name in ("ts", "ps", "ms", "ds"):
            p = run.path("stimuli", space, f"{name}.jsonl")
            S.write_jsonl(getattr(sets, name), p)
            outs.append(p)
    run.record("stimuli gen", list(world_paths(run).values()), outs)
    return EXIT_OK


def _read_sets(run: Run, space: str) -> S.EvaluationSets:
    parts = {}
    for name in ("ts", "ps", "ms", "ds"):
        parts[name] = S.read_jsonl(run.need("stimuli", space, f"{name}.jsonl", hint="stimuli gen"))
    return S.EvaluationSets(**parts)


def _pool_scorer(model, workers: int):
    """In-process scorer that fans prompts out over worker processes."""
    base = B.model_scorer(model)
    if workers <= 1:
        return base

    def score(prompts, continuations):
        chunks = [list(prompts[i::workers]) for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_score_chunk, [(model, c, list(continuations)) for c in chunks]))
        out = [None] * len(prompts)
        for i, part in enumerate(parts):
            out[i::workers] = part
        return out

    return score


def _score_chunk(args):
    model, prompts, conts = args
    return B.model_scorer(model)(prompts, conts)


def cmd_behave(run: Run, endpoint: str | None = None) -> int:
    endpoint = endpoint or run.cfg["behave"]["endpoint"] or None
    inputs: list[Path] = []
    if endpoint:
        from .lmclient import DEFAULT_VARIANTS, RemoteScorer, RetryPolicy

        scorer = RemoteScorer(endpoint, RetryPolicy.from_env(), os.environ.get("PROPINHERIT_TOKEN"),
                              run.cfg["behave"]["max_in_flight"])
        yes, no = DEFAULT_VARIANTS[:2], DEFAULT_VARIANTS[2:]
        name = endpoint
    else:
        ck = run.need("lm", "model.npz", hint="lm train")
        inputs.append(ck)
        scorer = _pool_scorer(N.load_checkpoint(ck), _workers(run.cfg))
        yes, no = B.YES_VARIANTS, B.NO_VARIANTS
        name = "toy"
    reports, outs = [], []
    for space in run.cfg["stimuli"]["spaces"]:
        sets = _read_sets(run, space)
        inputs += [run.out / "stimuli" / space / f"{n}.jsonl" for n in ("ts", "ps", "ms", "ds")]
        ev = B.evaluate(sets, scorer, model=name, space=space, template=run.cfg["stimuli"]["template"],
                        yes_variants=yes, no_variants=no)
        reports.append(ev.report)
        for set_name, recs in ev.records.items():
            p = run.path("behave", space, f"{set_name}.csv")
            B.write_results_csv(recs, p)
            outs.append(p)
    mp = run.path("behave", "metrics.json")
    B.write_metrics_json(reports, mp)
    run.record("behave run", inputs, outs + [mp])
    return EXIT_OK


# ---------------------------------------------------------------- DAS


def das_subject(run: Run) -> tuple[N.TransformerModel, W.World, list[S.Stimulus], list[Path]]:
    """Model, world and stimulus pool the DAS commands operate on."""
    kind = run.cfg["das"]["model"]
    if kind == "toy":
        ck = run.need("lm", "model.npz", hint="lm train")
        world = read_world(run)
        ts = _read_sets(run, run.cfg["das"]["space"]).ts
        inputs = [ck, run.out / "stimuli" / run.cfg["das"]["space"] / "ts.jsonl"]
        return N.load_checkpoint(ck), world, D.das_pool(world, ts), inputs
    world = N.planted_world()
    model = N.build_planted_model(world, order_sensitive=(kind == "planted"))
    sets = S.build_evaluation_sets(world, sorted(world.spaces)[0])
    return model, world, D.das_pool(world, sets.ts), []


def _dataset(run: Run, pool, setting: str) -> D.CounterfactualDataset:
    d = run.cfg["das"]
    return D.build_counterfactual_dataset(pool, setting, D.CausalModel(), seed=run.seed,
                                          train_frac=d["train_frac"], rounds=d["rounds"])


def _site(run: Run, model) -> D.InterventionSite:
    s = run.cfg["das"]["site"]
    layer = model.config.n_layers - 1 if s["layer"] is None else s["layer"]
    return D.InterventionSite(layer, s["role"])


def cmd_das_train(run: Run) -> int:
    model, world, pool, inputs = das_subject(run)
    hp = D.DasHparams(**_das_hp_kwargs(run.cfg))
    site = _site(run, model)
    outs = []
    for setting in run.cfg["das"]["settings"]:
        ds = _dataset(run, pool, setting)
        cell, res = D.run_cell(model, ds, site, hp)
        if res is None:
            raise RuntimeError(f"DAS training failed for {setting}: {cell.error}")
        tag = f"L{site.layer}_{site.role}"
        ip = run.path("das", setting, "interventions", f"{tag}.npz")
        res.intervention.save(ip)
        rp = _write_json(run.path("das", setting, f"train_{tag}.json"), {
            **asdict(cell), "losses": res.losses, "orthogonality_max": max(res.orthogonality, default=0.0)})
        outs += [ip, rp]
    run.record("das train", inputs, outs)
    return EXIT_OK


def _cell_job(args):
    model, ds, layer, role, hp = args
    cell, res = D.run_cell(model, ds, D.InterventionSite(layer, role), hp)
    return cell, (res.intervention if res else None)


def cmd_das_sweep(run: Run) -> int:
    model, world, pool, inputs = das_subject(run)
    d = run.cfg["das"]
    hp = D.DasHparams(**_das_hp_kwargs(run.cfg))
    layers = list(range(model.config.n_layers)) if d["layers"] is None else list(d["layers"])
    outs, failures = [], []
    for setting in d["settings"]:
        ds = _dataset(run, pool, setting)
        jobs = [(model, ds, layer, role, hp) for layer in layers for role in d["roles"]]
        workers = _workers(run.cfg)
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_cell_job, jobs))
        else:
            results = [_cell_job(j) for j in jobs]
        cells = [c for c, _ in results]
        for cell, iv in results:
            if iv is not None:
                p = run.path("das", setting, "interventions", f"L{cell.layer}_{cell.role}.npz")
                iv.save(p)
                outs.append(p)
            else:
                failures.append(f"{setting} L{cell.layer} {cell.role}: {cell.error}")
        gp = run.path("das", setting, "grid.csv")
        D.write_grid_csv(cells, gp)
        sp = run.path("das", setting, "grid.svg")
        sp.write_text(D.render_svg(cells, f"IIA, {setting}"), encoding="utf-8")
        outs += [gp, sp]
    run.record("das sweep", inputs, outs)
    if failures:
        raise PartialFailure("; ".join(failures))
    return EXIT_OK


def cmd_das_sdi(run: Run) -> int:
    """SDI of the Balanced intervention at the configured site (trained on
    the fly when no checkpoint exists)."""
    model, world, pool, inputs = das_subject(run)
    site = _site(run, model)
    ds = _dataset(run, pool, "balanced")
    ip = run.out / "das" / "balanced" / "interventions" / f"L{site.layer}_{site.role}.npz"
    if ip.exists():
        iv = D.RotationIntervention.load(ip)
        inputs = inputs + [ip]
    else:
        iv = D.train_das(model, ds.train, site, D.DasHparams(**_das_hp_kwargs(run.cfg))).intervention
    res = D.sdi_evaluate(model, iv, ds.train + ds.test, site, world)
    out = _write_json(run.path("das", "sdi.json"), {"site": asdict(site), "sdi": res.sdi, "counts": res.counts})
    run.record("das sdi", inputs, [out])
    return EXIT_OK


# ---------------------------------------------------------------- report


def cmd_report(run: Run) -> int:
    """Flat summary CSV of every metric found, plus copies of the IIA heatmaps."""
    rows, inputs, outs = [], [], []
    mp = run.out / "behave" / "metrics.json"
    if mp.exists():
        inputs.append(mp)
        for rep in json.loads(mp.read_text()):
            for key in ("ts", "ps", "ms", "ds", "rho", "rho_ds"):
                rows.append(("behave", rep["space"], key, rep[key]))
    for setting in D.SETTINGS:
        gp = run.out / "das" / setting / "grid.csv"
        if not gp.exists():
            continue
        inputs.append(gp)
        cells = D.read_grid_csv(gp)
        for c in cells:
            rows.append(("das", setting, f"iia L{c.layer} {c.role}", c.iia))
        if any(c.iia is not None for c in cells):
            best = D.best_cell(cells)
            rows.append(("das", setting, "best", f"L{best.layer} {best.role}"))
        sp = run.path("report", f"iia_{setting}.svg")
        sp.write_text(D.render_svg(cells, f"IIA, {setting}"), encoding="utf-8")
        outs.append(sp)
    sdi = run.out / "das" / "sdi.json"
    if sdi.exists():
        inputs.append(sdi)
        rows.append(("das", "balanced", "sdi", json.loads(sdi.read_text())["sdi"]))
    if not rows:
        raise FileNotFoundError("nothing to report; run `behave run` or `das sweep` first")
    cp = run.path("report", "summary.csv")
    with open(cp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "scope", "metric", "value"])
        w.writerows((a, b, c, "" if v is None else (repr(v) if isinstance(v, float) else v)) for a, b, c, v in rows)
    run.record("report render", inputs, [cp] + outs)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _workers(cfg: dict) -> int:
    if cfg["workers"]:
        return cfg["workers"]
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    k, v = text.split("=", 1)
    return k.strip(), yaml.safe_load(v)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="propinherit", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="group", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--workers", type=int, help="worker processes (default: available cores)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. das.model=planted")
        return p

    for group, actions in (("world", ("gen", "load")), ("lm", ("train", "eval")), ("stimuli", ("gen",)),
                           ("behave", ("run",)), ("das", ("train", "sweep", "sdi")), ("report", ("render",))):
        g = sub.add_parser(group)
        gs = g.add_subparsers(dest="action", required=True)
        for a in actions:
            p = common(gs.add_parser(a))
            if group == "behave":
                p.add_argument("--endpoint", help="score remotely via this server instead of the toy model")
    common(sub.add_parser("pipeline", help="world gen, lm train+eval, stimuli, behave, das sweep, report"))
    return ap


def dispatch(group: str, action: str | None, run: Run, args) -> int:
    if group == "world":
        if action == "load" and run.cfg["world"]["source"] != "load":
            raise ConfigError("world.source", "'world load' needs world.source: load")
        return cmd_world(run, action)
    if group == "lm":
        return cmd_lm(run, action)
    if group == "stimuli":
        return cmd_stimuli(run)
    if group == "behave":
        return cmd_behave(run, getattr(args, "endpoint", None))
    if group == "das":
        return {"train": cmd_das_train, "sweep": cmd_das_sweep, "sdi": cmd_das_sdi}[action](run)
    if group == "report":
        return cmd_report(run)
    if run.cfg["das"]["model"] == "toy":
        source = "load" if run.cfg["world"]["source"] == "load" else "gen"
        steps = [("world", source), ("lm", "train"), ("lm", "eval"), ("stimuli", "gen"), ("behave", "run")]
    else:  # the planted model brings its own world and stimuli
        steps = []
    steps += [("das", "sweep"), ("report", "render")]
    code = EXIT_OK
    for g, a in steps:
        try:
            dispatch(g, a, run, args)
        except PartialFailure as exc:
            print(f"sweep finished with failed cells: {exc}", file=sys.stderr)
            code = EXIT_PARTIAL
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = dict(_parse_override(s) for s in args.set)
        for key in ("out", "seed", "workers"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(args.group, getattr(args, "action", None), Run(cfg), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartialFailure as exc:
        print(f"sweep finished with failed cells: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as exc:  # reported, not re-raised: the exit code carries it
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
