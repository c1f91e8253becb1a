"""Command-line front end: train, plant, localize, predict, eval, sweep, report.

Every command is a pure function of its config, its seed and the store
contents; outputs are content-addressed artifacts, so a rerun lands on the
same ids. Exit codes: 0 ok, 2 configuration error, 3 missing or corrupt
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from typing import Sequence

import numpy as np
import torch

from . import plotting
from .causal import (
    CausalError,
    LocalizationConfig,
    sample_pairs,
    search_localization,
)
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalConfig, EvalError, CorrelationPoint, iia_auc_sweep, run_experiment, spearman, tag_accuracy
from .model import ModelError, TrainingDiverged, TransformerConfig, train_task_model
from .numerics import NumericsError
from .planted import planted_chain, planted_interval
from .predictors import PredictorError, PredictorSpec, fit_predictor, score_examples
from .store import (
    ArtifactStore,
    StoreError,
    files_to_tensors,
    load_alignment,
    load_model,
    save_alignment,
    save_model,
    tensors_to_files,
)
from .tasks import HLMError, TaskError, get_task
from .tasks.base import build_verified_set, dumps_dataset, generate_split

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("train", "plant", "localize", "predict", "eval", "sweep", "report")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"missing required setting {what}")
    return value


def _with_options(fn, options: dict, what: str, *args):
    try:
        return fn(*args, **options)
    except TypeError as e:
        raise ConfigError(f"bad {what} options {sorted(options)}: {e}") from None


def _task_from_manifest(manifest: dict):
    t = manifest.get("task")
    if not t:
        raise ConfigError("model artifact does not record its task")
    return _with_options(get_task, t.get("options", {}), "task", t["name"])


def _load_model(store: ArtifactStore, ref: str):
    model, manifest = load_model(store, _require(ref, "model"))
    return model, _task_from_manifest(manifest), store.resolve(ref)


def _specs(blocks: Sequence[dict], seed: int) -> list[PredictorSpec]:
    return [PredictorSpec(**{**b, "seed": seed}) for b in blocks]


def _csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})
    return buf.getvalue()


def _jsonl(records: Sequence[dict]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode()


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, store: ArtifactStore) -> str:
    task = _with_options(get_task, cfg.task.options, "task", cfg.task.name)
    m = cfg.model
    mcfg = TransformerConfig(vocab_size=len(task.vocab), n_layers=m.n_layers, n_heads=m.n_heads, d_model=m.d_model,
                             d_ff=m.d_ff, max_seq_len=max(m.max_seq_len, task.max_seq_len))
    t = cfg.train
    model, log = train_task_model(mcfg, task, t.steps, batch=t.batch, seed=cfg.seed, lr=t.lr, weight_decay=t.weight_decay,
                                  eval_size=t.eval_size, progress=lambda s, l: _say(f"step {s}: loss {l:.4f}"))
    extra = {"task": asdict(cfg.task), "train": asdict(t), "seed": cfg.seed, "log": log.to_dict()}
    aid = save_model(store, model, extra)
    for tag, acc in log.tag_accuracy.items():
        print(f"accuracy {tag}: {acc:.4f}")
    return aid


def cmd_plant(cfg: RunConfig, store: ArtifactStore) -> str:
    kind = cfg.plant.kind
    opts = dict(cfg.plant.options)
    if kind == "chain":
        task = get_task("chain")
        planted = _with_options(planted_chain, opts, "plant", task)
    elif kind == "interval":
        task = get_task("interval")
        planted = _with_options(planted_interval, opts, "plant", task)
    else:
        raise ConfigError(f"plant.kind must be 'chain' or 'interval', got {kind!r}")
    bases = {f"{v}.basis": e.basis for v, e in planted.encoding.items()}
    codebooks = {f"{v}.codebook": e.codebook for v, e in planted.encoding.items()}
    enc_entries, enc_files = tensors_to_files({**bases, **codebooks}, "e")
    layout = {v: {"layer": e.location.layer, "selector": e.location.selector, "d_sub": e.d_sub}
              for v, e in planted.encoding.items()}
    extra = {"task": {"name": task.name, "options": {}}, "planted": {"kind": kind, "options": opts, "layout": layout},
             "encoding": enc_entries}
    aid = save_model(store, planted.model, extra, enc_files)
    for v, loc in layout.items():
        print(f"planted {v}: layer {loc['layer']} @ {loc['selector']}, d_sub {loc['d_sub']}")
    return aid


def cmd_localize(cfg: RunConfig, store: ArtifactStore) -> str:
    b = cfg.localize
    model, task, model_id = _load_model(store, b.model)
    variable = b.variable or (task.causal_variables[0] if task.causal_variables else "")
    _require(variable, "localize.variable")
    lcfg = LocalizationConfig(layers=tuple(b.layers), selectors=tuple(b.selectors), d_subs=tuple(b.d_subs), steps=b.steps,
                              batch=b.batch, lr=b.lr, seed=cfg.seed, n_pairs=b.n_pairs, val_fraction=b.val_fraction,
                              route=b.route, checkpoint_every=b.checkpoint_every)
    verified = build_verified_set(task, model, b.n_verified, _seed(cfg.seed, 1))
    pairs = sample_pairs(task, variable, list(verified), b.n_pairs, _seed(cfg.seed, 2), b.route)
    align, rows, log = search_localization(model, task, variable, lcfg, list(verified), pairs, progress=_say)
    grid = [asdict(r) for r in rows]
    ck_entries, ck_files = tensors_to_files({f"step{s}": p for s, p in log.checkpoints}, "c")
    extra = {
        "model": model_id,
        "grid": grid,
        "pairs": pairs.provenance(),
        "verified": {"n": b.n_verified, "seed": _seed(cfg.seed, 1)},
        "das": {"steps": log.steps, "losses": log.losses},
        "checkpoints": [dict(e, step=s) for e, (s, _) in zip(ck_entries, log.checkpoints)],
    }
    grid_csv = _csv(["layer", "selector", "d_sub", "train_iia", "val_iia", "final_loss", "diverged"], grid)
    aid = save_alignment(store, align, extra, {**ck_files, "grid.csv": grid_csv.encode()})
    sys.stdout.write(grid_csv)
    print(f"winner: {align.location} d_sub={align.d_sub}")
    return aid


def _alignment(store: ArtifactStore, ref: str):
    if not ref:
        return None, None, None
    return load_alignment(store, ref)


def cmd_predict(cfg: RunConfig, store: ArtifactStore) -> str:
    b = cfg.predict
    model, task, model_id = _load_model(store, b.model)
    align, _, _ = _alignment(store, b.alignment)
    specs = _specs(b.predictors, cfg.seed)
    if not specs:
        raise EvalError("empty predictor list")
    verified = build_verified_set(task, model, b.n_verified, _seed(cfg.seed, 1))
    excluded = verified.prompt_keys()
    train = generate_split(task, "ID", b.n_train, _seed(cfg.seed, 3), model, balance=True, exclude=excluded)
    examples = generate_split(task, b.tag, b.n, _seed(cfg.seed, 4), model,
                              exclude=excluded | {e.tokens for e in train})
    records = []
    for spec in specs:
        fitted = fit_predictor(spec, model, task, train, list(verified), align)
        scores = score_examples(fitted, model, task, examples)
        records.extend(s.to_record() for s in scores)
        print(f"{spec.id}: mean score {np.mean([s.score for s in scores]):.4f} over {len(scores)} examples")
    manifest = {"model": model_id, "alignment": store.resolve(b.alignment) if b.alignment else "", "tag": b.tag,
                "predictors": [asdict(s) for s in specs], "seed": cfg.seed}
    return store.put("scores", manifest, {"scores.jsonl": _jsonl(records),
                                          "examples.jsonl": dumps_dataset(examples).encode()})


def cmd_eval(cfg: RunConfig, store: ArtifactStore) -> str:
    b = cfg.eval
    model, task, model_id = _load_model(store, b.model)
    align, _, _ = _alignment(store, b.alignment)
    ecfg = EvalConfig(task.name, _specs(b.predictors, cfg.seed), tuple(b.tags), b.folds, b.n_train, b.n_test,
                      b.n_verified, cfg.seed)
    result = run_experiment(model, task, ecfg, align, progress=_say)
    result.accuracy = tag_accuracy(model, task, ecfg.tags or task.tags, seed=cfg.seed)
    manifest = {"model": model_id, "alignment": store.resolve(b.alignment) if b.alignment else "",
                "config": asdict(b), "seed": cfg.seed, "accuracy": result.accuracy,
                "aggregate": [asdict(r) for r in result.reports]}
    summary = result.summary()
    sys.stdout.write(summary)
    return store.put("eval", manifest, {
        "folds.csv": result.folds_csv().encode(),
        "aggregate.csv": result.aggregate_csv().encode(),
        "summary.txt": summary.encode(),
        "scores.jsonl": _jsonl(result.scores),
    })


def cmd_sweep(cfg: RunConfig, store: ArtifactStore) -> str:
    b = cfg.sweep
    align, amanifest, afiles = load_alignment(store, _require(b.alignment, "sweep.alignment"))
    model, task, model_id = _load_model(store, b.model or amanifest["model"])
    entries = amanifest.get("checkpoints", [])
    tensors = files_to_tensors(entries, afiles)
    checkpoints = [(e["step"], tensors[e["name"]]) for e in entries]
    verified = build_verified_set(task, model, b.n_verified, _seed(cfg.seed, 1))
    excluded = verified.prompt_keys()
    pairs = sample_pairs(task, align.variable, list(verified), b.n_pairs, _seed(cfg.seed, 5), b.route)
    tests = []
    for i, tag in enumerate(b.tags or task.tags):
        tests += generate_split(task, tag, b.n_test, _seed(cfg.seed, 6, i), model, balance=True, exclude=excluded)
    spec = PredictorSpec("counterfactual-sim-output-map", k=b.k, route=b.route, seed=cfg.seed)
    result = iia_auc_sweep(model, task, align, checkpoints, pairs, tests, list(verified), spec)
    rows = [asdict(p) for p in result.points]
    points_csv = _csv(["checkpoint_id", "iia", "auc"], rows)
    sys.stdout.write(points_csv)
    print(f"spearman: {result.spearman:.4f}")
    manifest = {"model": model_id, "alignment": store.resolve(b.alignment), "config": asdict(b), "seed": cfg.seed,
                "points": rows, "spearman": result.spearman}
    return store.put("sweep", manifest, {"points.csv": points_csv.encode()})


def cmd_report(cfg: RunConfig, store: ArtifactStore) -> str:
    """Collect tables from eval/sweep/localize artifacts and render their figures as PNG files."""
    b = cfg.report
    if not (b.eval or b.sweep or b.localize):
        raise ConfigError("report needs at least one of report.eval, report.sweep, report.localize")
    files: dict[str, bytes] = {}
    sources = {}
    if b.eval:
        m, f = store.get(b.eval, "eval")
        sources["eval"] = store.resolve(b.eval)
        from .evaluation import AUCReport

        reports = [AUCReport(r["predictor_id"], r["tag"], r["aucs"]) for r in m["aggregate"]]
        files.update({k: f[k] for k in ("aggregate.csv", "folds.csv", "summary.txt")})
        files["auc.png"] = plotting.auc_bars(reports)
        sys.stdout.write(f["aggregate.csv"].decode())
    if b.sweep:
        m, f = store.get(b.sweep, "sweep")
        sources["sweep"] = store.resolve(b.sweep)
        points = [CorrelationPoint(**p) for p in m["points"]]
        files["points.csv"] = f["points.csv"]
        files["iia_auc.png"] = plotting.iia_vs_auc(points, spearman(points))
        sys.stdout.write(f["points.csv"].decode())
    if b.localize:
        m, f = store.get(b.localize, "alignment")
        sources["localize"] = store.resolve(b.localize)
        files["grid.csv"] = f["grid.csv"]
        files["das_loss.png"] = plotting.loss_curve(m["das"]["steps"], m["das"]["losses"])
        sys.stdout.write(f["grid.csv"].decode())
    aid = store.put("report", {"sources": sources}, files)
    out = store.root / "reports" / aid
    out.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (out / name).write_bytes(data)
    print(f"report files: {out}")
    return aid


HANDLERS = {
    "train": cmd_train,
    "plant": cmd_plant,
    "localize": cmd_localize,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalpred", description="Correctness prediction from causal representations.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--store", metavar="PATH", help="artifact store root (the CAUSALPRED_STORE variable wins)")
    p.add_argument("--seed", type=int, metavar="N", help="overrides the config seed")
    p.add_argument("--tag", metavar="NAME", help="alias name given to the produced artifact")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        store = ArtifactStore.resolve_root(args.store or cfg.store or None)
        aid = HANDLERS[args.command](cfg, store)
        if args.tag:
            store.tag(args.tag, aid)
        print(f"artifact: {aid}")
        return EXIT_OK
    except (ConfigError, TaskError, PredictorError, CausalError, EvalError, ModelError, HLMError) as e:
        _say(f"error: {e}")
        return EXIT_CONFIG
    except StoreError as e:
        _say(f"error: {e}")
        return EXIT_MISSING
    except (NumericsError, TrainingDiverged) as e:
        _say(f"numerical failure: {e}")
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
