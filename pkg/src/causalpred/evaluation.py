"""AUC-ROC, rank correlation, the fold-averaged experiment runner and the IIA/AUC sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .causal import Alignment, CounterfactualPairSet, alignment_at, compute_iia
from .model import TransformerModel
from .predictors import PredictorSpec, Score, fit_predictor, score_examples, OutputMapper, counterfactual_sim
from .tasks.base import Example, Task, build_verified_set, generate_split


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise EvalError(f"{len(s)} scores but {len(y)} labels")
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise EvalError("labels must be 0/1")
    if y.sum() == 0 or y.sum() == len(y):
        raise EvalError("AUC needs both positive and negative examples")
    if not np.isfinite(s).all():
        raise EvalError("non-finite score")
    return s, y.astype(int)


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC from ranks; a tied positive/negative pair counts one half."""
    s, y = _check_binary(scores, labels)
    r = average_ranks(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pair_count(scores, labels) -> float:
    """Quadratic reference: count ordered (positive, negative) pairs directly."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


@dataclass
class CorrelationPoint:
    checkpoint_id: str
    iia: float
    auc: float

    def __post_init__(self):
        for name in ("iia", "auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"{name}={v} outside [0, 1]")


def spearman(points: Sequence[CorrelationPoint] | None = None, x=None, y=None) -> float:
    """Rank correlation with average ranks for ties (Pearson correlation of the ranks)."""
    if points is not None:
        x = [p.iia for p in points]
        y = [p.auc for p in points]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise EvalError("x and y differ in length")
    if len(x) < 3:
        raise EvalError(f"spearman needs at least 3 points, got {len(x)}")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if den == 0.0:
        raise EvalError("zero rank variance")
    return float((rx * ry).sum() / den)


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class EvalConfig:
    task: str
    predictors: list[PredictorSpec]
    tags: tuple[str, ...] = ()
    folds: int = 3
    n_train: int = 512
    n_test: int = 256
    n_verified: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.folds < 1:
            raise EvalError(f"folds must be >= 1, got {self.folds}")
        for name in ("n_train", "n_test"):
            v = getattr(self, name)
            if v < 2 or v % 2:
                raise EvalError(f"{name} must be a positive even number, got {v}")
        if not self.predictors:
            raise EvalError("empty predictor list")


@dataclass
class AUCReport:
    predictor_id: str
    tag: str
    aucs: list[float]
    mean: float = float("nan")
    std: float = float("nan")

    def __post_init__(self):
        for a in self.aucs:
            if not 0.0 <= a <= 1.0:
                raise EvalError(f"AUC {a} outside [0, 1]")
        if self.aucs:
            self.mean = float(np.mean(self.aucs))
            self.std = float(np.std(self.aucs))


@dataclass
class ExperimentResult:
    task: str
    reports: list[AUCReport]
    fold_rows: list[dict]
    scores: list[dict] = field(default_factory=list)
    accuracy: dict[str, float] = field(default_factory=dict)

    def report(self, predictor_id: str, tag: str) -> AUCReport:
        for r in self.reports:
            if r.predictor_id == predictor_id and r.tag == tag:
                return r
        raise KeyError((predictor_id, tag))

    def folds_csv(self) -> str:
        return _csv(["task", "predictor", "tag", "fold", "auc"], self.fold_rows)

    def aggregate_csv(self) -> str:
        rows = [{"task": self.task, "predictor": r.predictor_id, "tag": r.tag, "mean": r.mean, "std": r.std} for r in self.reports]
        return _csv(["task", "predictor", "tag", "mean", "std"], rows)

    def summary(self) -> str:
        """Plain-text table: one row per predictor, one ``mean+-std`` column per tag."""
        tags = list(dict.fromkeys(r.tag for r in self.reports))
        preds = list(dict.fromkeys(r.predictor_id for r in self.reports))
        width = max(len(p) for p in preds) + 2
        head = "predictor".ljust(width) + "".join(t[:24].rjust(26) for t in tags)
        lines = [f"task: {self.task}", head]
        for p in preds:
            cells = []
            for t in tags:
                r = self.report(p, t)
                cells.append(f"{r.mean:.3f}+-{r.std:.3f}".rjust(26))
            lines.append(p.ljust(width) + "".join(cells))
        if self.accuracy:
            lines.append("accuracy: " + ", ".join(f"{t}={a:.3f}" for t, a in self.accuracy.items()))
        return "\n".join(lines) + "\n"


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})
    return buf.getvalue()


def _split_seed(seed: int, fold: int, which: int) -> int:
    # fold -1 names the verified set, -2 the accuracy samples
    return int(np.random.SeedSequence([seed, fold + 2, which]).generate_state(1)[0])


def run_experiment(model: TransformerModel, task: Task, config: EvalConfig, alignment: Alignment | None = None,
                   verified: Sequence[Example] | None = None,
                   progress: Callable[[str], None] | None = None) -> ExperimentResult:
    """Per fold: balanced ID train/test and OOD test sets, fit predictors on ID, score every tag."""
    say = progress or (lambda s: None)
    tags = tuple(config.tags) or tuple(task.tags)
    if verified is None:
        verified = build_verified_set(task, model, config.n_verified, _split_seed(config.seed, -1, 0))
    excluded = {e.tokens for e in verified}
    fold_rows: list[dict] = []
    dumps: list[dict] = []
    per: dict[tuple[str, str], list[float]] = {}
    for fold in range(config.folds):
        say(f"fold {fold}: drawing balanced splits")
        train = generate_split(task, "ID", config.n_train, _split_seed(config.seed, fold, 1), model, balance=True, exclude=excluded)
        seen = excluded | {e.tokens for e in train}
        tests = {}
        for i, tag in enumerate(tags):
            tests[tag] = generate_split(task, tag, config.n_test, _split_seed(config.seed, fold, 2 + i), model,
                                        balance=True, exclude=seen)
        for spec in config.predictors:
            say(f"fold {fold}: {spec.id}")
            fitted = fit_predictor(spec, model, task, train, verified, alignment)
            for tag in tags:
                scores = score_examples(fitted, model, task, tests[tag])
                auc = auc_roc([s.score for s in scores], [s.label for s in scores])
                fold_rows.append({"task": task.name, "predictor": spec.id, "tag": tag, "fold": fold, "auc": auc})
                per.setdefault((spec.id, tag), []).append(auc)
                dumps.extend(dict(s.to_record(), fold=fold) for s in scores)
    reports = [AUCReport(p, t, a) for (p, t), a in per.items()]
    return ExperimentResult(task.name, reports, fold_rows, dumps)


def tag_accuracy(model: TransformerModel, task: Task, tags: Sequence[str], n: int = 2048, seed: int = 0) -> dict[str, float]:
    out = {}
    for i, tag in enumerate(tags):
        ex = generate_split(task, tag, n, _split_seed(seed, -2, i), model)
        out[tag] = float(np.mean([e.label for e in ex]))
    return out


# ---------------------------------------------------------------------------
# IIA versus AUC


@dataclass
class SweepResult:
    points: list[CorrelationPoint]
    spearman: float


def iia_auc_sweep(model: TransformerModel, task: Task, alignment: Alignment, checkpoints: Sequence[tuple[int, object]],
                  pairs: CounterfactualPairSet, tests: Sequence[Example], verified: Sequence[Example],
                  spec: PredictorSpec) -> SweepResult:
    """IIA and counterfactual-simulation AUC for each DAS checkpoint on a fixed balanced subset."""
    if len(checkpoints) < 3:
        raise EvalError(f"need at least 3 checkpoints, got {len(checkpoints)}")
    mapper = OutputMapper.for_task(task)
    points = []
    for step, params in checkpoints:
        a = alignment_at(alignment, params)
        iia = compute_iia(model, a, pairs, keep_records=False).fraction
        scores = counterfactual_sim(model, task, a, tests, verified, spec, mapper)
        auc = auc_roc([s.score for s in scores], [s.label for s in scores])
        points.append(CorrelationPoint(f"step{step}", iia, auc))
    return SweepResult(points, spearman(points))
