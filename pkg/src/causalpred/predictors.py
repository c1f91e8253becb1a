"""Correctness predictors: confidence, correctness probes, counterfactual simulation, value probes.

Every score is oriented so that higher means "more likely correct".
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

from .causal import SOURCE_INPUT, TEST_OUTPUT, ROUTES, Alignment, infer_value, intervened_logits
from .model import ResidualLocation, TransformerModel, _rows, get_vals, pad_batch
from .numerics import log_softmax_with_temperature
from .tasks import counterfactual_label
from .tasks.base import Example, Task

VARIANTS = (
    "confidence-first-n",
    "confidence-answer",
    "correctness-probe",
    "counterfactual-sim-first-n",
    "counterfactual-sim-output-map",
    "value-probe",
)

INVALID = object()


class PredictorError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorSpec:
    variant: str
    n: int = 1
    temperature: float = 1.0
    k: int = 16
    layer: int | None = None
    selector: str = "last"
    project: bool = True
    route: str = SOURCE_INPUT
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PredictorError(f"unknown predictor variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n < 1:
            raise PredictorError(f"n must be >= 1, got {self.n}")
        if not self.temperature > 0:
            raise PredictorError(f"temperature must be positive, got {self.temperature}")
        if self.k < 1:
            raise PredictorError(f"k must be >= 1, got {self.k}")
        if self.route not in ROUTES:
            raise PredictorError(f"unknown route {self.route!r}")

    @property
    def id(self) -> str:
        v = self.variant
        if v.startswith("confidence"):
            return f"{v}[T={self.temperature:g}]" + (f"[n={self.n}]" if v.endswith("first-n") and self.n != 1 else "")
        if v.startswith("counterfactual"):
            return f"{v}[k={self.k}]" + ("" if self.route == SOURCE_INPUT else f"[{self.route}]")
        if v == "value-probe":
            return f"{v}[{'projected' if self.project else 'raw'}]"
        return v


@dataclass
class Score:
    example_id: str
    predictor_id: str
    score: float
    label: int | None = None
    tag: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise PredictorError(f"non-finite score {self.score} for {self.example_id} ({self.predictor_id})")

    def to_record(self) -> dict:
        return {"example_id": self.example_id, "predictor_id": self.predictor_id, "score": self.score,
                "label": self.label, "tag": self.tag}


@dataclass
class OutputMapper:
    """Answer token id -> high-level output value; anything else maps to ``INVALID``."""

    table: dict[int, Any]

    @classmethod
    def for_task(cls, task: Task) -> "OutputMapper":
        return cls(dict(task.answer_token_ids))

    def __call__(self, token: int):
        return self.table.get(int(token), INVALID)


# ---------------------------------------------------------------------------
# confidence


def confidence_from_logits(step_logits: torch.Tensor, emitted: Sequence[int], temperature: float = 1.0,
                           positions: Sequence[int] | None = None) -> float:
    """Mean over ``positions`` of the log temperature-softmax probability of each emitted token."""
    step_logits = torch.as_tensor(step_logits)
    positions = list(range(len(emitted))) if positions is None else list(positions)
    if not positions:
        raise PredictorError("empty token set S")
    lp = log_softmax_with_temperature(step_logits, temperature)
    return float(sum(lp[t, int(emitted[t])] for t in positions) / len(positions))


@torch.no_grad()
def decode_with_logits(model: TransformerModel, seqs: Sequence[Sequence[int]], n: int, batch: int = 1024):
    """Greedy continuation of ``n`` tokens with the logits at every step: ``(tokens (N, n), logits (N, n, V))``."""
    toks, logs = [], []
    for i in range(0, len(seqs), batch):
        cur = [list(s) for s in seqs[i : i + batch]]
        steps_t, steps_l = [], []
        for _ in range(n):
            tokens, lengths = pad_batch(cur)
            lg = _rows(model(tokens), lengths - 1)
            nxt = lg.argmax(-1)
            steps_t.append(nxt)
            steps_l.append(lg)
            for j, t in enumerate(nxt.tolist()):
                cur[j].append(t)
        toks.append(torch.stack(steps_t, 1))
        logs.append(torch.stack(steps_l, 1))
    return torch.cat(toks), torch.cat(logs)


def answer_positions(task: Task, output_tokens: Sequence[int]) -> list[int]:
    """Positions of the answer codec inside the decoded output (single-token codec: position 0)."""
    return [0] if output_tokens else []


def confidence_scores(model: TransformerModel, task: Task, examples: Sequence[Example], spec: PredictorSpec) -> list[Score]:
    n = spec.n if spec.variant == "confidence-first-n" else 1
    toks, logits = decode_with_logits(model, [e.tokens for e in examples], n)
    out = []
    for e, t, lg in zip(examples, toks.tolist(), logits):
        pos = list(range(n)) if spec.variant == "confidence-first-n" else answer_positions(task, t)
        out.append(Score(e.uid, spec.id, confidence_from_logits(lg, t, spec.temperature, pos), e.label, e.tag))
    return out


# ---------------------------------------------------------------------------
# linear probes (shared solver)


def _fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, lam: float, tol: float, max_iter: int):
    """Minimize mean cross-entropy + lam/2 ||W||^2 by accelerated full-batch gradient descent.

    Binary problems (``n_classes == 1``) use the logistic form. Returns
    ``(W, b, converged, iterations)``.
    """
    n, d = x.shape
    xa = np.concatenate([x, np.ones((n, 1))], 1)
    k = n_classes
    target = y.reshape(-1, 1).astype(np.float64) if k == 1 else np.eye(k)[y]
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0  # bias is not penalized
    # Lipschitz constant of the gradient bounds the step size
    L = (0.25 if k == 1 else 0.5) * np.linalg.norm(xa, 2) ** 2 / n + lam
    step = 1.0 / L
    theta = np.zeros((d + 1, k))
    z, t = theta.copy(), 1.0

    def gradient(w):
        s = xa @ w
        if k == 1:
            p = 1.0 / (1.0 + np.exp(-s))
        else:
            s = s - s.max(1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(1, keepdims=True)
        return xa.T @ (p - target) / n + lam * reg * w

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = gradient(z)
        new = z - step * g
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        if np.sum((z - new) * (new - theta)) > 0:  # adaptive restart keeps the iteration monotone
            t_next, z_next = 1.0, new
        else:
            z_next = new + ((t - 1) / t_next) * (new - theta)
        theta, z, t = new, z_next, t_next
        if np.abs(gradient(theta)).max() < tol:
            converged = True
            break
    return theta[:-1].T.copy(), theta[-1].copy(), converged, it


@dataclass
class CorrectnessProbe:
    W: np.ndarray
    b: float
    converged: bool = True

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64).reshape(-1)
        self.b = float(self.b)


def fit_correctness_probe(features, labels, lam: float = 1e-3, tol: float = 1e-7, max_iter: int = 20000) -> CorrectnessProbe:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if x.ndim != 2 or len(x) != len(y):
        raise PredictorError(f"features {x.shape} and labels {y.shape} do not line up")
    if set(np.unique(y)) != {0, 1}:
        raise PredictorError(f"correctness probe needs both labels in training, got {sorted(set(y.tolist()))}")
    W, b, conv, _ = _fit_softmax_regression(x, y, 1, lam, tol, max_iter)
    return CorrectnessProbe(W[0], b[0], conv)


def probe_score(probe: CorrectnessProbe, feature) -> float:
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != probe.W.shape[0]:
        raise PredictorError(f"feature length {f.shape[-1]} != probe dimension {probe.W.shape[0]}")
    s = f @ probe.W + probe.b
    return 1.0 / (1.0 + np.exp(-s)) if np.ndim(s) else float(1.0 / (1.0 + math.exp(-s)))


@dataclass
class ValueProbe:
    classes: list
    W: np.ndarray  # (m, dim)
    b: np.ndarray  # (m,)
    q: np.ndarray | None = None  # projection applied to raw residuals before the linear map
    converged: bool = True

    def __post_init__(self):
        if len(self.classes) < 2:
            raise PredictorError("a value probe needs at least two classes")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    def features(self, resid) -> np.ndarray:
        r = np.asarray(resid, dtype=np.float64)
        return r @ self.q.T if self.q is not None else r

    def probabilities(self, feature) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)
        if f.shape[-1] != self.W.shape[1]:
            raise PredictorError(f"feature length {f.shape[-1]} != probe dimension {self.W.shape[1]}")
        s = f @ self.W.T + self.b
        s = s - s.max(-1, keepdims=True)
        p = np.exp(s)
        return p / p.sum(-1, keepdims=True)


def fit_value_probe_features(features, values, classes: Sequence, lam: float = 1e-3, tol: float = 1e-7,
                             max_iter: int = 20000, min_count: int = 1, q=None) -> ValueProbe:
    classes = list(classes)
    x = np.asarray(features, dtype=np.float64)
    counts = {c: 0 for c in classes}
    for v in values:
        if v not in counts:
            raise PredictorError(f"value {v!r} outside the class list {classes}")
        counts[v] += 1
    missing = [c for c, n in counts.items() if n < min_count]
    if missing:
        raise PredictorError(f"classes {missing} have fewer than {min_count} examples")
    y = np.array([classes.index(v) for v in values])
    W, b, conv, _ = _fit_softmax_regression(x, y, len(classes), lam, tol, max_iter)
    return ValueProbe(classes, W, b, None if q is None else np.asarray(q, dtype=np.float64), conv)


def fit_value_probe(model: TransformerModel, task: Task, alignment: Alignment, verified: Sequence[Example],
                    project: bool = True, lam: float = 1e-3, min_count: int = 1) -> ValueProbe:
    """Multinomial probe for the aligned variable's value on verified examples."""
    var = alignment.variable
    resid = get_vals(model, [e.prompt for e in verified], alignment.location).double().numpy()
    q = alignment.q().double().numpy() if project else None
    feats = resid @ q.T if project else resid
    values = [task.variable_value(e.prompt.assignment, var) for e in verified]
    return fit_value_probe_features(feats, values, task.hlm[var].domain, lam, min_count=min_count, q=q)


def value_probe_score(probe: ValueProbe, feature) -> float:
    return float(probe.probabilities(feature).max(-1))


# ---------------------------------------------------------------------------
# counterfactual simulation


def cf_target(task: Task, variable: str, base: Example, test: Example, route: str, test_output: Sequence[int]) -> int:
    """Answer token the high-level model predicts for ``base`` with ``variable`` set from ``test``.

    ``test-output`` reads the value off the model's answer on ``test``; when no
    value explains that answer the label is the model's own answer token.
    """
    if route == SOURCE_INPUT:
        v = task.variable_value(test.prompt.assignment, variable)
    else:
        out_val = task.decode_answer(test_output)
        cands = infer_value(task.hlm, test.prompt.assignment, variable, out_val) if out_val is not None else []
        if not cands:
            return int(test_output[0])
        v_in = task.variable_value(test.prompt.assignment, variable)
        v = v_in if v_in in cands else cands[0]
    return task.encode_answer(counterfactual_label(task.hlm, base.prompt.assignment, variable, v))


def draw_bases(verified: Sequence[Example], k: int, seed: int, uid: str) -> list[int]:
    if k > len(verified):
        raise PredictorError(f"k={k} exceeds the verified set size {len(verified)}")
    rng = np.random.default_rng([seed, zlib.crc32(uid.encode())])
    return rng.choice(len(verified), size=k, replace=False).tolist()


def counterfactual_sim(model: TransformerModel, task: Task, alignment: Alignment, tests: Sequence[Example],
                       verified: Sequence[Example], spec: PredictorSpec, mapper: OutputMapper | None = None,
                       bases: Sequence[Sequence[Example]] | None = None, batch: int = 1024) -> list[Score]:
    """Score each test example by interchanging its aligned subspace into ``k`` verified bases.

    first-n: mean log-probability the intervened runs assign to the
    counterfactual answer token. output-map: fraction of runs whose greedy
    answer maps to the counterfactual output value.
    """
    mode = spec.variant
    if mode not in ("counterfactual-sim-first-n", "counterfactual-sim-output-map"):
        raise PredictorError(f"{mode!r} is not a counterfactual-simulation variant")
    if mode.endswith("output-map") and mapper is None:
        raise PredictorError("output-map mode needs an output mapper")
    if not tests:
        return []
    outs, _ = decode_with_logits(model, [e.tokens for e in tests], 1)
    src_vals = get_vals(model, [e.prompt for e in tests], alignment.location)
    runs_base, runs_src, runs_tgt, owner = [], [], [], []
    for i, e in enumerate(tests):
        chosen = bases[i] if bases is not None else [verified[j] for j in draw_bases(verified, spec.k, spec.seed, e.uid)]
        for b in chosen:
            runs_base.append(b.prompt)
            runs_src.append(i)
            runs_tgt.append(cf_target(task, alignment.variable, b, e, spec.route, outs[i].tolist()))
            owner.append(i)
    q = alignment.q()
    per_run = []
    with torch.no_grad():
        for s in range(0, len(runs_base), batch):
            idx = torch.tensor(runs_src[s : s + batch])
            logits = intervened_logits(model, alignment, runs_base[s : s + batch], src_vals[idx], q)
            tgt = torch.tensor(runs_tgt[s : s + batch])
            if mode.endswith("first-n"):
                lp = log_softmax_with_temperature(logits, 1.0)
                per_run.extend(lp[torch.arange(len(tgt)), tgt].tolist())
            else:
                pred = logits.argmax(-1).tolist()
                per_run.extend(float(mapper(p) is not INVALID and mapper(p) == mapper(t)) for p, t in zip(pred, tgt.tolist()))
    sums = np.zeros(len(tests))
    cnt = np.zeros(len(tests))
    for o, v in zip(owner, per_run):
        sums[o] += v
        cnt[o] += 1
    return [Score(e.uid, spec.id, float(sums[i] / cnt[i]), e.label, e.tag) for i, e in enumerate(tests)]


# ---------------------------------------------------------------------------
# fitted predictor objects used by the experiment runner


@dataclass
class FittedPredictor:
    spec: PredictorSpec
    probe: CorrectnessProbe | ValueProbe | None = None
    location: ResidualLocation | None = None
    alignment: Alignment | None = None
    verified: list = field(default_factory=list)

    @property
    def id(self) -> str:
        return self.spec.id


def fit_predictor(spec: PredictorSpec, model: TransformerModel, task: Task, train: Sequence[Example],
                  verified: Sequence[Example], alignment: Alignment | None = None) -> FittedPredictor:
    """Fit whatever a variant needs: correctness probes on labeled ``train``, value probes on ``verified``."""
    v = spec.variant
    if v.startswith("confidence"):
        return FittedPredictor(spec)
    if v == "correctness-probe":
        loc = ResidualLocation(model.cfg.n_layers if spec.layer is None else spec.layer, spec.selector)
        feats = get_vals(model, [e.prompt for e in train], loc).double().numpy()
        return FittedPredictor(spec, fit_correctness_probe(feats, [e.label for e in train]), loc)
    if alignment is None:
        raise PredictorError(f"{v} needs an alignment")
    if v == "value-probe":
        return FittedPredictor(spec, fit_value_probe(model, task, alignment, verified, spec.project), alignment=alignment)
    return FittedPredictor(spec, alignment=alignment, verified=list(verified))


def score_examples(fp: FittedPredictor, model: TransformerModel, task: Task, examples: Sequence[Example]) -> list[Score]:
    v = fp.spec.variant
    if v.startswith("confidence"):
        return confidence_scores(model, task, examples, fp.spec)
    if v == "correctness-probe":
        feats = get_vals(model, [e.prompt for e in examples], fp.location).double().numpy()
        s = probe_score(fp.probe, feats)
        return [Score(e.uid, fp.id, float(x), e.label, e.tag) for e, x in zip(examples, np.atleast_1d(s))]
    if v == "value-probe":
        resid = get_vals(model, [e.prompt for e in examples], fp.alignment.location).double().numpy()
        p = fp.probe.probabilities(fp.probe.features(resid)).max(-1)
        return [Score(e.uid, fp.id, float(x), e.label, e.tag) for e, x in zip(examples, p)]
    return counterfactual_sim(model, task, fp.alignment, examples, fp.verified, fp.spec, OutputMapper.for_task(task))
