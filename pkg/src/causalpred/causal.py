"""Interchange interventions on subspaces, DAS training, IIA and localization search."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .model import (
    ActivationVector,
    ResidualLocation,
    TransformerModel,
    _rows,
    get_vals,
    pad_batch,
    patch_hook,
    resolve_positions,
)
from .numerics import NumericsError, OptimizerState, OrthonormalMap, grad, optimizer_step
from .tasks import counterfactual_label
from .tasks.base import Prompt, Task, TaskError

SOURCE_INPUT = "source-input"
TEST_OUTPUT = "test-output"
ROUTES = (SOURCE_INPUT, TEST_OUTPUT)


class CausalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# alignments and the interchange itself


@dataclass
class Alignment:
    """Binding of a high-level variable to a subspace at one residual location."""

    variable: str
    location: ResidualLocation
    map: OrthonormalMap
    task: str = ""
    seed: int = 0

    @property
    def d_sub(self) -> int:
        return self.map.d_sub

    def q(self) -> torch.Tensor:
        return self.map.realize().detach()

    @property
    def id(self) -> str:
        return f"{self.task}/{self.variable}@{self.location}/d{self.d_sub}/s{self.seed}"

    def manifest(self) -> dict:
        return {
            "task": self.task,
            "variable": self.variable,
            "layer": self.location.layer,
            "selector": self.location.selector,
            "d_sub": self.d_sub,
            "d_model": self.map.d,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m: dict, params: torch.Tensor) -> "Alignment":
        omap = OrthonormalMap(int(m["d_sub"]), int(m["d_model"]), params.to(torch.float32))
        return cls(m["variable"], ResidualLocation(int(m["layer"]), m["selector"]), omap, m.get("task", ""), int(m.get("seed", 0)))

    @classmethod
    def from_basis(cls, variable: str, location: ResidualLocation, basis, task: str = "") -> "Alignment":
        return cls(variable, location, OrthonormalMap.from_basis(basis), task)


def _values(x) -> torch.Tensor:
    return x.values if isinstance(x, ActivationVector) else torch.as_tensor(x)


def distributed_interchange(r_base, r_src, q):
    """``(I - Q^T Q) r_base + Q^T Q r_src``; works on single vectors or batches."""
    b, s = _values(r_base), _values(r_src)
    q = torch.as_tensor(q)
    if b.shape[-1] != s.shape[-1]:
        raise CausalError(f"length mismatch: base {b.shape[-1]} vs source {s.shape[-1]}")
    if q.dim() != 2 or (q.shape[0] and q.shape[1] != b.shape[-1]):
        raise CausalError(f"Q of shape {tuple(q.shape)} does not act on vectors of length {b.shape[-1]}")
    if q.shape[0] == 0:
        out = b.clone()
    else:
        q = q.to(b.dtype)
        out = b + ((s - b) @ q.t()) @ q
    if isinstance(r_base, ActivationVector):
        return ActivationVector(out, r_base.location, r_base.source)
    return out


def intervened_logits(model: TransformerModel, alignment: Alignment, base: Sequence[Prompt], src_values: torch.Tensor,
                      q: torch.Tensor | None = None) -> torch.Tensor:
    """Last-position logits of ``base`` prompts with the aligned subspace taken from ``src_values``.

    Differentiable in ``q`` (defaults to the alignment's realized map).
    """
    loc = alignment.location
    loc.check(model)
    q = alignment.map.realize() if q is None else q
    pos = resolve_positions(loc, base)
    tokens, lengths = pad_batch([p.tokens for p in base])
    hook = patch_hook(pos, lambda r: distributed_interchange(r, src_values, q))
    logits = model.run(tokens, {loc.layer: hook})[0]
    return _rows(logits, lengths - 1)


def intervened_forward(model: TransformerModel, alignment: Alignment, x_base: Prompt, x_src: Prompt) -> torch.Tensor:
    """Logits ``(seq, vocab)`` of ``x_base`` with the aligned subspace swapped in from ``x_src``."""
    loc = alignment.location
    loc.check(model)
    src = get_vals(model, [x_src], loc)
    pos = resolve_positions(loc, [x_base])
    q = alignment.q()
    with torch.no_grad():
        hook = patch_hook(pos, lambda r: distributed_interchange(r, src, q))
        return model.run(torch.tensor([x_base.tokens]), {loc.layer: hook})[0][0]


# ---------------------------------------------------------------------------
# counterfactual pairs


def infer_value(hlm, assignment, variable: str, output_value) -> list:
    """Values of ``variable`` under which ``hlm`` reproduces ``output_value`` on ``assignment``."""
    return [v for v in hlm[variable].domain if hlm.run(assignment, {variable: v}) == output_value]


def source_value(task: Task, variable: str, prompt: Prompt, route: str = SOURCE_INPUT, output_value=None):
    """The value ``v`` carried by ``prompt`` for ``variable`` under the chosen inference route.

    ``source-input`` evaluates the high-level model on the prompt's inputs.
    ``test-output`` picks the value consistent with the model's decoded output
    (``output_value``); ties prefer the source-input value, and when no value
    is consistent the source-input value is used.
    """
    if route not in ROUTES:
        raise CausalError(f"unknown inference route {route!r}; expected one of {ROUTES}")
    v_in = task.variable_value(prompt.assignment, variable)
    if route == SOURCE_INPUT:
        return v_in
    cands = infer_value(task.hlm, prompt.assignment, variable, output_value)
    if not cands or v_in in cands:
        return v_in
    return cands[0]


@dataclass
class CounterfactualPair:
    base: Prompt
    src: Prompt
    y_cf: Any
    target: int  # answer token id of y_cf


@dataclass
class CounterfactualPairSet:
    pairs: list[CounterfactualPair]
    task: str
    variable: str
    seed: int
    route: str = SOURCE_INPUT

    def __len__(self) -> int:
        return len(self.pairs)

    def split(self, val_fraction: float) -> tuple["CounterfactualPairSet", "CounterfactualPairSet"]:
        n_val = int(round(len(self.pairs) * val_fraction))
        if not 0 < n_val < len(self.pairs):
            raise CausalError(f"validation fraction {val_fraction} leaves an empty split of {len(self.pairs)} pairs")
        mk = lambda ps: CounterfactualPairSet(ps, self.task, self.variable, self.seed, self.route)
        return mk(self.pairs[n_val:]), mk(self.pairs[:n_val])

    def provenance(self) -> dict:
        return {"task": self.task, "variable": self.variable, "seed": self.seed, "route": self.route, "n": len(self)}


def make_pair(task: Task, variable: str, base: Prompt, src: Prompt, route: str = SOURCE_INPUT, src_output=None) -> CounterfactualPair:
    v = source_value(task, variable, src, route, src_output)
    y = counterfactual_label(task.hlm, base.assignment, variable, v)
    return CounterfactualPair(base, src, y, task.encode_answer(y))


def sample_pairs(task: Task, variable: str, pool: Sequence, n: int, seed: int = 0, route: str = SOURCE_INPUT) -> CounterfactualPairSet:
    """``n`` (base, source) pairs drawn uniformly from ``pool x pool``.

    ``pool`` holds correctly answered examples (or prompts); for those both
    inference routes agree.
    """
    if variable not in task.hlm:
        raise CausalError(f"variable {variable!r} not in the {task.name} high-level model")
    if not pool:
        raise CausalError("empty example pool")
    if n < 1:
        raise CausalError(f"need at least one pair, got {n}")
    prompts = [getattr(x, "prompt", x) for x in pool]
    outputs = [getattr(x, "expected", None) for x in pool]
    rng = np.random.default_rng([seed, 31])
    idx = rng.integers(len(prompts), size=(n, 2))
    pairs = [make_pair(task, variable, prompts[i], prompts[j], route, outputs[j]) for i, j in idx]
    return CounterfactualPairSet(pairs, task.name, variable, seed, route)


def exhaustive_pairs(task: Task, variable: str, prompts: Sequence[Prompt], route: str = SOURCE_INPUT) -> CounterfactualPairSet:
    pairs = [make_pair(task, variable, b, s, route) for b in prompts for s in prompts]
    return CounterfactualPairSet(pairs, task.name, variable, -1, route)


# ---------------------------------------------------------------------------
# IIA


@dataclass
class IIAReport:
    alignment_id: str
    n_pairs: int
    fraction: float
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _src_values(model, alignment, pairs: Sequence[CounterfactualPair], batch: int) -> torch.Tensor:
    return get_vals(model, [p.src for p in pairs], alignment.location, batch)


def compute_iia(model: TransformerModel, alignment: Alignment, pairs: CounterfactualPairSet, batch: int = 512,
                keep_records: bool = True) -> IIAReport:
    """Fraction of pairs whose intervened greedy answer token equals the counterfactual label's token."""
    if len(pairs) == 0:
        raise CausalError("empty pair set")
    q = alignment.q()
    hits = 0
    records = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch):
            chunk = pairs.pairs[i : i + batch]
            src = _src_values(model, alignment, chunk, batch)
            pred = intervened_logits(model, alignment, [p.base for p in chunk], src, q).argmax(-1).tolist()
            for p, t in zip(chunk, pred):
                ok = int(t == p.target)
                hits += ok
                if keep_records:
                    records.append({"base": p.base.uid, "src": p.src.uid, "target": p.target, "predicted": t, "match": ok})
    return IIAReport(alignment.id, len(pairs), hits / len(pairs), records)


def baseline_agreement(model: TransformerModel, pairs: CounterfactualPairSet, batch: int = 512) -> float:
    """IIA of an intervention with no effect: how often the base output already equals ``y_cf``."""
    from .model import greedy_decode

    outs = greedy_decode(model, [p.base.tokens for p in pairs.pairs], 1, batch)
    return float(np.mean([o[0] == p.target for o, p in zip(outs, pairs.pairs)]))


# ---------------------------------------------------------------------------
# DAS


@dataclass
class DASConfig:
    steps: int = 300
    batch: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    init_scale: float = 1.0
    checkpoint_every: int = 0


@dataclass
class DASLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    checkpoints: list[tuple[int, torch.Tensor]] = field(default_factory=list)


def train_das(model: TransformerModel, task: Task | str, variable: str, location: ResidualLocation, d_sub: int,
              pairs: CounterfactualPairSet, config: DASConfig | None = None) -> tuple[Alignment, DASLog]:
    """Fit an orthonormal map so subspace interchanges reproduce the counterfactual labels.

    Only the map's parameters are optimized; the model's weights are hashed
    before and after and must be unchanged.
    """
    cfg = config or DASConfig()
    if len(pairs) == 0:
        raise CausalError("empty pair set")
    location.check(model)
    d = model.cfg.d_model
    task_name = task if isinstance(task, str) else task.name
    before = model.weights_hash()
    omap = OrthonormalMap.random(d_sub, d, seed=cfg.seed, scale=cfg.init_scale).requires_grad_()
    align = Alignment(variable, location, omap, task_name, cfg.seed)
    log = DASLog()
    if cfg.checkpoint_every:
        log.checkpoints.append((0, omap.params.detach().clone()))
    if d_sub == 0:
        return align, log
    src_all = _src_values(model, align, pairs.pairs, 1024)
    targets = torch.tensor([p.target for p in pairs.pairs])
    state = OptimizerState.for_params([omap.params], lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 53])
    for p in model.parameters():
        p.requires_grad_(False)
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(cfg.batch, len(pairs)), replace=False)
        base = [pairs.pairs[i].base for i in idx]
        logits = intervened_logits(model, align, base, src_all[idx], omap.realize())
        loss = F.cross_entropy(logits, targets[idx])
        lv = loss.item()
        if not math.isfinite(lv):
            raise NumericsError(f"non-finite DAS loss {lv} at step {step} ({variable}@{location}, d_sub={d_sub})")
        g = grad(loss, [omap.params])
        with torch.no_grad():
            optimizer_step(state, [omap.params], [g[omap.params]])
        log.steps.append(step + 1)
        log.losses.append(lv)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            log.checkpoints.append((step + 1, omap.params.detach().clone()))
    omap.params.requires_grad_(False)
    if model.weights_hash() != before:
        raise CausalError("model weights changed during DAS training")
    return align, log


def alignment_at(align: Alignment, params: torch.Tensor) -> Alignment:
    """Copy of ``align`` with other (checkpointed) parameters."""
    return Alignment(align.variable, align.location, OrthonormalMap(align.map.d_sub, align.map.d, params.clone()),
                     align.task, align.seed)


# ---------------------------------------------------------------------------
# localization search


@dataclass
class LocalizationConfig:
    layers: tuple[int, ...] = (1, 2)
    selectors: tuple[str, ...] = ("last",)
    d_subs: tuple[int, ...] = (1, 2, 4)
    steps: int = 300
    batch: int = 64
    lr: float = 1e-2
    seed: int = 0
    n_pairs: int = 2000
    val_fraction: float = 0.1
    route: str = SOURCE_INPUT
    allow_non_power_of_two: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.layers or not self.selectors or not self.d_subs:
            raise CausalError("localization grids must be nonempty")
        if not self.allow_non_power_of_two:
            bad = [k for k in self.d_subs if k < 1 or k & (k - 1)]
            if bad:
                raise CausalError(f"d_sub grid values must be powers of 2, got {bad}")
        for s in self.selectors:
            ResidualLocation(0, s)

    def das(self) -> DASConfig:
        return DASConfig(steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed, checkpoint_every=self.checkpoint_every)


@dataclass
class GridRow:
    layer: int
    selector: str
    d_sub: int
    train_iia: float
    val_iia: float
    final_loss: float
    diverged: bool = False


def search_localization(model: TransformerModel, task: Task, variable: str, config: LocalizationConfig,
                        pool: Sequence, pairs: CounterfactualPairSet | None = None,
                        progress=None) -> tuple[Alignment, list[GridRow], DASLog]:
    """Train DAS in every (layer, selector, d_sub) cell and keep the best on validation pairs.

    Returns the winning alignment, one row per cell and the winner's DAS log.

    Ties on validation IIA go to the smaller ``d_sub``, then the lower layer,
    then the earlier selector in the grid.
    """
    pairs = pairs or sample_pairs(task, variable, pool, config.n_pairs, config.seed, config.route)
    train, val = pairs.split(config.val_fraction)
    rows: list[GridRow] = []
    best: tuple | None = None
    best_align, best_log = None, None
    say = progress or (lambda s: None)
    for si, sel in enumerate(config.selectors):
        for layer in config.layers:
            loc = ResidualLocation(layer, sel)
            for k in config.d_subs:
                try:
                    align, log = train_das(model, task, variable, loc, k, train, config.das())
                except NumericsError:
                    rows.append(GridRow(layer, sel, k, float("nan"), float("nan"), float("nan"), True))
                    continue
                tr = compute_iia(model, align, train, keep_records=False).fraction
                va = compute_iia(model, align, val, keep_records=False).fraction
                rows.append(GridRow(layer, sel, k, tr, va, log.losses[-1] if log.losses else float("nan")))
                say(f"{loc} d_sub={k}: train IIA {tr:.3f}, val IIA {va:.3f}")
                key = (-va, k, layer, si)
                if best is None or key < best:
                    best, best_align, best_log = key, align, log
    if best_align is None:
        raise CausalError("every localization cell diverged")
    return best_align, rows, best_log
