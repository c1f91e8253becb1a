"""Hand-constructed transformers that implement a high-level model exactly.

Layout of the residual stream (every direction is orthogonal to the all-ones
vector, so LayerNorm only rescales):

* a large constant ``anchor`` on every position, which makes the LayerNorm
  gain nearly input independent and supplies constants to later layers;
* token codes for input variables, given by the caller's encoding;
* position codes for positions that hold encoded variables;
* per variable: its own subspace (caller supplied) plus a presence flag;
* per (variable, parent at another position): a slot subspace that a copy
  head fills with the parent's code, plus a flag.

A variable planted at layer ``l`` is computed by block ``l - 1``: copy heads
bring parent codes to the variable's position, then one pair of MLP neurons
per row of the mechanism table fires when every parent matches that row and
writes the row's output code. Everything read through a LayerNorm is an
exact positive multiple of the intended linear functional, so decisions are
exact; only copied codes carry a relative error of order
``(content norm / anchor)^2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch

from .model import ModelError, ResidualLocation, TransformerConfig, TransformerModel


class PlantingError(ModelError):
    pass


@dataclass(frozen=True)
class VariableEncoding:
    """Where and how a variable lives: ``r[location] @ basis.T == codebook[value]``."""

    location: ResidualLocation
    basis: torch.Tensor  # (d_sub, d_model), orthonormal rows
    codebook: torch.Tensor  # (|domain|, d_sub)

    @property
    def d_sub(self) -> int:
        return self.basis.shape[0]

    def decode(self, resid: torch.Tensor) -> int:
        """Index of the codebook vector nearest to the projection of ``resid``."""
        c = resid.to(torch.float64) @ self.basis.t()
        return int(((self.codebook - c) ** 2).sum(-1).argmin())


# ---------------------------------------------------------------------------
# encodings


def default_codebook(m: int, d_sub: int) -> torch.Tensor:
    """One-hot codes when ``d_sub >= m``; a unit regular simplex when ``d_sub == m - 1``."""
    if m < 1:
        raise PlantingError("empty domain")
    if d_sub >= m:
        return torch.eye(m, d_sub, dtype=torch.float64)
    if d_sub == m - 1:
        centered = torch.eye(m, dtype=torch.float64) - 1.0 / m
        _, _, vh = torch.linalg.svd(centered)
        coords = centered @ vh[: m - 1].t()
        return coords / coords[0].norm()
    raise PlantingError(f"{m} values need at least {m - 1} dimensions, got {d_sub}")


def _mean_free_frame(d: int, exclude: torch.Tensor | None, seed: int) -> torch.Tensor:
    """Random orthonormal rows spanning the complement of ``ones`` and ``exclude``."""
    ones = torch.ones(1, d, dtype=torch.float64) / math.sqrt(d)
    taken = ones if exclude is None or exclude.numel() == 0 else torch.cat([ones, exclude])
    _, s, vh = torch.linalg.svd(taken)
    rank = int((s > 1e-9).sum())
    comp = vh[rank:]
    gen = torch.Generator().manual_seed(seed)
    rot, _ = torch.linalg.qr(torch.randn(comp.shape[0], comp.shape[0], generator=gen, dtype=torch.float64))
    return rot.t() @ comp


def plan_encoding(
    hlm,
    placements: Mapping[str, tuple[ResidualLocation, int]],
    d_model: int,
    seed: int = 0,
    shared: Sequence[Sequence[str]] = (),
) -> dict[str, VariableEncoding]:
    """Random mutually orthogonal subspaces with default codebooks.

    Variables listed together in ``shared`` (inputs rendered with the same
    tokens, such as three prices) get one common basis and codebook.
    """
    group_of = {}
    for g in shared:
        for v in g:
            group_of[v] = tuple(g)
    need = 0
    seen = set()
    for name, (_, k) in placements.items():
        key = group_of.get(name, (name,))
        if key not in seen:
            seen.add(key)
            need += k
    if need > d_model - 1:
        raise PlantingError(f"placements need {need} dimensions, only {d_model - 1} available")
    frame = _mean_free_frame(d_model, None, seed)
    out: dict[str, VariableEncoding] = {}
    made: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}
    cursor = 0
    for name, (loc, k) in placements.items():
        key = group_of.get(name, (name,))
        if key not in made:
            m = len(hlm[name].domain)
            made[key] = (frame[cursor : cursor + k].clone(), default_codebook(m, k))
            cursor += k
        basis, book = made[key]
        if book.shape[0] != len(hlm[name].domain):
            raise PlantingError(f"shared variables {key} have different domain sizes")
        out[name] = VariableEncoding(loc, basis, book)
    return out


# ---------------------------------------------------------------------------
# validation


def _check_encoding(hlm, encoding: Mapping[str, VariableEncoding]) -> int:
    d = None
    for name, enc in encoding.items():
        if name not in hlm:
            raise PlantingError(f"encoded variable {name!r} not in the high-level model")
        b = torch.as_tensor(enc.basis, dtype=torch.float64)
        if b.dim() != 2 or b.shape[0] < 1:
            raise PlantingError(f"basis of {name!r} must be a non-empty (d_sub, d_model) matrix")
        if d is None:
            d = b.shape[1]
        elif b.shape[1] != d:
            raise PlantingError(f"basis of {name!r} has width {b.shape[1]}, expected {d}")
        if (b @ b.t() - torch.eye(b.shape[0], dtype=torch.float64)).abs().max() > 1e-6:
            raise PlantingError(f"basis rows of {name!r} are not orthonormal")
        if b.sum(1).abs().max() > 1e-6:
            raise PlantingError(f"basis of {name!r} is not orthogonal to the all-ones direction")
        c = torch.as_tensor(enc.codebook, dtype=torch.float64)
        m = len(hlm[name].domain)
        if tuple(c.shape) != (m, b.shape[0]):
            raise PlantingError(f"codebook of {name!r} has shape {tuple(c.shape)}, expected ({m}, {b.shape[0]})")
        aug = torch.cat([c, torch.ones(m, 1, dtype=torch.float64)], 1)
        if int(torch.linalg.matrix_rank(aug)) < m:
            raise PlantingError(f"codebook of {name!r} is rank deficient: its {m} codes are not affinely independent")
    names = list(encoding)
    for i, a in enumerate(names):
        for b_ in names[i + 1 :]:
            ba, bb = (torch.as_tensor(encoding[v].basis, dtype=torch.float64) for v in (a, b_))
            if ba.shape == bb.shape and torch.allclose(ba, bb, atol=1e-9):
                same_book = torch.allclose(torch.as_tensor(encoding[a].codebook, dtype=torch.float64),
                                           torch.as_tensor(encoding[b_].codebook, dtype=torch.float64))
                if hlm[a].is_input and hlm[b_].is_input and same_book:
                    continue  # one token embedding shared by several input slots
            if (ba @ bb.t()).abs().max() > 1e-6:
                raise PlantingError(f"subspaces of {a!r} and {b_!r} are not orthogonal")
    if d is None:
        raise PlantingError("empty encoding")
    return d


def _dual(codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``W, b`` with ``W @ c_j + b = e_j`` for every code ``c_j``."""
    m = codebook.shape[0]
    aug = torch.cat([codebook, torch.ones(m, 1, dtype=torch.float64)], 1)
    sol = torch.linalg.pinv(aug)  # (d_sub + 1, m)
    return sol[:-1].t().contiguous(), sol[-1].clone()


# ---------------------------------------------------------------------------
# builder


@dataclass
class _Read:
    """How an MLP at the child's position reads one parent."""

    basis: torch.Tensor  # rows holding the parent's code at the child's position
    flag: torch.Tensor  # direction equal to 1 exactly when the code is present
    dual_w: torch.Tensor
    dual_b: torch.Tensor
    max_code: float


def build_planted_model(
    hlm,
    encoding: Mapping[str, VariableEncoding],
    layout,
    input_tokens: Mapping[str, Mapping[object, int]],
    output_tokens: Mapping[object, int],
    vocab_size: int,
    n_layers: int | None = None,
    max_seq_len: int | None = None,
    anchor: float = 40.0,
    sharpness: float = 40.0,
    attention_gain: float = 40.0,
    readout_gain: float = 10.0,
    seed: int = 0,
) -> TransformerModel:
    """Construct a transformer whose internal variables follow ``encoding``.

    ``layout`` is a prompt (tokens and roles) fixing the absolute positions
    every selector resolves to; inputs must share that layout. Input
    variables are placed at layer 0 and their codes become token embeddings
    (``input_tokens[var][value]`` is the token id). If the output variable is
    not encoded it must have a single encoded parent at the last position,
    and the unembedding applies the output mechanism to it linearly.
    """
    d = _check_encoding(hlm, encoding)
    enc = {k: VariableEncoding(v.location, torch.as_tensor(v.basis, dtype=torch.float64),
                               torch.as_tensor(v.codebook, dtype=torch.float64)) for k, v in encoding.items()}
    seq_len = len(layout.tokens) if hasattr(layout, "tokens") else len(layout)
    last = seq_len - 1
    max_seq_len = max_seq_len or seq_len
    pos = {k: e.location.resolve(layout) for k, e in enc.items()}
    layer = {k: e.location.layer for k, e in enc.items()}
    out_var = hlm.output

    computed = []
    for name in hlm.order:
        if name not in enc:
            continue
        var = hlm[name]
        if var.is_input:
            if layer[name] != 0:
                raise PlantingError(f"input {name!r} must be placed at layer 0, got {layer[name]}")
            if name not in input_tokens:
                raise PlantingError(f"no token map for input {name!r}")
            continue
        if layer[name] < 1:
            raise PlantingError(f"computed variable {name!r} needs layer >= 1")
        for p in var.parents:
            if p not in enc:
                raise PlantingError(f"parent {p!r} of {name!r} is not encoded")
            if layer[p] > layer[name] - 1:
                raise PlantingError(f"parent {p!r} (layer {layer[p]}) is not available to {name!r} at layer {layer[name]}")
        computed.append(name)

    if out_var in enc:
        if pos[out_var] != last:
            raise PlantingError(f"output {out_var!r} must sit at the last position")
        readout_from, readout_linear = out_var, False
    else:
        ps = hlm[out_var].parents
        if len(ps) != 1 or ps[0] not in enc:
            raise PlantingError(f"unencoded output {out_var!r} needs exactly one encoded parent")
        readout_from, readout_linear = ps[0], True
        if pos[ps[0]] != last:
            raise PlantingError(f"parent {ps[0]!r} of the output must sit at the last position")
    top = max(layer.values())
    n_layers = n_layers if n_layers is not None else max(top, 1)
    if n_layers < top:
        raise PlantingError(f"n_layers={n_layers} below the highest planted layer {top}")

    # -- infrastructure directions ----------------------------------------
    user = torch.cat([e.basis for e in enc.values()])
    frame = _mean_free_frame(d, user, seed)
    cursor = 0

    def take(k: int) -> torch.Tensor:
        nonlocal cursor
        if cursor + k > frame.shape[0]:
            raise PlantingError(f"d_model={d} too small for the planted layout (ran out of free directions)")
        out = frame[cursor : cursor + k]
        cursor += k
        return out

    e_anchor = take(1)[0]
    pos_code = {p: take(1)[0] for p in sorted(set(pos.values()))}
    flag = {v: take(1)[0] for v in computed}
    slot: dict[tuple[str, str], tuple[torch.Tensor, torch.Tensor]] = {}
    for v in computed:
        for p in hlm[v].parents:
            if pos[p] != pos[v]:
                slot[(v, p)] = (take(enc[p].d_sub), take(1)[0])

    heads_per_block = [0] * n_layers
    dh_need = 1
    for (v, p), (sb, _) in slot.items():
        heads_per_block[layer[v] - 1] += 1
        dh_need = max(dh_need, sb.shape[0] + 1)
    n_heads = next((h for h in range(max(1, max(heads_per_block)), d + 1) if d % h == 0 and d // h >= dh_need), None)
    if n_heads is None:
        raise PlantingError(f"cannot fit {max(heads_per_block)} copy heads of width {dh_need} into d_model={d}")
    rows_per_block = [0] * n_layers
    for v in computed:
        rows_per_block[layer[v] - 1] += math.prod(len(hlm[p].domain) for p in hlm[v].parents)
    d_ff = max(2, 2 * max(rows_per_block))

    cfg = TransformerConfig(n_layers=n_layers, n_heads=n_heads, d_model=d, d_ff=d_ff, vocab_size=vocab_size,
                            max_seq_len=max_seq_len, seed=seed)
    model = TransformerModel(cfg, init=False)
    k0 = anchor / math.sqrt(d)  # undoes the nominal LayerNorm gain

    def lin(vec: torch.Tensor) -> torch.Tensor:
        return vec * k0

    def const(c: float) -> torch.Tensor:
        return e_anchor * (c / math.sqrt(d))

    W_E = torch.zeros(vocab_size, d, dtype=torch.float64)
    set_tok: dict[int, torch.Tensor] = {}
    for name, table in input_tokens.items():
        if name not in enc:
            raise PlantingError(f"token map given for unencoded input {name!r}")
        e = enc[name]
        for j, value in enumerate(hlm[name].domain):
            if value not in table:
                raise PlantingError(f"no token for {name}={value!r}")
            t = int(table[value])
            if not 0 <= t < vocab_size:
                raise PlantingError(f"token id {t} out of range")
            vec = e.codebook[j] @ e.basis
            if t in set_tok and not torch.allclose(set_tok[t], vec):
                raise PlantingError(f"token {t} would need two different embeddings")
            set_tok[t] = vec
            W_E[t] = vec
    W_pos = anchor * e_anchor.expand(max_seq_len, d).clone()
    for p, code in pos_code.items():
        W_pos[p] += code

    blocks = [
        {k: torch.zeros_like(getattr(b, k), dtype=torch.float64) for k in ("W_Q", "W_K", "W_V", "W_O", "W_in", "b_in", "W_out")}
        for b in model.blocks
    ]
    head_cursor = [0] * n_layers
    dh = d // n_heads
    for (v, p), (sb, sflag) in slot.items():
        b = layer[v] - 1
        h = head_cursor[b]
        head_cursor[b] += 1
        w = blocks[b]
        w["W_Q"][h, :, 0] = const(1.0)
        w["W_K"][h, :, 0] = lin(pos_code[pos[p]]) * attention_gain * math.sqrt(dh)
        k = enc[p].d_sub
        w["W_V"][h, :, :k] = lin(enc[p].basis).t()
        w["W_V"][h, :, k] = lin(pos_code[pos[p]])
        w["W_O"][h, :k] = sb
        w["W_O"][h, k] = sflag

    def reader(v: str, p: str) -> _Read:
        dw, db = _dual(enc[p].codebook)
        max_code = float(enc[p].codebook.norm(dim=1).max())
        if (v, p) in slot:
            sb, sflag = slot[(v, p)]
            return _Read(sb, sflag, dw, db, max_code)
        f = pos_code[pos[p]] if hlm[p].is_input else flag[p]
        return _Read(enc[p].basis, f, dw, db, max_code)

    row_cursor = [0] * n_layers
    for v in computed:
        b = layer[v] - 1
        w = blocks[b]
        var = hlm[v]
        reads = [reader(v, p) for p in var.parents]
        n = len(reads)
        big = 2.0 + sum(float((r.dual_b - 1).abs().max()) + float(r.dual_w.norm(dim=1).max()) * r.max_code for r in reads)
        for combo in itertools.product(*(range(len(hlm[p].domain)) for p in var.parents)):
            values = [hlm[p].domain[i] for p, i in zip(var.parents, combo)]
            out_idx = var.domain.index(var.mechanism(*values))
            col = torch.zeros(d, dtype=torch.float64)
            offset = 0.5 - big * n
            for r, i in zip(reads, combo):
                col += lin(r.dual_w[i] @ r.basis) + big * lin(r.flag)
                offset += float(r.dual_b[i]) - 1.0
            col = sharpness * (col + const(offset))
            j = row_cursor[b]
            row_cursor[b] += 2
            w["W_in"][:, j] = col
            w["W_in"][:, j + 1] = col
            w["b_in"][j + 1] = -1.0
            out = enc[v].codebook[out_idx] @ enc[v].basis + flag[v]
            w["W_out"][j] = out
            w["W_out"][j + 1] = -out

    W_U = torch.zeros(d, vocab_size, dtype=torch.float64)
    b_U = torch.full((vocab_size,), -readout_gain, dtype=torch.float64)
    src = enc[readout_from]
    dw, db = _dual(src.codebook)
    for value, tok in output_tokens.items():
        if value not in hlm[out_var].domain:
            raise PlantingError(f"output token given for {value!r}, outside the output domain")
        b_U[int(tok)] = 0.0
        col = torch.zeros(d, dtype=torch.float64)
        for j, sv in enumerate(hlm[readout_from].domain):
            if readout_linear and hlm[out_var].mechanism(sv) != value:
                continue
            if not readout_linear and sv != value:
                continue
            col += lin(dw[j] @ src.basis) + const(float(db[j]))
        W_U[:, int(tok)] = readout_gain * col
    missing = set(hlm[out_var].domain) - set(output_tokens)
    if missing:
        raise PlantingError(f"no output token for values {sorted(missing, key=repr)}")

    with torch.no_grad():
        model.W_E.copy_(W_E)
        model.W_pos.copy_(W_pos)
        model.W_U.copy_(W_U)
        model.b_U.copy_(b_U)
        for blk, w in zip(model.blocks, blocks):
            for k, t in w.items():
                getattr(blk, k).copy_(t)
    return model.freeze()


# ---------------------------------------------------------------------------
# ready-made planted models


@dataclass
class Planted:
    model: TransformerModel
    encoding: dict[str, VariableEncoding]
    hlm: object


def planted_chain(task, d_model: int = 32, v_layer: int = 1, n_layers: int = 2, v_flips: Sequence[str] = (),
                  seed: int = 0) -> Planted:
    """Planted model for ``ChainTask``: ``V`` (1-d, codes +-1) at ``(v_layer, last)``.

    ``v_flips`` plants the flipped mechanism, so the network computes a wrong
    ``V`` (hence a wrong answer) exactly on those X values.
    """
    hlm = task.flipped_hlm(v_flips) if v_flips else task.hlm
    layout = task.sample("ID", 0, 0)
    placements = {
        "X": (ResidualLocation(0, "X"), len(task.x_values)),
        "V": (ResidualLocation(v_layer, "last"), 1),
    }
    encoding = plan_encoding(hlm, placements, d_model, seed=seed)
    vocab = task.vocab.index
    model = build_planted_model(
        hlm, encoding, layout,
        input_tokens={"X": {x: vocab[x] for x in task.x_values}},
        output_tokens={y: vocab[y] for y in hlm["Y"].domain},
        vocab_size=len(task.vocab), n_layers=n_layers, max_seq_len=task.max_seq_len, seed=seed,
    )
    return Planted(model, encoding, hlm)


def planted_interval(task, d_model: int = 160, p_layer: int = 1, q_layer: int = 2, answer_layer: int = 3,
                     seed: int = 0) -> Planted:
    """Planted model for ``IntervalTask``: ``P`` and ``Q`` at the last token, at distinct layers."""
    hlm = task.hlm
    layout = task.sample("ID", 0, 0)
    n_prices = len(hlm["lb"].domain)
    placements = {
        "lb": (ResidualLocation(0, "lb"), n_prices),
        "ub": (ResidualLocation(0, "ub"), n_prices),
        "q": (ResidualLocation(0, "q"), n_prices),
        "P": (ResidualLocation(p_layer, "last"), 1),
        "Q": (ResidualLocation(q_layer, "last"), 1),
        "answer": (ResidualLocation(answer_layer, "last"), 1),
    }
    encoding = plan_encoding(hlm, placements, d_model, seed=seed, shared=[("lb", "ub", "q")])
    vocab = task.vocab.index
    prices = {v: vocab[str(v)] for v in hlm["lb"].domain}
    model = build_planted_model(
        hlm, encoding, layout,
        input_tokens={"lb": prices, "ub": prices, "q": prices},
        output_tokens={v: vocab[task.answer_token(v)] for v in hlm["answer"].domain},
        vocab_size=len(task.vocab), n_layers=answer_layer, max_seq_len=task.max_seq_len, seed=seed,
    )
    return Planted(model, encoding, hlm)
