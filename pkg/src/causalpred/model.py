"""Minimal decoder-only transformer with residual-stream hooks, plus a trainer."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .numerics import OptimizerState, grad, optimizer_step

PAD_ID = 0


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 96
    max_seq_len: int = 24
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# locations


_SELECTOR = re.compile(r"^(?P<role>[A-Za-z_][\w]*)(?:(?P<sign>[+-])(?P<off>\d+))?$|^pos:(?P<abs>\d+)$")


@dataclass(frozen=True)
class ResidualLocation:
    """Residual stream entering block ``layer`` at the token picked by ``selector``.

    ``layer == n_layers`` is the stream after the last block (before the final
    norm). Selectors: ``last``, a prompt role such as ``name_c``, a role with an
    offset such as ``q+1``, or an absolute ``pos:N``.
    """

    layer: int
    selector: str = "last"

    def __post_init__(self):
        if not _SELECTOR.match(self.selector):
            raise ModelError(f"malformed token selector {self.selector!r}")

    def resolve(self, prompt) -> int:
        m = _SELECTOR.match(self.selector)
        n = len(prompt.tokens) if hasattr(prompt, "tokens") else len(prompt)
        if m.group("abs") is not None:
            pos = int(m.group("abs"))
        else:
            role = m.group("role")
            roles = getattr(prompt, "roles", None) or {}
            if role == "last":
                pos = n - 1
            elif role in roles:
                pos = roles[role]
            else:
                raise ModelError(f"token selector {self.selector!r} does not resolve on this prompt (roles: {sorted(roles)})")
            if m.group("off"):
                off = int(m.group("off"))
                pos = pos + off if m.group("sign") == "+" else pos - off
        if not 0 <= pos < n:
            raise ModelError(f"token selector {self.selector!r} resolves to {pos}, outside a prompt of length {n}")
        return pos

    def check(self, model: "TransformerModel") -> None:
        if not 0 <= self.layer <= model.cfg.n_layers:
            raise ModelError(f"layer {self.layer} outside 0..{model.cfg.n_layers}")

    def __str__(self) -> str:
        return f"L{self.layer}@{self.selector}"


@dataclass
class ActivationVector:
    values: torch.Tensor
    location: ResidualLocation
    source: str = ""


# ---------------------------------------------------------------------------
# model


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        d, h, dh, f = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_ff
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.W_Q = nn.Parameter(torch.zeros(h, d, dh))
        self.b_Q = nn.Parameter(torch.zeros(h, dh))
        self.W_K = nn.Parameter(torch.zeros(h, d, dh))
        self.b_K = nn.Parameter(torch.zeros(h, dh))
        self.W_V = nn.Parameter(torch.zeros(h, d, dh))
        self.b_V = nn.Parameter(torch.zeros(h, dh))
        self.W_O = nn.Parameter(torch.zeros(h, dh, d))
        self.b_O = nn.Parameter(torch.zeros(d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.W_in = nn.Parameter(torch.zeros(d, f))
        self.b_in = nn.Parameter(torch.zeros(f))
        self.W_out = nn.Parameter(torch.zeros(f, d))
        self.b_out = nn.Parameter(torch.zeros(d))
        self.eps = cfg.ln_eps

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        h = F.layer_norm(x, x.shape[-1:], self.ln1_w, self.ln1_b, self.eps)
        nh, d, dh = self.W_Q.shape
        b, s, _ = x.shape
        # one (d, 3*h*dh) matmul for all heads, then split into (b, h, s, dh)
        w = torch.cat([self.W_Q, self.W_K, self.W_V]).permute(1, 0, 2).reshape(d, 3 * nh * dh)
        bias = torch.cat([self.b_Q, self.b_K, self.b_V]).reshape(-1)
        qkv = (h @ w + bias).view(b, s, 3, nh, dh).permute(2, 0, 3, 1, 4)
        z = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], is_causal=True)
        return z.permute(0, 2, 1, 3).reshape(b, s, nh * dh) @ self.W_O.reshape(nh * dh, d) + self.b_O

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        h = F.layer_norm(x, x.shape[-1:], self.ln2_w, self.ln2_b, self.eps)
        return F.gelu(h @ self.W_in + self.b_in) @ self.W_out + self.b_out

    def forward(self, x):
        x = x + self.attention(x)
        return x + self.mlp(x)


Hook = Callable[[torch.Tensor], torch.Tensor]


class TransformerModel(nn.Module):
    """Pre-norm decoder-only transformer with learned absolute positions and GELU MLPs."""

    def __init__(self, cfg: TransformerConfig, init: bool = True):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.W_E = nn.Parameter(torch.zeros(cfg.vocab_size, d))
        self.W_pos = nn.Parameter(torch.zeros(cfg.max_seq_len, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        self.W_U = nn.Parameter(torch.zeros(d, cfg.vocab_size))
        self.b_U = nn.Parameter(torch.zeros(cfg.vocab_size))
        if init:
            self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(("ln1_w", "ln2_w", "lnf_w")):
                    p.fill_(1.0)
                elif name.rsplit(".", 1)[-1].startswith("b_") or name.endswith(("_b",)):
                    p.zero_()
                else:
                    std = 0.02 / math.sqrt(2 * self.cfg.n_layers) if name.endswith(("W_O", "W_out")) else 0.02
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    # -- forward ----------------------------------------------------------
    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise ModelError(f"tokens must be (batch, seq), got shape {tuple(tokens.shape)}")
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ModelError(f"token id out of range 0..{self.cfg.vocab_size - 1}")

    def run(self, tokens, hooks: Mapping[int, Hook] | None = None, stop_at: int | None = None):
        """Return ``(logits, cache)``; ``cache[k]`` is the residual entering block ``k``.

        ``hooks[k]`` rewrites the residual entering block ``k`` before anything
        downstream reads it. With ``stop_at`` the pass ends after caching that
        layer and ``logits`` is ``None``.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        self._check_tokens(tokens)
        hooks = hooks or {}
        x = self.W_E[tokens] + self.W_pos[: tokens.shape[1]]
        cache = []
        for k in range(self.cfg.n_layers + 1):
            if k in hooks:
                x = hooks[k](x)
            cache.append(x)
            if stop_at is not None and k == stop_at:
                return None, cache
            if k < self.cfg.n_layers:
                x = self.blocks[k](x)
        x = F.layer_norm(x, x.shape[-1:], self.lnf_w, self.lnf_b, self.cfg.ln_eps)
        return x @ self.W_U + self.b_U, cache

    def forward(self, tokens, hooks=None):
        return self.run(tokens, hooks)[0]

    # -- weights ----------------------------------------------------------
    def named_weights(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    @classmethod
    def from_weights(cls, cfg: TransformerConfig, weights: Mapping[str, torch.Tensor]) -> "TransformerModel":
        m = cls(cfg, init=False)
        missing = set(m.state_dict()) - set(weights)
        extra = set(weights) - set(m.state_dict())
        if missing or extra:
            raise ModelError(f"weight names mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        m.load_state_dict({k: torch.as_tensor(v, dtype=torch.float32) for k, v in weights.items()})
        return m

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def freeze(self) -> "TransformerModel":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


# ---------------------------------------------------------------------------
# batched helpers


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token sequences. Causal masking keeps real positions unaffected."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max()) if len(seqs) else 0), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def _rows(t: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    return t[torch.arange(t.shape[0]), pos]


def last_logits(model: TransformerModel, seqs: Sequence[Sequence[int]], hooks=None) -> torch.Tensor:
    tokens, lengths = pad_batch(seqs)
    return _rows(model(tokens, hooks), lengths - 1)


@torch.no_grad()
def greedy_decode(model: TransformerModel, seqs: Sequence[Sequence[int]], n_decode: int = 1, batch: int = 1024):
    """Greedy argmax continuation of each prompt, ``n_decode`` tokens each."""
    outs: list[tuple[int, ...]] = []
    for i in range(0, len(seqs), batch):
        cur = [list(s) for s in seqs[i : i + batch]]
        gen: list[list[int]] = [[] for _ in cur]
        for _ in range(n_decode):
            nxt = last_logits(model, cur).argmax(-1).tolist()
            for j, t in enumerate(nxt):
                gen[j].append(t)
                cur[j].append(t)
        outs.extend(tuple(g) for g in gen)
    return outs


def _token_seq(p) -> tuple[int, ...]:
    return tuple(p.tokens) if hasattr(p, "tokens") else tuple(int(t) for t in p)


def resolve_positions(location: ResidualLocation, prompts) -> torch.Tensor:
    return torch.tensor([location.resolve(p) for p in prompts], dtype=torch.long)


def get_vals(model: TransformerModel, prompts, location: ResidualLocation, batch: int = 1024) -> torch.Tensor:
    """Residual vectors at ``location`` for each prompt, shape ``(n, d_model)``."""
    location.check(model)
    pos = resolve_positions(location, prompts)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(prompts), batch):
            tokens, _ = pad_batch([_token_seq(p) for p in prompts[i : i + batch]])
            _, cache = model.run(tokens, stop_at=location.layer)
            chunks.append(_rows(cache[location.layer], pos[i : i + batch]))
    return torch.cat(chunks) if chunks else torch.zeros(0, model.cfg.d_model)


def get_val(model: TransformerModel, prompt, location: ResidualLocation) -> ActivationVector:
    return ActivationVector(get_vals(model, [prompt], location)[0], location, getattr(prompt, "uid", ""))


def forward(model: TransformerModel, tokens):
    """Logits per position and the residual cache for a single prompt or a batch."""
    with torch.no_grad():
        return model.run(tokens)


def patch_hook(positions: torch.Tensor, fn: Callable[[torch.Tensor], torch.Tensor]) -> Hook:
    """Hook rewriting ``resid[b, positions[b]]`` with ``fn`` of its current value."""

    def hook(resid: torch.Tensor) -> torch.Tensor:
        rows = torch.arange(resid.shape[0])
        new = resid.clone()
        new[rows, positions] = fn(resid[rows, positions])
        return new

    return hook


def forward_with_patch(model: TransformerModel, prompts, location: ResidualLocation, replacement) -> torch.Tensor:
    """Logits ``(batch, seq, vocab)`` with the residual at ``location`` overwritten.

    ``prompts`` may be one prompt or a list; ``replacement`` is one vector or
    one per prompt.
    """
    single = hasattr(prompts, "tokens") or (len(prompts) > 0 and not hasattr(prompts[0], "__len__"))
    prompts = [prompts] if single else list(prompts)
    location.check(model)
    rep = replacement.values if isinstance(replacement, ActivationVector) else torch.as_tensor(replacement)
    if rep.shape[-1] != model.cfg.d_model:
        raise ModelError(f"replacement has length {rep.shape[-1]}, expected d_model={model.cfg.d_model}")
    rep = rep.reshape(-1, model.cfg.d_model).expand(len(prompts), -1).to(torch.float32)
    pos = resolve_positions(location, prompts)
    tokens, _ = pad_batch([_token_seq(p) for p in prompts])
    with torch.no_grad():
        logits = model(tokens, {location.layer: patch_hook(pos, lambda _: rep)})
    return logits[0] if single else logits


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    id_accuracy: float = float("nan")
    tag_accuracy: dict[str, float] = field(default_factory=dict)
    # accuracy per tag measured every ``eval_every`` steps
    curve_steps: list[int] = field(default_factory=list)
    curves: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def task_accuracy(model: TransformerModel, task, tag: str, n: int = 1024, seed: int = 10_007) -> float:
    prompts = [task.sample(tag, seed, i) for i in range(n)]
    outs = greedy_decode(model, [p.tokens for p in prompts])
    return float(np.mean([task.label(p, o) for p, o in zip(prompts, outs)]))


def train_task_model(
    cfg: TransformerConfig,
    task,
    n_steps: int,
    batch: int = 64,
    seed: int = 0,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    log_every: int = 100,
    eval_size: int = 1024,
    eval_every: int = 0,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[TransformerModel, TrainingLog]:
    """Cross-entropy training on the answer token of prompts drawn from ``task.train_mixture``."""
    if cfg.vocab_size < len(task.vocab):
        raise ModelError(f"vocab_size {cfg.vocab_size} smaller than task vocabulary {len(task.vocab)}")
    torch.manual_seed(seed)
    model = TransformerModel(cfg)
    params = list(model.parameters())
    state = OptimizerState.for_params(params, lr=lr, weight_decay=weight_decay)
    tags = list(task.train_mixture)
    probs = np.array([task.train_mixture[t] for t in tags], dtype=np.float64)
    probs /= probs.sum()
    rng = np.random.default_rng([seed, 7])
    log = TrainingLog()
    counter = 0
    running = 0.0
    for step in range(n_steps):
        picks = rng.choice(len(tags), size=batch, p=probs)
        prompts = []
        for t in picks:
            prompts.append(task.training_sample(tags[t], seed, counter))
            counter += 1
        targets = torch.tensor([task.target_token(p) for p in prompts])
        logits = last_logits(model, [p.tokens for p in prompts])
        loss = F.cross_entropy(logits, targets)
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingDiverged(f"non-finite loss {lv} at step {step} (lr={lr}, batch={batch}, seed={seed})")
        grads = grad(loss, params)
        optimizer_step(state, params, [grads[p] for p in params])
        running += lv
        if (step + 1) % log_every == 0 or step + 1 == n_steps:
            n = (step % log_every) + 1
            log.steps.append(step + 1)
            log.losses.append(running / n)
            running = 0.0
            if progress:
                progress(step + 1, log.losses[-1])
        if eval_every and (step + 1) % eval_every == 0:
            log.curve_steps.append(step + 1)
            for tag in task.tags:
                log.curves.setdefault(tag, []).append(task_accuracy(model, task, tag, eval_size))
    model.freeze()
    for tag in task.tags:
        log.tag_accuracy[tag] = task_accuracy(model, task, tag, eval_size)
    log.id_accuracy = log.tag_accuracy[task.tags[0]]
    return model, log
