"""Numerical substrate: autodiff entry point, orthonormal maps, AdamW, tempered softmax.

Tensors are ``torch.Tensor``; gradients come from torch's reverse-mode tape.
The orthonormal parameterization and the optimizer update are written out
explicitly so their behaviour is pinned independently of torch releases.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import torch

TENSOR_MAGIC = b"MCTENSR1"


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# gradients


def grad(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> dict[torch.Tensor, torch.Tensor]:
    """Return ``{param: d loss / d param}`` by reverse accumulation.

    Raises if ``loss`` is not a scalar or if some parameter is not reachable
    from ``loss`` (which usually means the graph was built wrongly).
    """
    params = list(params)
    if loss.numel() != 1:
        raise NumericsError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise NumericsError("loss is not attached to a computation graph")
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True, retain_graph=False)
    out = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise NumericsError(f"parameter #{i} (shape {tuple(p.shape)}) is not in the computation graph")
        out[p] = g
    return out


# ---------------------------------------------------------------------------
# orthonormal maps


@dataclass
class OrthonormalMap:
    """Unconstrained parameters of a ``d_sub x d`` matrix with orthonormal rows.

    ``params`` has shape ``(d_sub, d)``; row ``i`` holds the free tail of the
    i-th Householder vector (entries ``j <= i`` are ignored).
    """

    d_sub: int
    d: int
    params: torch.Tensor

    @classmethod
    def zeros(cls, d_sub: int, d: int, dtype=torch.float32) -> "OrthonormalMap":
        _check_dims(d_sub, d)
        return cls(d_sub, d, torch.zeros(d_sub, d, dtype=dtype))

    @classmethod
    def random(cls, d_sub: int, d: int, seed: int = 0, scale: float = 1.0, dtype=torch.float32) -> "OrthonormalMap":
        _check_dims(d_sub, d)
        gen = torch.Generator().manual_seed(seed)
        return cls(d_sub, d, scale * torch.randn(d_sub, d, generator=gen, dtype=torch.float64).to(dtype))

    @classmethod
    def from_basis(cls, basis, dtype=torch.float32) -> "OrthonormalMap":
        """Parameters whose realized ``Q`` has the same row span as ``basis``.

        Householder QR of ``basis^T``; the realized rows agree with ``basis``
        up to sign, so the projector ``Q^T Q`` is reproduced exactly.
        """
        b = torch.as_tensor(basis, dtype=torch.float64)
        if b.dim() != 2:
            raise NumericsError(f"basis must be 2-d, got shape {tuple(b.shape)}")
        k, d = b.shape
        _check_dims(k, d)
        if orthonormality_error(b) > 1e-6:
            raise NumericsError("basis rows are not orthonormal")
        a = b.t().clone()
        params = torch.zeros(k, d, dtype=torch.float64)
        for i in range(k):
            x = a[i:, i]
            alpha = -(1.0 if x[0] >= 0 else -1.0) * float(x.norm())
            v = x.clone()
            v[0] -= alpha
            v = v / v[0]
            params[i, i + 1 :] = v[1:]
            a[i:] -= (2.0 / float(v @ v)) * torch.outer(v, v @ a[i:])
        return cls(k, d, params.to(dtype))

    def requires_grad_(self, flag: bool = True) -> "OrthonormalMap":
        self.params.requires_grad_(flag)
        return self

    def realize(self) -> torch.Tensor:
        return realize_orthonormal(self)


def _check_dims(d_sub: int, d: int) -> None:
    if d_sub < 0 or d <= 0:
        raise NumericsError(f"invalid dims d_sub={d_sub}, d={d}")
    if d_sub > d:
        raise NumericsError(f"d_sub={d_sub} exceeds ambient dimension d={d}")


def realize_orthonormal(m: OrthonormalMap) -> torch.Tensor:
    """Map unconstrained parameters to ``Q`` (``d_sub x d``) with ``Q Q^T = I``.

    ``Q^T = -H_1 H_2 ... H_k E_k`` where ``H_i = I - tau_i v_i v_i^T`` with
    ``v_i = e_i + (masked tail)`` and ``E_k`` the first ``k`` standard basis
    columns. Zero parameters give ``Q = E_k^T``.
    """
    _check_dims(m.d_sub, m.d)
    k, d = m.d_sub, m.d
    p = m.params
    if tuple(p.shape) != (k, d):
        raise NumericsError(f"params shape {tuple(p.shape)} != ({k}, {d})")
    if k == 0:
        return p.new_zeros(0, d)
    idx = torch.arange(d)
    tail = (idx.unsqueeze(0) > torch.arange(k).unsqueeze(1)).to(p.dtype)
    eye = torch.eye(k, d, dtype=p.dtype)
    v = eye + p * tail  # (k, d)
    tau = 2.0 / (v * v).sum(dim=1)
    x = eye.t()  # (d, k)
    for i in range(k - 1, -1, -1):
        vi = v[i]
        x = x - tau[i] * torch.outer(vi, vi @ x)
    return -x.t()


def orthonormality_error(q: torch.Tensor) -> float:
    """``||Q Q^T - I||_inf`` (max-abs entry), evaluated in float64."""
    q = q.detach().to(torch.float64)
    return float((q @ q.t() - torch.eye(q.shape[0], dtype=torch.float64)).abs().max()) if q.shape[0] else 0.0


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.0
    eps: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **hyper) -> "OptimizerState":
        st = cls(**hyper)
        st.exp_avg = [torch.zeros_like(p) for p in params]
        st.exp_avg_sq = [torch.zeros_like(p) for p in params]
        return st


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> OptimizerState:
    """One AdamW update with decoupled weight decay and constant learning rate.

    Parameters are updated in place; the (mutated) state is returned.
    """
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise NumericsError("params, grads and optimizer moments differ in length")
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise NumericsError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, moment {tuple(m.shape)}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m / c1, denom, value=-state.lr)
    return state


# ---------------------------------------------------------------------------
# softmax


def softmax_with_temperature(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature-scaled softmax, computed in float64 with max-subtraction."""
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    z = torch.as_tensor(logits).to(torch.float64) / temperature
    z = z - z.max(dim=dim, keepdim=True).values
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax_with_temperature(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    z = torch.as_tensor(logits).to(torch.float64) / temperature
    return torch.log_softmax(z, dim=dim)


# ---------------------------------------------------------------------------
# flat-binary tensor files


def write_tensor(f: BinaryIO, t) -> None:
    arr = np.asarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> torch.Tensor:
    magic = f.read(8)
    if magic != TENSOR_MAGIC:
        raise NumericsError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    buf = f.read(4 * count)
    if len(buf) != 4 * count:
        raise NumericsError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return torch.from_numpy(arr.copy())


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> torch.Tensor:
    return read_tensor(io.BytesIO(data))


def save_tensor(path: str | Path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)
