"""Dense-array primitives with reverse-mode gradients, plus a finite-difference checker.

Tensors are ``torch.Tensor``; autograd supplies the analytic gradients. The
finite-difference checker never touches autograd on its numeric side, so it
stays an independent oracle for everything built on top of these ops.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable

import torch

from .errors import NonFiniteError, ShapeError

Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(precision: str | torch.dtype) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}") from None


def tensor(data, precision: str | torch.dtype = "float64", requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=resolve_dtype(precision)).clone()
    check_finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def check_finite(t: Tensor, what: str = "value") -> Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite entries in {what}")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(a @ b, "matmul output")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"axis {axis} invalid for rank {x.dim()}")
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def masked_softmax(x: Tensor, mask: Tensor | None, axis: int = -1) -> Tensor:
    """Softmax where ``mask`` False entries receive zero weight.

    Every slice along ``axis`` must keep at least one entry.
    """
    if mask is None:
        return softmax(x, axis)
    check_finite(x, "softmax input")
    mask = mask.to(torch.bool)
    if not bool(mask.any(dim=axis).all()):
        raise ShapeError("attention mask hides every key for some query")
    neg = torch.finfo(x.dtype).min
    filled = x.masked_fill(~mask, neg)
    shifted = filled - filled.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted) * mask.to(x.dtype)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with population variance, then apply ``gain``/``bias``."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return check_finite(out, "layer_norm output")


def cross_attention(queries: Tensor, keys: Tensor, values: Tensor, n_heads: int = 1,
                    mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention, one output row per query.

    Shapes are ``(..., Lq, D)``, ``(..., Lk, D)`` and ``(..., Lk, Dv)``. Widths
    are split evenly into ``n_heads`` heads, each scaled by ``1/sqrt(D/n_heads)``.
    ``mask`` broadcasts to ``(..., Lq, Lk)``; False hides a key from a query.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(f"key count {keys.shape[-2]} != value count {values.shape[-2]}")
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query width {queries.shape[-1]} != key width {keys.shape[-1]}")
    d, dv = queries.shape[-1], values.shape[-1]
    if n_heads < 1 or d % n_heads or dv % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide widths {d}/{dv}")
    lq, lk = queries.shape[-2], keys.shape[-2]
    batch = queries.shape[:-2]
    dh, dvh = d // n_heads, dv // n_heads

    q = queries.reshape(*batch, lq, n_heads, dh).transpose(-3, -2)
    k = keys.reshape(*keys.shape[:-2], lk, n_heads, dh).transpose(-3, -2)
    v = values.reshape(*values.shape[:-2], lk, n_heads, dvh).transpose(-3, -2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    if mask is not None:
        mask = mask.unsqueeze(-3)  # broadcast over heads
    weights = masked_softmax(scores, mask, axis=-1)
    out = (weights @ v).transpose(-3, -2).reshape(*batch, lq, dv)
    return check_finite(out, "attention output")


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _central_difference(evaluate: Callable[[], float], flat: Tensor, i: int, step: float, stencil: int) -> float:
    orig = flat[i].item()

    def at(offset):
        flat[i] = orig + offset
        return evaluate()

    try:
        if stencil == 2:
            return (at(step) - at(-step)) / (2 * step)
        if stencil == 4:
            return (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12 * step)
        raise ValueError("stencil must be 2 or 4")
    finally:
        flat[i] = orig


def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denom = torch.clamp(analytic.abs(), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max())


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      stencil: int = 2) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(|analytic|, 1e-8)``.

    ``f`` maps ``x`` to a scalar. Run in float64 for meaningful tolerances.
    """
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise ShapeError("finite_diff_check needs a scalar function")
    check_finite(y, "f(x)")
    (analytic,) = torch.autograd.grad(y, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)

    probe = x0.clone()
    flat = probe.view(-1)
    numeric = torch.empty(flat.numel(), dtype=x0.dtype)
    with torch.no_grad():
        def evaluate():
            return float(check_finite(f(probe), "f(x)"))
        for i in range(flat.numel()):
            numeric[i] = _central_difference(evaluate, flat, i, step, stencil)
    return _relative_error(analytic.reshape(-1), numeric)


def finite_diff_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                             step: float = 1e-5, stencil: int = 2) -> float:
    """Same error measure as ``finite_diff_check``, over every entry of ``params``.

    ``loss_fn`` closes over the parameters; they are perturbed in place and restored.
    """
    params = [p for p in params]
    loss = loss_fn()
    check_finite(loss, "loss")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        def evaluate():
            return float(check_finite(loss_fn(), "loss"))
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.data.view(-1)
            numeric = torch.empty(flat.numel(), dtype=p.dtype)
            for i in range(flat.numel()):
                numeric[i] = _central_difference(evaluate, flat, i, step, stencil)
            worst = max(worst, _relative_error(g.reshape(-1), numeric))
    return worst


def uniform_fan_in_(weight: Tensor, generator: torch.Generator | None = None) -> Tensor:
    """In-place uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the last axis."""
    bound = 1.0 / math.sqrt(weight.shape[-1])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight
