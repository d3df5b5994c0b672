"""Batched conjugate gradient for Hermitian positive (semi)definite operators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import NumericError


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def _rdot(a: torch.Tensor, b: torch.Tensor, dims) -> torch.Tensor:
    prod = a.conj() * b if a.is_complex() else a * b
    if not dims:
        return prod.real if prod.is_complex() else prod
    out = prod.sum(dim=dims)
    return out.real if out.is_complex() else out


def cg_solve(
    normal_op: Callable[[torch.Tensor], torch.Tensor],
    rhs: torch.Tensor,
    iters: int = 8,
    tol: float = 1e-6,
    x0: torch.Tensor | None = None,
    batch_dims: int = 0,
) -> tuple[torch.Tensor, CGInfo]:
    """Solve ``normal_op(x) = rhs``.

    The leading ``batch_dims`` axes index independent systems; every other
    axis belongs to the unknown. Each system stops updating once its relative
    residual drops below ``tol``. The loop is plain tensor arithmetic, so it
    can be differentiated by autograd when the inputs require grad.
    """
    dims = tuple(range(batch_dims, rhs.ndim))
    view = rhs.shape[:batch_dims] + (1,) * (rhs.ndim - batch_dims)
    rhs_norm2 = _rdot(rhs, rhs, dims)
    thresh = (tol**2) * rhs_norm2
    x = torch.zeros_like(rhs) if x0 is None else x0
    r = rhs - normal_op(x) if x0 is not None else rhs.clone()
    p = r
    rs = _rdot(r, r, dims)
    if not bool(torch.isfinite(rs).all()):
        raise NumericError("conjugate gradient got a non-finite initial residual (iteration 0)")
    active = rs > thresh
    it = 0
    while it < iters and bool(active.any()):
        ap = normal_op(p)
        pap = _rdot(p, ap, dims)
        safe = torch.where(active, pap, torch.ones_like(pap))
        alpha = torch.where(active, rs / safe, torch.zeros_like(rs))
        a = alpha.reshape(view)
        x = x + a * p
        r = r - a * ap
        rs_new = _rdot(r, r, dims)
        it += 1
        if not bool(torch.isfinite(rs_new).all()):
            raise NumericError(f"conjugate gradient produced a non-finite iterate at iteration {it}")
        safe_rs = torch.where(active, rs, torch.ones_like(rs))
        beta = torch.where(active, rs_new / safe_rs, torch.zeros_like(rs))
        p = r + beta.reshape(view) * p
        rs = torch.where(active, rs_new, rs)
        active = active & (rs_new > thresh)
    with torch.no_grad():
        denom = torch.clamp(rhs_norm2, min=torch.finfo(rhs_norm2.dtype).tiny)
        rel = torch.sqrt(torch.where(rhs_norm2 > 0, rs / denom, torch.zeros_like(rs)))
        residual = float(rel.max()) if rel.numel() else 0.0
    return x, CGInfo(iterations=it, residual=residual, converged=not bool(active.any()))
