"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.1e} ({self.checked} coords)"


def numerical_grad(f: Callable[[], Tensor], x: Tensor, coords: Sequence[int]) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the flat ``coords`` of ``x``.

    ``x.data`` is perturbed in place and restored bit-exactly.
    """
    flat = x.data.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for j, i in enumerate(coords):
        orig = flat[i]
        h = 1e-6 * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-6,
               max_coords=None, seed: int = 0) -> GradCheckReport:
    """Compare autodiff against central differences for every input.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``floor`` is the larger of ``1e-3 * max|n|`` over all checked coordinates
    of all inputs and ``1e-8 * max(1, |f|)``: components that are zero up to
    rounding, or orders of magnitude below the overall gradient scale, are
    judged against that scale instead of against finite-difference noise.
    ``max_coords`` samples that many coordinates per input (all if None); a
    sequence gives one limit per input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    f_scale = max(1.0, abs(loss.item()))
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    limits = list(max_coords) if isinstance(max_coords, (list, tuple)) else [max_coords] * len(inputs)
    pairs = []
    for t, a, limit in zip(inputs, analytic, limits):
        n_el = t.data.size
        if limit is not None and n_el > limit:
            coords = np.sort(rng.choice(n_el, size=limit, replace=False))
        else:
            coords = np.arange(n_el)
        num = numerical_grad(lambda: f(*inputs), t, coords)
        pairs.append((a.reshape(-1)[coords], num))

    scale = max((float(np.abs(n).max(initial=0.0)) for _, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-8 * f_scale)
    per_input = []
    for ana, num in pairs:
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        per_input.append(float(rel.max(initial=0.0)))
    worst = max(per_input, default=0.0)
    checked = sum(len(n) for _, n in pairs)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, tol, per_input, checked)
