"""Applying a trained optimizer: deconvolution and denoising.

The update unit is iterated from x0 = y until the relative change of the
fitting error phi(x) = ||y - Ax||^2 drops below epsilon or the iteration
cap T is reached.  Estimates are never clipped between steps; clipping to
[0, 1] happens only when an image file is finally written.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .degrade import Kernel, apply_A, delta_kernel
from .unit import UnitParams, descent_step


@dataclass(frozen=True)
class StopRule:
    """Stop when |phi_t - phi_{t-1}| / |phi_t - phi_0| < epsilon, when that
    denominator is exactly zero (no progress from the start), or at T."""

    epsilon: float = 1e-3
    max_iters: int = 30

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class DeconvResult:
    estimate: Tensor
    trace: list[tuple[int, float]]  # (step, phi)
    aborted: bool = False
    message: str = ""
    estimates: list[Tensor] | None = None  # per-step, only when requested


def fitting_error(x: Tensor, y: Tensor, k: Kernel) -> float:
    """phi(x) = ||y - Ax||^2 under the same boundary rule as the model."""
    with no_grad():
        r = y.data - apply_A(x, k).data
    return float((r * r).sum())


def deconvolve(params: UnitParams, y: Tensor, k: Kernel, rule: StopRule = StopRule(),
               keep_estimates: bool = False) -> DeconvResult:
    """Iterate the learned update from x0 = y until the stop rule fires.

    Returns the final (unclipped) estimate and the (t, phi) trace.  A
    non-finite intermediate aborts, returning the last finite estimate
    flagged via ``aborted``.  ``keep_estimates`` retains every step's
    estimate (for per-step scoring against a known truth).
    """
    x = y.detach()
    phi0 = fitting_error(x, y, k)
    prev = phi0
    trace: list[tuple[int, float]] = []
    kept: list[Tensor] | None = [] if keep_estimates else None
    with no_grad():
        for t in range(1, rule.max_iters + 1):
            x_new = descent_step(params, x, y, k, "eval")
            if not np.isfinite(x_new.data).all():
                return DeconvResult(
                    x, trace, aborted=True,
                    message=f"non-finite estimate at step {t}; returning step {t-1}",
                    estimates=kept,
                )
            phi = fitting_error(x_new, y, k)
            trace.append((t, phi))
            if kept is not None:
                kept.append(x_new)
            x = x_new
            denom = abs(phi - phi0)
            if denom == 0.0:
                break
            if abs(phi - prev) / denom < rule.epsilon:
                break
            prev = phi
    return DeconvResult(x, trace, estimates=kept)


def denoise(params: UnitParams, y: Tensor, rule: StopRule = StopRule(),
            keep_estimates: bool = False) -> DeconvResult:
    """Denoising is deconvolution with the identity blur: the data-fit
    gradient collapses to x - y and phi to ||y - x||^2."""
    return deconvolve(params, y, delta_kernel(), rule, keep_estimates)


def write_trace(path, result: DeconvResult, psnr_values=None) -> None:
    """Trace CSV: t, phi, and PSNR when ground truth was available."""
    lines = ["t,phi,psnr_if_truth_given"]
    for i, (t, phi) in enumerate(result.trace):
        p = "" if psnr_values is None else f"{psnr_values[i]:.6f}"
        lines.append(f"{t},{phi:.10g},{p}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
