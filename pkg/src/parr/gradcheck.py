"""Central finite-difference verification of analytic gradients.

Runs in float64 with a fixed step and compares per-coordinate against
autograd, sampling a handful of coordinates from every parameter tensor so
even the full model stays cheap to check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass
class CoordReport:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckResult:
    n_checked: int
    max_rel_err: float
    failures: list[CoordReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(
    module: nn.Module,
    loss_fn,
    *,
    step: float = 1e-4,
    rel_tol: float = 1e-4,
    coords_per_tensor: int = 3,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd against (f(x+h) - f(x-h)) / 2h coordinate-wise.

    loss_fn(module) must return a scalar tensor and be deterministic.  The
    module is converted to float64 in place.  Relative error uses
    |a - n| / max(|a|, |n|, 1e-6) so near-zero gradients do not blow up the
    ratio.
    """
    module = module.double()
    for p in module.parameters():
        p.requires_grad_(True)
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module)
    loss.backward()

    rng = np.random.default_rng(seed)
    result = GradCheckResult(n_checked=0, max_rel_err=0.0)
    with torch.no_grad():
        for name, p in module.named_parameters():
            grad = torch.zeros_like(p) if p.grad is None else p.grad
            flat = p.view(-1)
            gflat = grad.reshape(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
            for i in picks:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_fn(module))
                flat[i] = orig - step
                f_minus = float(loss_fn(module))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = gflat[i].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                result.n_checked += 1
                result.max_rel_err = max(result.max_rel_err, rel)
                if rel > rel_tol:
                    result.failures.append(
                        CoordReport(name, i, analytic, numeric, rel)
                    )
    return result
