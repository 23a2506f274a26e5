"""Central-difference gradient checking.

An objective is a callable ``objective(params, need_grad) -> (loss, grads, caches)``
where ``caches`` lists the ``ForwardCache`` of every forward pass it ran. If
any perturbed evaluation takes a different branch (relu mask, pooling winner,
max-fusion side) the stencil straddles a kink, and the coordinate is skipped
rather than counted as an error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose central difference crossed a kink
    at_kink: bool  # the base point itself sits on a relu kink
    worst: str | None = None

    @property
    def reliable(self) -> bool:
        return not self.at_kink and self.skipped == 0


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _signature(caches):
    return [arr for c in caches for arr in c.signature()]


def _same_branch(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def noise_floor(loss: float, h: float) -> float:
    # Central differences carry rounding noise of about eps*|loss|/h; gradients
    # below 1e7 times that are compared against the floor instead of themselves.
    return 1e7 * np.finfo(np.float64).eps * max(1.0, abs(loss)) / h


def grad_check(objective, params, h: float = 1e-4, max_params: int = 10_000, seed: int = 0,
               floor: float | None = None) -> GradCheckResult:
    """Compare analytic gradients with fourth-order central differences.

    Every coordinate is checked, unless there are more than ``max_params`` in
    which case a seeded random subsample of that size is used. Relative
    errors use ``max(|analytic|, |numeric|, floor)`` as denominator; by
    default ``floor`` tracks the rounding noise of the difference quotient.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads, caches = objective(params, True)
    base_sig = _signature(caches)
    at_kink = any(c.relu_at_zero for c in caches)
    if floor is None:
        floor = noise_floor(loss, h)
    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    if len(coords) > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for key, i in coords:
        flat = params[key].reshape(-1)
        orig = flat[i]
        losses, same = [], True
        for step in (2 * h, h, -h, -2 * h):
            flat[i] = orig + step
            value, _, caches_s = objective(params, False)
            losses.append(value)
            same = same and _same_branch(_signature(caches_s), base_sig)
        flat[i] = orig
        if not same:
            skipped += 1
            continue
        # five-point stencil: truncation error is O(h^4) instead of O(h^2)
        numeric = (-losses[0] + 8 * losses[1] - 8 * losses[2] + losses[3]) / (12 * h)
        err = relative_error(float(grads[key].reshape(-1)[i]), numeric, floor)
        checked += 1
        if err > worst:
            worst, worst_at = err, f"{key}[{i}]"
    return GradCheckResult(float(worst), checked, skipped, at_kink, worst_at)
