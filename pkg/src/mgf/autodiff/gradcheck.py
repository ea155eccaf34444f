"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mgf.autodiff.tensor import Tensor, backward, parameter
from mgf.errors import MGFError, ValidationError

# agreement required between the two extrapolated slopes at a step
TOL_KINK = 1e-6
# slopes below FLOOR_ROUNDOFF * eps_mach * |f| / h are judged in absolute terms
FLOOR_ROUNDOFF = 1e7


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_nonfinite: int = 0
    skipped_kink: int = 0
    worst: tuple[int, int] | None = None
    floored: int = 0  # coordinates whose gradient was below the difference resolution
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def skipped(self) -> int:
        return self.skipped_nonfinite + self.skipped_kink

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def _eval(f, arrays) -> float:
    try:
        val = float(f([Tensor(a) for a in arrays]).data.reshape(-1)[0])
    except (MGFError, FloatingPointError):
        return float("nan")
    return val


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``f`` receives one Tensor per entry of ``params``.  When ``max_coords`` is
    given, that many coordinates are sampled (seeded) across all parameters;
    otherwise every coordinate is checked.

    With ``D(h)`` the central difference at step h, the slope estimate is the
    Richardson value ``R(h) = (4 D(h/2) - D(h)) / 3``, exact through third
    order, so steps near 1e-3 keep rounding small and still resolve slopes
    close to zero.  A step is accepted when ``R(h)`` and ``R(h/2)`` agree and
    the gap between one-sided slopes shrinks in proportion to the step;
    otherwise h shrinks tenfold, down to eps/1000.  A coordinate whose
    estimates never settle sits on a kink (relu at exactly zero) and is
    skipped, as is one where ``f`` is non-finite at a perturbed point.

    The error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, r)`` where
    ``r = max(1e7 * eps_mach * |f| / h, 1e-8)`` keeps rounding noise on tiny
    slopes from counting as relative error; such coordinates are tallied in
    ``floored``.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [parameter(p) for p in base]
    ad = backward(f(leaves), leaves)

    coords = [(i, j) for i, p in enumerate(base) for j in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[k] for k in pick]

    f0 = _eval(f, base)
    res = GradCheckResult(max_rel_error=0.0, checked=0)
    noise = np.finfo(np.float64).eps * abs(f0)  # rounding in one evaluation of f

    def shifted(i, j, h):
        arrays = list(base)
        a = base[i].copy().reshape(-1)
        a[j] += h
        arrays[i] = a.reshape(base[i].shape)
        return _eval(f, arrays)

    def floor(h: float) -> float:
        return max(FLOOR_ROUNDOFF * noise / h, 1e-8)

    def smooth_diff(i, j):
        """``(slope estimate, step)`` at the first step that is stable, None on a kink."""
        for h in (eps, eps / 10, eps / 100, eps / 1000):
            d, gap = [], []
            for step in (h, h / 2, h / 4):
                fp, fm = shifted(i, j, step), shifted(i, j, -step)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    return "nonfinite"
                d.append((fp - fm) / (2 * step))
                gap.append((fp - 2 * f0 + fm) / step)
            # one-sided slopes part by f''h on smooth ground but by a constant
            # across a kink at the point itself
            scale = max(abs(d[0]), abs(gap[0]), floor(h))
            centred = abs(gap[2] - gap[0] / 4) <= 1e-3 * scale
            r1, r2 = (4 * d[1] - d[0]) / 3, (4 * d[2] - d[1]) / 3
            if centred and abs(r1 - r2) <= TOL_KINK * max(abs(r1), abs(r2)) + 100 * noise / h:
                return r1, h
        return None

    for i, j in coords:
        if not np.isfinite(f0):
            res.skipped_nonfinite += 1
            continue
        out = smooth_diff(i, j)
        if out == "nonfinite":
            res.skipped_nonfinite += 1
            continue
        if out is None:
            res.skipped_kink += 1
            continue
        g_fd, h = out
        resolution = floor(h)
        g_ad = float(ad[i].reshape(-1)[j])
        denom = max(abs(g_ad), abs(g_fd))
        if denom < resolution:
            res.floored += 1
        err = abs(g_ad - g_fd) / max(denom, resolution)
        res.errors.append(err)
        res.checked += 1
        if err >= res.max_rel_error:
            res.max_rel_error = err
            res.worst = (i, j)
    return res
