"""Orientation and in-circle predicates with a floating-point filter and exact fallback.

The filters use Shewchuk's static error bounds; whenever the floating-point
result is not certified, the determinant is re-evaluated in exact integer
arithmetic, so every returned sign is exact.
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(np.float64).eps / 2
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_INCIRCLE_BOUND = (10.0 + 96.0 * _EPS) * _EPS


def _as_ints(vals):
    """Exact integers ``n_i`` with ``v_i = n_i / 2**k`` for a shared ``k``."""
    ratios = [float(v).as_integer_ratio() for v in vals]
    k = max(d.bit_length() - 1 for _, d in ratios)
    return [n << (k - (d.bit_length() - 1)) for n, d in ratios]


def _orient_exact(a, b, c) -> int:
    ax, ay, bx, by, cx, cy = _as_ints((*a, *b, *c))
    det = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (det > 0) - (det < 0)


def _incircle_exact(a, b, c, d) -> int:
    ax, ay, bx, by, cx, cy, dx, dy = _as_ints((*a, *b, *c, *d))
    adx, ady, bdx, bdy, cdx, cdy = ax - dx, ay - dy, bx - dx, by - dy, cx - dx, cy - dy
    alift, blift, clift = adx * adx + ady * ady, bdx * bdx + bdy * bdy, cdx * cdx + cdy * cdy
    det = (alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy)
           + clift * (adx * bdy - bdx * ady))
    return (det > 0) - (det < 0)


def orient2d(a, b, c) -> int:
    """+1 if ``a, b, c`` turn counter-clockwise, -1 if clockwise, 0 if collinear (exact)."""
    return int(orient2d_many(np.asarray([a], float), np.asarray([b], float),
                             np.asarray([c], float))[0])


def orient2d_many(a, b, c) -> np.ndarray:
    left = (a[:, 0] - c[:, 0]) * (b[:, 1] - c[:, 1])
    right = (a[:, 1] - c[:, 1]) * (b[:, 0] - c[:, 0])
    det = left - right
    bound = _CCW_BOUND * 2.0 * (np.abs(left) + np.abs(right))
    sign = np.sign(det).astype(np.int64)
    unsure = np.abs(det) <= bound
    for i in np.flatnonzero(unsure):
        sign[i] = _orient_exact(a[i], b[i], c[i])
    return sign


def incircle(a, b, c, d) -> int:
    """+1 if ``d`` lies strictly inside the circle through CCW ``a, b, c``, -1 outside, 0 on it."""
    return int(incircle_many(*(np.asarray([p], float) for p in (a, b, c, d)))[0])


def incircle_many(a, b, c, d) -> np.ndarray:
    adx, ady = a[:, 0] - d[:, 0], a[:, 1] - d[:, 1]
    bdx, bdy = b[:, 0] - d[:, 0], b[:, 1] - d[:, 1]
    cdx, cdy = c[:, 0] - d[:, 0], c[:, 1] - d[:, 1]
    alift, blift, clift = adx * adx + ady * ady, bdx * bdx + bdy * bdy, cdx * cdx + cdy * cdy
    t1, t2 = bdx * cdy, cdx * bdy
    t3, t4 = cdx * ady, adx * cdy
    t5, t6 = adx * bdy, bdx * ady
    det = alift * (t1 - t2) + blift * (t3 - t4) + clift * (t5 - t6)
    perm = (alift * (np.abs(t1) + np.abs(t2)) + blift * (np.abs(t3) + np.abs(t4))
            + clift * (np.abs(t5) + np.abs(t6)))
    sign = np.sign(det).astype(np.int64)
    # twice the static bound: the lifts themselves carry rounding error
    unsure = np.abs(det) <= 2.0 * _INCIRCLE_BOUND * perm
    for i in np.flatnonzero(unsure):
        sign[i] = _incircle_exact(a[i], b[i], c[i], d[i])
    return sign


_CCW_B = 2.0 * float(_CCW_BOUND)
_INC_B = 2.0 * float(_INCIRCLE_BOUND)


def orient2d_scalar(ax, ay, bx, by, cx, cy) -> int:
    """Scalar :func:`orient2d` on plain floats (fast path for incremental algorithms)."""
    left = (ax - cx) * (by - cy)
    right = (ay - cy) * (bx - cx)
    det = left - right
    bound = _CCW_B * (abs(left) + abs(right))
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return _orient_exact((ax, ay), (bx, by), (cx, cy))


def incircle_scalar(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    """Scalar :func:`incircle` on plain floats."""
    adx, ady, bdx, bdy, cdx, cdy = ax - dx, ay - dy, bx - dx, by - dy, cx - dx, cy - dy
    alift, blift, clift = adx * adx + ady * ady, bdx * bdx + bdy * bdy, cdx * cdx + cdy * cdy
    t1, t2, t3, t4, t5, t6 = bdx * cdy, cdx * bdy, cdx * ady, adx * cdy, adx * bdy, bdx * ady
    det = alift * (t1 - t2) + blift * (t3 - t4) + clift * (t5 - t6)
    perm = (alift * (abs(t1) + abs(t2)) + blift * (abs(t3) + abs(t4))
            + clift * (abs(t5) + abs(t6)))
    bound = _INC_B * perm
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return _incircle_exact((ax, ay), (bx, by), (cx, cy), (dx, dy))
