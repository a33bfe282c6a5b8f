"""Slow reference implementations used only as test oracles.

Each routine is written independently of the package internals (scalar math,
plain loops) so the fast paths are checked against a second derivation.
"""

import numpy as np


def closest_point_on_triangle_slow(p, a, b, c):
    """Closest point by checking the plane projection, all edges and corners."""
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    candidates = [a, b, c]
    # plane projection if it falls inside
    n = np.cross(b - a, c - a)
    nn = n @ n
    if nn > 0:
        q = p - ((p - a) @ n / nn) * n
        if _in_triangle(q, a, b, c):
            candidates.append(q)
    for u, v in ((a, b), (b, c), (c, a)):
        d = v - u
        t = (p - u) @ d / (d @ d)
        t = min(1.0, max(0.0, t))
        candidates.append(u + t * d)
    dists = [np.linalg.norm(p - q) for q in candidates]
    k = int(np.argmin(dists))
    return dists[k], candidates[k]


def _in_triangle(q, a, b, c):
    v0 = c - a
    v1 = b - a
    v2 = q - a
    d00 = v0 @ v0
    d01 = v0 @ v1
    d11 = v1 @ v1
    d20 = v2 @ v0
    d21 = v2 @ v1
    den = d00 * d11 - d01 * d01
    if den == 0:
        return False
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return v >= -1e-12 and w >= -1e-12 and v + w <= 1 + 1e-12


def point_to_mesh_slow(p, vertices, faces):
    """Exhaustive per-triangle scan."""
    best = np.inf
    best_cp = None
    for f in faces:
        d, cp = closest_point_on_triangle_slow(p, vertices[f[0]], vertices[f[1]],
                                               vertices[f[2]])
        if d < best:
            best = d
            best_cp = cp
    return best, best_cp


def chamfer_slow(sources, vertices, faces):
    """Brute force over all (point, triangle) pairs; mean of squared minima."""
    total = 0.0
    for p in sources:
        d, _ = point_to_mesh_slow(p, vertices, faces)
        total += d * d
    return total / len(sources)


def nearest_point_slow(p, points):
    d = [np.linalg.norm(np.asarray(p) - q) for q in points]
    k = int(np.argmin(d))
    return d[k], k


def central_difference(fun, x, step=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (fun(xp) - fun(xm)) / (2 * step)
    return g


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
