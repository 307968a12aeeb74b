"""Independent reference implementations used by the tests.

Everything here is plain Python over exact rationals so that ties are
decided exactly and no code is shared with the package.
"""

from fractions import Fraction


def _exact(points):
    return [tuple(Fraction(float(c)) for c in p) for p in points]


def _sq(a, b):
    return sum((x - y) * (x - y) for x, y in zip(a, b))


def knn_oracle(points, ids, k):
    """For each node: neighbors sorted by (squared distance, id), first min(k, N-1)."""
    pts = _exact(points)
    n = len(pts)
    kk = min(k, n - 1)
    out = []
    for i in range(n):
        cand = sorted((_sq(pts[i], pts[j]), ids[j], j) for j in range(n) if j != i)
        out.append([j for _, _, j in cand[:max(kk, 0)]])
    return out


def _best(cands, score, pts, ids):
    top = max(score[c] for c in cands)
    tied = [c for c in cands if score[c] == top]
    return min(tied, key=lambda c: (pts[c][0], pts[c][1], pts[c][2], ids[c]))


def fps_oracle(points, ids, m):
    """Greedy max-min selection seeded at the point farthest from the centroid."""
    pts = _exact(points)
    n = len(pts)
    centroid = tuple(sum(p[d] for p in pts) / n for d in range(3))
    seed_score = {i: _sq(pts[i], centroid) for i in range(n)}
    chosen = [_best(range(n), seed_score, pts, ids)]
    while len(chosen) < m:
        rest = [i for i in range(n) if i not in chosen]
        score = {i: min(_sq(pts[i], pts[c]) for c in chosen) for i in rest}
        chosen.append(_best(rest, score, pts, ids))
    return chosen


def random_case(rng, max_n=8):
    """Random point set: half the time on a tiny integer grid (many exact ties)."""
    n = int(rng.integers(1, max_n + 1))
    if rng.random() < 0.5:
        pts = rng.integers(0, 3, size=(n, 3)).astype(float)
    else:
        pts = rng.normal(size=(n, 3))
    ids = [int(v) for v in rng.permutation(100)[:n]]
    return pts, ids


def rmse_oracle(pred, label):
    import math
    t = len(pred)
    return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(pred, label)) / t)
