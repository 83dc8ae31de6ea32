"""Active-set solver for Lasso-penalized weighted least squares.

The problem is posed in Gram form,

    minimize  0.5 x'Gx - b'x + lam * sum_{j penalized} |x_j|,

with ``G = f' W f / n`` and ``b = f' W z / n`` for working response ``z`` and
weights ``W``. Iterates move between sign-consistent solutions of the
equality-constrained problem on the active set: a coordinate enters when its
correlation exceeds ``lam`` and leaves when its sign would flip. Each move
strictly lowers the objective, so the iteration terminates.

Solves on the active set go through a QR factorization of the active block of
``G`` that is updated one row/column at a time, and can be kept across calls
that share the same ``G``.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import qr, qr_delete, qr_insert, solve_triangular

JITTER = 1e-10


class ActiveGramQR:
    """QR factors of ``G[A][:, A]`` for a changing index list ``A``."""

    def __init__(self, gram: np.ndarray):
        self.gram = gram
        self.active: list[int] = []
        self.q = None
        self.r = None
        self.jittered = False

    def _rebuild(self):
        a = self.active
        if not a:
            self.q = self.r = None
            return
        block = self.gram[np.ix_(a, a)]
        self.q, self.r = qr(block)
        if self._rank_deficient():
            block = block + JITTER * max(1.0, float(np.max(np.diag(block)))) * np.eye(len(a))
            self.q, self.r = qr(block)
            self.jittered = True

    def _rank_deficient(self) -> bool:
        d = np.abs(np.diag(self.r))
        return bool(d.min() <= 1e-12 * max(d.max(), 1.0))

    def add(self, j: int) -> None:
        if self.q is None or self.jittered:
            self.active.append(j)
            self._rebuild()
            return
        k = len(self.active)
        a = self.active
        col = self.gram[a, j]
        q, r = qr_insert(self.q, self.r, col, k, which="col", check_finite=False)
        row = self.gram[j, a + [j]]
        self.q, self.r = qr_insert(q, r, row, k, which="row", check_finite=False)
        self.active.append(j)
        if self._rank_deficient():
            self._rebuild()

    def remove(self, j: int) -> None:
        k = self.active.index(j)
        self.active.pop(k)
        if not self.active or self.jittered:
            self._rebuild()
            return
        q, r = qr_delete(self.q, self.r, k, 1, which="row", check_finite=False)
        self.q, self.r = qr_delete(q, r, k, 1, which="col", check_finite=False)

    def sync(self, wanted) -> None:
        """Make the active list equal to ``wanted`` (order of survivors kept)."""
        wanted = list(wanted)
        ws = set(wanted)
        for j in [j for j in self.active if j not in ws]:
            self.remove(j)
        have = set(self.active)
        for j in wanted:
            if j not in have:
                self.add(j)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve_triangular(self.r, self.q.T @ rhs, check_finite=False)


def lasso_objective(gram, b, lam, penalized, x) -> float:
    return float(0.5 * x @ gram @ x - b @ x + lam * np.abs(x[penalized]).sum())


def solve_gram_lasso(
    gram: np.ndarray,
    b: np.ndarray,
    lam: float,
    penalized: np.ndarray,
    x0: np.ndarray | None = None,
    factor: ActiveGramQR | None = None,
    tol: float = 1e-12,
    max_steps: int | None = None,
):
    """Minimize 0.5 x'Gx - b'x + lam * ||x_penalized||_1 exactly.

    Returns ``(x, factor)``; pass ``factor`` back in on the next call with the
    same ``gram`` to reuse the factorization. ``x0`` seeds the active set.
    """
    m = b.shape[0]
    penalized = np.asarray(penalized, dtype=bool)
    free = [j for j in range(m) if not penalized[j]]
    x = np.zeros(m) if x0 is None else np.array(x0, dtype=float)
    theta = np.where(penalized, np.sign(x), 0.0)
    if factor is None or factor.gram is not gram:
        factor = ActiveGramQR(gram)
    start = free + [j for j in range(m) if penalized[j] and x[j] != 0.0]
    factor.sync(start)
    scale = max(1.0, float(np.max(np.abs(b))))
    tol = tol * scale
    if max_steps is None:
        max_steps = 100 + 20 * m

    for _ in range(max_steps):
        a = factor.active
        ia = np.array(a)
        target = factor.solve(b[ia] - lam * theta[ia])
        cur = x[ia]
        pen_a = penalized[ia]
        flips = pen_a & (np.sign(target) != theta[ia])
        if flips.any():
            # discrete line search over the sign changes along cur -> target
            direction = target - cur
            with np.errstate(divide="ignore", invalid="ignore"):
                cross = cur / (cur - target)
            ts = {1.0: []}
            for k in np.flatnonzero(flips):
                if cur[k] != 0.0 and 0.0 < cross[k] < 1.0:
                    ts.setdefault(float(cross[k]), []).append(k)
            best = None
            for tstep, hits in ts.items():
                new = cur + tstep * direction
                new[hits] = 0.0
                cand = x.copy()
                cand[ia] = new
                val = lasso_objective(gram, b, lam, penalized, cand)
                if best is None or val < best[0]:
                    best = (val, new)
            new = best[1]
            x[ia] = new
            for k in range(len(a) - 1, -1, -1):
                if not pen_a[k]:
                    continue
                j = a[k]
                if new[k] == 0.0:
                    theta[j] = 0.0
                    factor.remove(j)
                else:
                    theta[j] = np.sign(new[k])
            continue
        x[ia] = target
        c = b - gram @ x
        inactive = penalized & (x == 0.0)
        inactive[ia] = False
        if not inactive.any():
            return x, factor
        cand = np.where(inactive, np.abs(c), -np.inf)
        j = int(np.argmax(cand))
        if cand[j] - lam <= tol:
            return x, factor
        theta[j] = np.sign(c[j])
        factor.add(j)
    return x, factor
