"""Zonotope and constrained-zonotope algebra.

Sets are kept in generator form: a zonotope <c, G> is {c + G b : |b|_inf <= 1},
a constrained zonotope <c, G, A, b> additionally pins A b = b_vec.  Strips
{x : |H x - y| <= R} model linear measurements with bounded noise.

Measurement updates intersect a set with strips (over-approximate for
zonotopes, exact for constrained zonotopes), fusion intersects several sets,
and the time update propagates through the system map, adds process noise
and reduces the generator order.  Membership, hulls and centers are decided
by small dense LPs (HiGHS).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

EPS_FEAS = 1e-9
_PIVOT_TOL = 1e-10
_HITRUN_STEPS = 8


class SetsError(Exception):
    pass


class EmptySetError(SetsError):
    pass


class MembershipUndecidedError(SetsError):
    """The feasibility LP failed numerically; no boolean answer exists."""


def _vec(x, name="vector"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        x = x.reshape(-1)
    return x


def _mat(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    return M


class Zonotope:
    """<c, G> with c in R^n and G holding one generator per column."""

    __array_ufunc__ = None  # let ndarray @ Zonotope fall through to __rmatmul__

    def __init__(self, c, G):
        self.c = _vec(c, "center")
        self.G = _mat(G, "generator matrix")
        if self.G.shape[0] != self.c.shape[0]:
            raise ValueError(
                f"generator rows {self.G.shape[0]} != state dim {self.c.shape[0]}")

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def n_gen(self) -> int:
        return self.G.shape[1]

    def __add__(self, other):
        return minkowski_sum(self, other)

    def __rmatmul__(self, M):
        return linear_map(M, self)

    def __repr__(self):
        return f"Zonotope(dim={self.dim}, n_gen={self.n_gen})"


class ConsZonotope:
    """<c, G, A, b>: the factors of <c, G> restricted to A b = b_vec."""

    __array_ufunc__ = None

    def __init__(self, c, G, A, b):
        self.c = _vec(c, "center")
        self.G = _mat(G, "generator matrix")
        self.A = _mat(A, "constraint matrix")
        self.b = _vec(b, "constraint offset")
        if self.G.shape[0] != self.c.shape[0]:
            raise ValueError(
                f"generator rows {self.G.shape[0]} != state dim {self.c.shape[0]}")
        if self.A.shape[1] != self.G.shape[1]:
            raise ValueError(
                f"constraint columns {self.A.shape[1]} != factor count {self.G.shape[1]}")
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError(
                f"constraint rows {self.A.shape[0]} != offset length {self.b.shape[0]}")

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def n_gen(self) -> int:
        return self.G.shape[1]

    @property
    def n_con(self) -> int:
        return self.A.shape[0]

    def __add__(self, other):
        return minkowski_sum(self, other)

    def __rmatmul__(self, M):
        return linear_map(M, self)

    def __repr__(self):
        return f"ConsZonotope(dim={self.dim}, n_gen={self.n_gen}, n_con={self.n_con})"


AnySet = Union[Zonotope, ConsZonotope]


class Strip:
    """{x : |H x - y| <= R} componentwise, R strictly positive."""

    def __init__(self, H, y, R):
        self.H = _mat(H, "strip map")
        self.y = _vec(y, "strip offset")
        self.R = _vec(R, "strip radius")
        p = self.H.shape[0]
        if self.y.shape[0] != p or self.R.shape[0] != p:
            raise ValueError(
                f"strip rows disagree: H {p}, y {self.y.shape[0]}, R {self.R.shape[0]}")
        if np.any(self.R <= 0.0):
            raise ValueError("strip radii must be strictly positive")

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]


class SystemModel:
    """x+ = F x + w with w from the noise zonotope <0, Q>."""

    def __init__(self, F, Q):
        self.F = _mat(F, "system matrix")
        self.Q = _mat(Q, "noise generator matrix")
        n = self.F.shape[0]
        if self.F.shape[1] != n:
            raise ValueError("system matrix must be square")
        if self.Q.shape[0] != n:
            raise ValueError("noise generators must live in state space")

    @property
    def dim(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class LambdaGain:
    """One gain block per strip; block j maps strip-j residuals to states."""
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks",
                           tuple(_mat(B, "gain block") for B in self.blocks))

    @property
    def stacked(self) -> np.ndarray:
        return np.hstack(self.blocks)

    def __len__(self):
        return len(self.blocks)


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", _vec(self.w, "weights"))
        if abs(float(self.w.sum())) < 1e-300:
            raise ValueError("weights must not sum to zero")


class IntervalHull(NamedTuple):
    lower: np.ndarray
    upper: np.ndarray


def frobenius_radius(S: AnySet) -> float:
    return float(np.sqrt(np.sum(S.G ** 2)))


# --- basic algebra ---


def minkowski_sum(S1: AnySet, S2: AnySet) -> AnySet:
    if S1.dim != S2.dim:
        raise ValueError(f"dimension mismatch: {S1.dim} vs {S2.dim}")
    c = S1.c + S2.c
    G = np.hstack([S1.G, S2.G])
    c1, c2 = isinstance(S1, ConsZonotope), isinstance(S2, ConsZonotope)
    if not c1 and not c2:
        return Zonotope(c, G)
    A1 = S1.A if c1 else np.zeros((0, S1.n_gen))
    b1 = S1.b if c1 else np.zeros(0)
    A2 = S2.A if c2 else np.zeros((0, S2.n_gen))
    b2 = S2.b if c2 else np.zeros(0)
    A = np.block([[A1, np.zeros((A1.shape[0], S2.n_gen))],
                  [np.zeros((A2.shape[0], S1.n_gen)), A2]])
    return ConsZonotope(c, G, A, np.concatenate([b1, b2]))


def linear_map(M, S: AnySet) -> AnySet:
    M = _mat(M, "map")
    if M.shape[1] != S.dim:
        raise ValueError(f"map columns {M.shape[1]} != set dim {S.dim}")
    if isinstance(S, ConsZonotope):
        return ConsZonotope(M @ S.c, M @ S.G, S.A, S.b)
    return Zonotope(M @ S.c, M @ S.G)


def support(S: AnySet, l) -> float:
    """Support value max_{x in S} l.x."""
    l = _vec(l, "direction")
    if isinstance(S, Zonotope) or S.n_con == 0:
        return float(l @ S.c + np.abs(l @ S.G).sum())
    cost = -(S.G.T @ l)
    res = linprog(cost, A_eq=S.A, b_eq=S.b,
                  bounds=[(-1.0, 1.0)] * S.n_gen, method="highs")
    if res.status == 2:
        raise EmptySetError("support of an empty set")
    if res.status != 0:
        raise MembershipUndecidedError(f"support LP failed: {res.message}")
    return float(l @ S.c - res.fun)


def shuffle_generators(Z: Zonotope, rng: np.random.Generator) -> Zonotope:
    """Randomly permute the generator columns; the set is unchanged."""
    perm = rng.permutation(Z.n_gen)
    return Zonotope(Z.c.copy(), Z.G[:, perm])


# --- gain and weight computation ---


def compute_lambda(S: AnySet, strips: Sequence[Strip]) -> LambdaGain:
    """Gain minimizing ||(I - L Hbar) G||_F^2 + tr(L D L^T).

    Closed form: L = P Hbar^T (Hbar P Hbar^T + D)^-1 with P = G G^T and
    D the block-diagonal of squared strip radii; falls back to the
    pseudo-inverse when the bracket is singular.
    """
    if not strips:
        raise ValueError("need at least one strip")
    n = S.dim
    for s in strips:
        if s.dim != n:
            raise ValueError("strip dimension mismatch")
    P = S.G @ S.G.T
    Hbar = np.vstack([s.H for s in strips])
    D = np.diag(np.concatenate([s.R ** 2 for s in strips]))
    bracket = Hbar @ P @ Hbar.T + D
    rhs = P @ Hbar.T
    try:
        lam = np.linalg.solve(bracket, rhs.T).T
        if not np.all(np.isfinite(lam)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        lam = rhs @ np.linalg.pinv(bracket)
    blocks, col = [], 0
    for s in strips:
        blocks.append(lam[:, col:col + s.p])
        col += s.p
    return LambdaGain(tuple(blocks))


def compute_weights(Zs: Sequence[AnySet]) -> WeightVector:
    """Fusion weights proportional to inverse squared Frobenius radii.

    Degenerate point sets (zero radius) take all the weight.
    """
    r = np.array([np.sum(Z.G ** 2) for Z in Zs])
    tiny = r <= 1e-30
    if np.any(tiny):
        w = tiny / tiny.sum()
    else:
        w = (1.0 / r) / np.sum(1.0 / r)
    return WeightVector(w)


def _check_gain(S, strips, lam):
    if lam is None:
        return compute_lambda(S, strips)
    if len(lam) != len(strips):
        raise ValueError(f"{len(lam)} gain blocks for {len(strips)} strips")
    for B, s in zip(lam.blocks, strips):
        if B.shape != (S.dim, s.p):
            raise ValueError(f"gain block shape {B.shape} != ({S.dim}, {s.p})")
    return lam


# --- strip intersections ---


def intersect_zono_strips(Z: Zonotope, strips: Sequence[Strip],
                          lam: LambdaGain | None = None) -> Zonotope:
    """Over-approximation of Z intersected with all strips."""
    lam = _check_gain(Z, strips, lam)
    n = Z.dim
    M = np.eye(n)
    c = Z.c.copy()
    tails = []
    for s, L in zip(strips, lam.blocks):
        M = M - L @ s.H
        c = c + L @ (s.y - s.H @ Z.c)
        tails.append(L * s.R[None, :])
    return Zonotope(c, np.hstack([M @ Z.G] + tails))


def intersect_conszono_strips(C: ConsZonotope, strips: Sequence[Strip],
                              lam: LambdaGain | None = None) -> ConsZonotope:
    """Exact intersection of C with all strips.

    The gain only reshapes the representation; the encoded set is the true
    intersection for every choice.
    """
    lam = _check_gain(C, strips, lam)
    n, e, nc = C.dim, C.n_gen, C.n_con
    M = np.eye(n)
    c = C.c.copy()
    tails = []
    for s, L in zip(strips, lam.blocks):
        M = M - L @ s.H
        c = c + L @ (s.y - s.H @ C.c)
        tails.append(L * s.R[None, :])
    G = np.hstack([M @ C.G] + tails)

    p_total = sum(s.p for s in strips)
    A = np.zeros((nc + p_total, e + p_total))
    b = np.zeros(nc + p_total)
    A[:nc, :e] = C.A
    b[:nc] = C.b
    row = nc
    col = e
    for s in strips:
        A[row:row + s.p, :e] = s.H @ C.G
        A[row:row + s.p, col:col + s.p] = -np.diag(s.R)
        b[row:row + s.p] = s.y - s.H @ C.c
        row += s.p
        col += s.p
    return ConsZonotope(c, G, A, b)


# --- fused intersections ---


def intersect_zonos_weighted(Zs: Sequence[Zonotope],
                             weights: WeightVector) -> Zonotope:
    """Weighted fusion of several zonotopes; contains their intersection."""
    if len(Zs) != weights.w.shape[0]:
        raise ValueError(f"{len(Zs)} sets for {weights.w.shape[0]} weights")
    sw = float(weights.w.sum())
    c = sum(wj * Z.c for wj, Z in zip(weights.w, Zs)) / sw
    G = np.hstack([wj * Z.G for wj, Z in zip(weights.w, Zs)]) / sw
    return Zonotope(c, G)


def intersect_conszonos(Cs: Sequence[ConsZonotope]) -> ConsZonotope:
    """Exact intersection of several constrained zonotopes."""
    if not Cs:
        raise ValueError("need at least one set")
    if len(Cs) == 1:
        return Cs[0]
    n = Cs[0].dim
    for C in Cs:
        if C.dim != n:
            raise ValueError("dimension mismatch in fusion")
    gens = [C.n_gen for C in Cs]
    cons = [C.n_con for C in Cs]
    e_total = sum(gens)
    rows = sum(cons) + (len(Cs) - 1) * n
    G = np.zeros((n, e_total))
    G[:, :gens[0]] = Cs[0].G
    A = np.zeros((rows, e_total))
    b = np.zeros(rows)
    row = 0
    col = 0
    for C in Cs:
        A[row:row + C.n_con, col:col + C.n_gen] = C.A
        b[row:row + C.n_con] = C.b
        row += C.n_con
        col += C.n_gen
    col = gens[0]
    for C in Cs[1:]:
        A[row:row + n, :gens[0]] = Cs[0].G
        A[row:row + n, col:col + C.n_gen] = -C.G
        b[row:row + n] = C.c - Cs[0].c
        row += n
        col += C.n_gen
    return ConsZonotope(Cs[0].c.copy(), G, A, b)


# --- order reduction ---


def _box_smallest(M: np.ndarray, n_box: int) -> np.ndarray:
    """Replace the n_box lowest-scoring columns by their interval box.

    Score |g|_1 - |g|_inf is small for short or nearly axis-aligned columns,
    which cost the least to over-approximate.
    """
    if n_box <= 0:
        return M
    scores = np.abs(M).sum(axis=0) - np.abs(M).max(axis=0)
    order = np.argsort(scores, kind="stable")
    boxed = np.sort(order[:n_box])
    kept = np.sort(order[n_box:])
    D = np.diag(np.abs(M[:, boxed]).sum(axis=1))
    return np.hstack([M[:, kept], D])


def reduce_order(Z: Zonotope, q: int) -> Zonotope:
    """Over-approximate Z with at most dim*q generators."""
    if q < 1:
        raise ValueError("target order must be >= 1")
    n, e = Z.dim, Z.n_gen
    if e <= n * q:
        return Z
    return Zonotope(Z.c.copy(), _box_smallest(Z.G, e - n * (q - 1)))


def reduce_generators_cons(G: np.ndarray, A: np.ndarray, q: int):
    """Joint generator reduction for a constrained set, without touching b.

    Boxing happens on the stacked [G; A] columns, so it is usable when the
    offsets b are not available in the clear. The factor budget is
    dim*q + n_con: one factor per constraint plus the plain zonotope budget.
    """
    if q < 1:
        raise ValueError("target order must be >= 1")
    G, A = _mat(G), _mat(A)
    n, e = G.shape
    nc = A.shape[0]
    if e <= n * q + nc:
        return G, A
    lifted = _box_smallest(np.vstack([G, A]), e - n * (q - 1))
    return lifted[:n], lifted[n:]


def _eliminate_one(c, G, A, b):
    """Solve one constraint for one factor and substitute it away.

    Dropping the solved factor's box bound makes the result a superset.
    The pivot whose solved-factor interval enclosure sticks out of the box
    the least is chosen (zero overshoot means the elimination is exact).
    """
    nc, e = A.shape
    absA = np.abs(A)
    best = None
    for r in range(nc):
        row_sum = absA[r].sum()
        for cc in range(e):
            alpha = absA[r, cc]
            if alpha <= _PIVOT_TOL:
                continue
            mid = abs(b[r]) / alpha
            rad = (row_sum - alpha) / alpha
            overshoot = max(0.0, mid + rad - 1.0)
            key = (overshoot, -alpha)
            if best is None or key < best[0]:
                best = (key, r, cc)
    if best is None:
        raise EmptySetError("constraints inconsistent beyond pivot tolerance")
    _, r, cc = best
    alpha = A[r, cc]
    ratio = b[r] / alpha
    c2 = c + G[:, cc] * ratio
    G2 = G - np.outer(G[:, cc], A[r]) / alpha
    A2 = A - np.outer(A[:, cc], A[r]) / alpha
    b2 = b - A[:, cc] * ratio
    keep_cols = np.arange(e) != cc
    keep_rows = np.arange(nc) != r
    return c2, G2[:, keep_cols], A2[np.ix_(keep_rows, keep_cols)], b2[keep_rows]


def _drop_null_rows(A, b):
    null = np.abs(A).max(axis=1, initial=0.0) <= _PIVOT_TOL
    if not np.any(null):
        return A, b
    if np.any(np.abs(b[null]) > EPS_FEAS):
        raise EmptySetError("zero constraint row with nonzero offset")
    return A[~null], b[~null]


def reduce_order_cons(C: ConsZonotope, q: int, max_constraints: int) -> ConsZonotope:
    """Full plaintext reduction: generator boxing, then constraint elimination
    until at most max_constraints rows remain. Result contains C."""
    G, A = reduce_generators_cons(C.G, C.A, q)
    c, b = C.c.copy(), C.b.copy()
    A, b = _drop_null_rows(A, b)
    while A.shape[0] > max_constraints:
        c, G, A, b = _eliminate_one(c, G, A, b)
        A, b = _drop_null_rows(A, b)
    return ConsZonotope(c, G, A, b)


# --- membership, hulls, centers ---


def _residual_lp(G, A, d_x, d_c):
    """min t s.t. |G beta - d_x| <= t, |A beta - d_c| <= t, |beta| <= 1."""
    e = G.shape[1]
    blocks = []
    rhs = []
    for M, d in ((G, d_x), (A, d_c)):
        if M.shape[0]:
            ones = np.ones((M.shape[0], 1))
            blocks.append(np.hstack([M, -ones]))
            rhs.append(d)
            blocks.append(np.hstack([-M, -ones]))
            rhs.append(-d)
    cost = np.zeros(e + 1)
    cost[-1] = 1.0
    res = linprog(cost,
                  A_ub=np.vstack(blocks) if blocks else None,
                  b_ub=np.concatenate(rhs) if rhs else None,
                  bounds=[(-1.0, 1.0)] * e + [(0.0, None)],
                  method="highs")
    if res.status != 0:
        raise MembershipUndecidedError(f"feasibility LP failed: {res.message}")
    return float(res.fun)


def contains(S: AnySet, x, eps: float = EPS_FEAS) -> bool:
    """LP membership test; raises MembershipUndecidedError on solver failure."""
    x = _vec(x, "point")
    if x.shape[0] != S.dim:
        raise ValueError(f"point dim {x.shape[0]} != set dim {S.dim}")
    if isinstance(S, ConsZonotope):
        A, b = S.A, S.b
    else:
        A, b = np.zeros((0, S.n_gen)), np.zeros(0)
    return bool(_residual_lp(S.G, A, x - S.c, b) <= eps)


def is_empty(S: AnySet, eps: float = EPS_FEAS) -> bool:
    if isinstance(S, Zonotope) or S.n_con == 0:
        return False
    return _residual_lp(np.zeros((0, S.n_gen)), S.A, np.zeros(0), S.b) > eps


def interval_hull(S: AnySet) -> IntervalHull:
    """Componentwise tight axis-aligned bounds."""
    if isinstance(S, Zonotope) or S.n_con == 0:
        half = np.abs(S.G).sum(axis=1)
        return IntervalHull(S.c - half, S.c + half)
    if is_empty(S):
        raise EmptySetError("interval hull of an empty set")
    lo = np.empty(S.dim)
    hi = np.empty(S.dim)
    bounds = [(-1.0, 1.0)] * S.n_gen
    for i in range(S.dim):
        for sign, target in ((1.0, lo), (-1.0, hi)):
            res = linprog(sign * S.G[i], A_eq=S.A, b_eq=S.b,
                          bounds=bounds, method="highs")
            if res.status != 0:
                raise MembershipUndecidedError(f"hull LP failed: {res.message}")
            target[i] = S.c[i] + sign * res.fun
    return IntervalHull(lo, hi)


def _factor_chebyshev(C: ConsZonotope):
    """Largest ball in the factor polytope {A b = b_vec, |b|_inf <= 1}.

    Returns (factor point, radius).
    """
    e = C.n_gen
    eye = np.eye(e)
    ones = np.ones((e, 1))
    A_ub = np.vstack([np.hstack([eye, ones]), np.hstack([-eye, ones])])
    b_ub = np.ones(2 * e)
    cost = np.zeros(e + 1)
    cost[-1] = -1.0
    A_eq = np.hstack([C.A, np.zeros((C.n_con, 1))]) if C.n_con else None
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq,
                  b_eq=C.b if C.n_con else None,
                  bounds=[(None, None)] * e + [(0.0, 1.0)],
                  method="highs")
    if res.status == 2:
        raise EmptySetError("chebyshev center of an empty set")
    if res.status != 0:
        raise MembershipUndecidedError(f"center LP failed: {res.message}")
    return res.x[:e], float(res.x[e])


def chebyshev_center(S: AnySet) -> np.ndarray:
    """Point estimate: image of the factor polytope's deepest point."""
    if isinstance(S, Zonotope) or S.n_con == 0:
        return S.c.copy()
    beta, _ = _factor_chebyshev(S)
    return S.c + S.G @ beta


def sample_point(S: AnySet, rng: np.random.Generator) -> np.ndarray:
    """A member of S; uniform for zonotope factors, hit-and-run otherwise."""
    if isinstance(S, Zonotope) or S.n_con == 0:
        beta = rng.uniform(-1.0, 1.0, S.n_gen)
        return S.c + S.G @ beta
    beta, _ = _factor_chebyshev(S)
    N = null_space(S.A)
    if N.shape[1]:
        for _ in range(_HITRUN_STEPS):
            d = N @ rng.normal(size=N.shape[1])
            norm = np.linalg.norm(d)
            if norm < 1e-14:
                continue
            d /= norm
            mask = np.abs(d) > 1e-12
            if not np.any(mask):
                continue
            t1 = (-1.0 - beta[mask]) / d[mask]
            t2 = (1.0 - beta[mask]) / d[mask]
            t_lo = np.max(np.minimum(t1, t2))
            t_hi = np.min(np.maximum(t1, t2))
            if t_hi <= t_lo:
                continue
            beta = beta + rng.uniform(t_lo, t_hi) * d
    return S.c + S.G @ beta


# --- time update ---


def time_update(S: AnySet, model: SystemModel, q: int) -> AnySet:
    """Propagate through the dynamics, add process noise, reduce order.

    Constrained sets only get the joint generator reduction here; constraint
    elimination is a separate, offsets-aware step (reduce_order_cons).
    """
    if model.dim != S.dim:
        raise ValueError(f"model dim {model.dim} != set dim {S.dim}")
    moved = linear_map(model.F, S)
    summed = minkowski_sum(moved, Zonotope(np.zeros(S.dim), model.Q))
    if isinstance(summed, ConsZonotope):
        G, A = reduce_generators_cons(summed.G, summed.A, q)
        return ConsZonotope(summed.c, G, A, summed.b)
    return reduce_order(summed, q)
