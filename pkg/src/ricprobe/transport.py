"""The damped transport ``Q_{s,t}`` and its norm bound.

One step of the forward multiplicative scheme is::

    Q <- Q (I - Ric_Z(U_k) dt) (I - II(U_{k+1}) dl_k) (I - 1_hit P_{U_{k+1}})

where ``P_u = (u^{-1} N)(u^{-1} N)^T`` projects onto the normal direction.
The same update runs online inside the simulator and offline here on a
fully recorded path, so both routes produce identical matrices.
"""

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .geometry import TOL_BOUNDARY, ricci_z_matrix


def normal_projection(M, x, F):
    """``P_u`` at boundary frames ``F`` based at ``x``."""
    _dist, N = M.boundary(x)
    n = M.frame_coords(x, F, N)
    return n[..., :, None] * n[..., None, :]


@dataclass
class NormalProjection:
    """Rank-one projection along ``u^{-1} N`` at one boundary frame."""

    matrix: np.ndarray

    @classmethod
    def at(cls, M, x, F):
        return cls(normal_projection(M, np.asarray(x, float), np.asarray(F, float)))

    def apply(self, a):
        return self.matrix @ a


def initial_Q(M, X, F):
    """``Q_{s,s} = I - 1_{X_s in boundary} P_{U_s}``; also returns the on-boundary mask."""
    X = np.asarray(X, dtype=float)
    B, d = X.shape[0], M.dim
    Q = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    on_b = np.zeros(B, dtype=bool)
    if M.has_boundary:
        dist, _N = M.boundary(X)
        on_b = np.abs(dist) <= TOL_BOUNDARY
        if np.any(on_b):
            Q[on_b] -= normal_projection(M, X[on_b], F[on_b])
    return Q, on_b


def q_step(M, Q, X, F, Y, Fn, dl, hit, bpt, dt):
    """Advance ``Q`` over one step ``(X, F) -> (Y, Fn)``.

    ``bpt`` holds the boundary points of the rows flagged in ``hit``.
    """
    R = ricci_z_matrix(M, X, F)
    Q = Q - dt * (Q @ R)
    if np.any(hit):
        idx = np.flatnonzero(hit)
        P = normal_projection(M, Y[idx], Fn[idx])
        kap = M.second_form_scalar(bpt)
        II = kap[:, None, None] * (np.eye(M.dim) - P)
        Qh = Q[idx]
        Qh = Qh - dl[idx, None, None] * (Qh @ II)
        Q[idx] = Qh - Qh @ P
    return Q


@dataclass
class DampedTransport:
    """``Q_{s, s_k}`` at knots ``k >= s_index`` for a batch of paths.

    ``Q[..., j, :, :]`` is the matrix at knot ``s_index + j``.
    """

    s_index: int
    Q: np.ndarray

    def at(self, k):
        if k < self.s_index:
            raise PreconditionError(f"knot {k} precedes the start knot {self.s_index}")
        return self.Q[..., k - self.s_index, :, :]


def evolve_Q(path, M=None, s_index=0):
    """Evolve ``Q_{s,.}`` along fully recorded path(s) from knot ``s_index``."""
    if not path.full:
        raise PreconditionError("evolve_Q needs a fully recorded path")
    M = path.manifold if M is None else M
    single = path.X.ndim == 2
    X = path.X[None] if single else path.X
    U = path.U[None] if single else path.U
    dl = path.dl[None] if single else path.dl
    n = X.shape[1] - 1
    if not 0 <= s_index <= n:
        raise PreconditionError(f"start knot {s_index} outside 0..{n}")
    dt = path.cfg.dt
    Q, _ = initial_Q(M, X[:, s_index], U[:, s_index])
    out = np.empty((X.shape[0], n + 1 - s_index, M.dim, M.dim))
    out[:, 0] = Q
    for k in range(s_index, n):
        hit = dl[:, k] > 0
        bpt = M.boundary_point(X[hit, k + 1]) if np.any(hit) else None
        Q = q_step(M, Q, X[:, k], U[:, k], X[:, k + 1], U[:, k + 1], dl[:, k], hit, bpt, dt)
        out[:, k + 1 - s_index] = Q
    return DampedTransport(s_index, out[0] if single else out)


def op_norm(Q):
    """Spectral norm of a stack of matrices."""
    return np.linalg.norm(Q, ord=2, axis=(-2, -1))


def _bound_exponent(path, s_index, bounds):
    """``int_s^t K dr + int_s^t sigma dl`` at knots ``>= s_index`` (left-point)."""
    M, dt = path.manifold, path.cfg.dt
    X = path.X
    Kx = bounds.k(X[..., s_index:-1, :])
    dl = path.dl[..., s_index:]
    sig = np.zeros_like(dl)
    hit = dl > 0
    if np.any(hit):
        sig[hit] = bounds.s(M.boundary_point(X[..., s_index + 1:, :][hit]))
    inc = Kx * dt + sig * dl
    zero = np.zeros(inc.shape[:-1] + (1,))
    return np.concatenate([zero, np.cumsum(inc, axis=-1)], axis=-1)


@dataclass
class QBoundReport:
    margin: np.ndarray  # per path: max_k ||Q|| - bound_k
    passed: np.ndarray  # per path
    tol: np.ndarray
    annihilation: float  # max ||Q P|| over boundary-hit knots
    n_hits: int

    @property
    def fraction_passed(self):
        return float(np.mean(self.passed))

    @property
    def all_passed(self):
        return bool(np.all(self.passed))


def check_Q_bound(path, Q, bounds):
    """Check ``||Q_{s,t}|| <= exp(int K + int sigma dl)`` at every knot.

    A path passes when ``||Q|| - bound <= 1e-3 (1 + bound)`` at all knots.
    """
    s = Q.s_index
    expo = _bound_exponent(path, s, bounds)
    bound = np.exp(expo)
    norms = op_norm(Q.Q)
    tol = 1e-3 * (1.0 + bound)
    excess = norms - bound
    margin = np.max(excess, axis=-1)
    passed = np.all(excess <= tol, axis=-1)
    # boundary annihilation at hit knots
    M = path.manifold
    ann, nh = 0.0, 0
    if M.has_boundary:
        hit = path.dl[..., s:] > 0
        if np.any(hit):
            Xk = path.X[..., s + 1:, :][hit]
            Uk = path.U[..., s + 1:, :, :][hit]
            Qk = Q.Q[..., 1:, :, :][hit]
            P = normal_projection(M, Xk, Uk)
            ann = float(np.max(op_norm(Qk @ P)))
            nh = int(hit.sum())
    return QBoundReport(margin, passed, np.max(tol, axis=-1), ann, nh)
