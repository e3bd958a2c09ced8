"""Dense real linear algebra kernels for small mean-reverting systems.

Everything is built directly on numpy array arithmetic: matrix exponential
by scaling and squaring, spectral norm by power iteration, symmetric
eigendecomposition by cyclic Jacobi sweeps, pivoted Cholesky for possibly
rank-deficient covariances, and the Kronecker-form Lyapunov solver together
with an independent quadrature evaluator of the stationary covariance
integral.  Matrices are plain float64 ndarrays; sizes here are tens, not
thousands, so clarity and certifiable error bounds win over speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CholFactor",
    "HurwitzError",
    "NotPsdError",
    "OracleMismatchError",
    "PowerIterationError",
    "SingularMatrixError",
    "TOL_PSD",
    "cholesky_psd",
    "expm_norm_curve",
    "frob",
    "mat_exp",
    "sigma_quadrature",
    "solve_dense",
    "solve_lyapunov",
    "spectral_norm",
    "sym_eigs",
    "symmetrize",
]

# Relative threshold separating "zero up to roundoff" from "indefinite"
# diagonal pivots in the pivoted Cholesky.
TOL_PSD = 1e-10


class NotPsdError(ValueError):
    """Input matrix has a diagonal pivot below -TOL_PSD * ||S||."""


class HurwitzError(ValueError):
    """The spectrum of A does not have uniformly positive real parts."""


class SingularMatrixError(ValueError):
    """Gaussian elimination met a pivot that is zero up to roundoff."""


class PowerIterationError(RuntimeError):
    """Power iteration hit its iteration cap before the estimate settled."""

    def __init__(self, msg: str, last_value: float, last_vector: np.ndarray):
        super().__init__(msg)
        self.last_value = last_value
        self.last_vector = last_vector


class OracleMismatchError(RuntimeError):
    """Two independent routes to the same matrix disagree."""

    def __init__(self, msg: str, first: np.ndarray, second: np.ndarray):
        super().__init__(msg)
        self.first = first
        self.second = second


def as_square(M, name: str = "matrix") -> np.ndarray:
    """Return a float64 copy of M after checking it is square and finite."""
    A = np.array(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError(f"{name} has non-finite entries")
    return A


def frob(M: np.ndarray) -> float:
    """Frobenius norm."""
    return math.sqrt(float(np.sum(np.asarray(M, dtype=float) ** 2)))


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def mat_exp(M, t: float = 1.0) -> np.ndarray:
    """Compute exp(t*M) by scaling and squaring with a truncated series.

    The scaled matrix B = t*M / 2**s is brought to Frobenius norm <= 0.5,
    the Taylor series is summed until the next term falls below 1e-18 of
    the partial sum, and the result is squared s times.  Relative error
    stays near 1e-12 for ||t*M|| up to about 1e3.

    Raises
    ------
    OverflowError
        If the result leaves double range; Inf is never returned silently.
    """
    A = as_square(M)
    B = float(t) * A
    nrm = frob(B)
    if not math.isfinite(nrm):
        raise OverflowError("t*M is not representable in double precision")
    n = A.shape[0]
    if nrm == 0.0:
        return np.eye(n)
    s = 0 if nrm <= 0.5 else int(math.ceil(math.log2(nrm / 0.5)))
    C = B / (2.0 ** s)
    total = np.eye(n)
    term = np.eye(n)
    for k in range(1, 64):
        term = term @ C / k
        total = total + term
        if frob(term) < 1e-18 * frob(total):
            break
    else:
        raise RuntimeError("matrix exponential series failed to converge")
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(s):
            total = total @ total
            if not np.isfinite(total).all():
                raise OverflowError("matrix exponential overflowed during squaring")
    return total


def _power_iteration(G: np.ndarray, v: np.ndarray, tol: float, max_iter: int):
    """Largest eigenvalue of symmetric PSD G via power iteration on v.

    Returns (lam, v, settled).  When the top singular pair is nearly
    degenerate the increments contract like (s2/s1)^2 per step and the
    cap can be hit with the estimate still a few digits short; the caller
    decides whether that is fatal.
    """
    nv = math.sqrt(float(v @ v))
    v = v / nv
    lam = float(v @ (G @ v))
    settled = 0
    for _ in range(max_iter):
        w = G @ v
        nw = math.sqrt(float(w @ w))
        if nw == 0.0:
            return 0.0, v, True
        v = w / nw
        lam_new = float(v @ (G @ v))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            settled += 1
            if settled >= 3:
                return lam_new, v, True
        else:
            settled = 0
        lam = lam_new
    return lam, v, False


def spectral_norm(M, max_iter: int = 10_000, allow_stall: bool = False) -> float:
    """Largest singular value of M via power iteration on M^T M.

    Two deterministic start vectors are used (all ones, and a cosine
    pattern that is generically not orthogonal to any fixed subspace) and
    the larger converged estimate is returned; this guards against an
    unlucky start lying exactly in a subdominant invariant subspace.

    Parameters
    ----------
    allow_stall : bool
        Matrices whose top singular values cluster (near-identity ones,
        for instance) converge too slowly for the iteration cap.  With
        allow_stall the best available estimate is returned, accurate to
        roughly the cluster width, which is all the envelope fitters
        need.  Otherwise a stall raises PowerIterationError carrying the
        last iterate.
    """
    A = np.array(M, dtype=float)
    if A.ndim != 2:
        raise ValueError("spectral_norm expects a 2-d array")
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    k = A.shape[1]
    if k == 0 or A.shape[0] == 0:
        return 0.0
    # Scale out the magnitude so the iteration works near unit norm.
    scale = float(np.max(np.abs(A)))
    if scale == 0.0:
        return 0.0
    G = (A / scale).T @ (A / scale)
    best = 0.0
    best_vec = None
    idx = np.arange(k, dtype=float)
    for v0 in (np.ones(k), np.cos(1.7 * idx + 0.3)):
        lam, vec, settled = _power_iteration(G, v0, tol=1e-13, max_iter=max_iter)
        if lam >= best:
            best, best_vec = lam, vec
        if not settled and not allow_stall:
            raise PowerIterationError(
                f"power iteration did not settle in {max_iter} iterations",
                last_value=scale * math.sqrt(max(lam, 0.0)),
                last_vector=vec,
            )
    return scale * math.sqrt(max(best, 0.0))


def sym_eigs(S, tol: float = 1e-12):
    """All eigenvalues and eigenvectors of a symmetric matrix.

    Cyclic Jacobi sweeps are applied until the off-diagonal Frobenius mass
    drops below tol * ||S||.  Eigenvalues come back in descending order,
    eigenvectors as the matching columns of an orthogonal matrix.

    Returns
    -------
    (w, V) : (ndarray of shape (d,), ndarray of shape (d, d))
        Satisfying S @ V[:, i] = w[i] * V[:, i].
    """
    A = symmetrize(as_square(S, "symmetric input"))
    d = A.shape[0]
    V = np.eye(d)
    norm_s = frob(A)
    if norm_s == 0.0:
        return np.zeros(d), V
    for _ in range(60):
        # Sum squares of the off-diagonal part directly; the difference
        # ||A||^2 - ||diag||^2 cancels catastrophically near convergence.
        strict = np.copy(A)
        np.fill_diagonal(strict, 0.0)
        off = frob(strict)
        if off <= tol * norm_s:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(tau) + math.sqrt(1.0 + tau * tau))
                if tau < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = A[p, p], A[q, q]
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                A[p, :] = A[:, p]
                A[q, :] = A[:, q]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi sweeps did not converge")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass(frozen=True)
class CholFactor:
    """Pivoted Cholesky factor of a PSD matrix.

    ``lower`` is d-by-d lower triangular with the trailing d-rank columns
    zero, ``perm`` the pivot order, and the factor reproduces the input as
    S[perm][:, perm] == lower @ lower.T.
    """

    lower: np.ndarray
    rank: int
    perm: np.ndarray

    def correlate(self, z: np.ndarray) -> np.ndarray:
        """Map iid standard normals z (shape (..., rank)) to N(0, S)."""
        y_perm = z @ self.lower[:, : self.rank].T
        out = np.empty_like(y_perm)
        out[..., self.perm] = y_perm
        return out


def cholesky_psd(S, tol: float = TOL_PSD) -> CholFactor:
    """Diagonally pivoted Cholesky factorization of a PSD matrix.

    Pivots smaller than -tol * ||S|| raise NotPsdError; pivots that are
    zero up to that threshold terminate the factorization and determine
    the numerical rank.  The NotPsdError doubles as the certificate of a
    failed positive-definiteness check elsewhere.
    """
    A = symmetrize(as_square(S, "covariance"))
    d = A.shape[0]
    thresh = tol * frob(A)
    L = np.zeros((d, d))
    perm = np.arange(d)
    rank = d
    for k in range(d):
        dg = np.diag(A)[k:]
        j = k + int(np.argmax(dg))
        piv = A[j, j]
        if piv < -thresh:
            raise NotPsdError(
                f"matrix is not positive semidefinite (pivot {piv:.3e} "
                f"below -{thresh:.3e})"
            )
        if piv <= thresh:
            if float(np.min(dg)) < -thresh:
                raise NotPsdError("matrix is not positive semidefinite")
            rank = k
            break
        if j != k:
            A[[k, j], :] = A[[j, k], :]
            A[:, [k, j]] = A[:, [j, k]]
            L[[k, j], :k] = L[[j, k], :k]
            perm[[k, j]] = perm[[j, k]]
        L[k, k] = math.sqrt(piv)
        if k + 1 < d:
            L[k + 1:, k] = A[k + 1:, k] / L[k, k]
            A[k + 1:, k + 1:] -= np.outer(L[k + 1:, k], L[k + 1:, k])
    return CholFactor(lower=L, rank=rank, perm=perm)


def _lu_factor(K: np.ndarray, singular_exc=SingularMatrixError,
               singular_msg: str = "singular linear system"):
    """In-place partial-pivot LU; returns (LU, piv) or raises."""
    A = K.copy()
    n = A.shape[0]
    piv = np.arange(n)
    # Pivots at or below roundoff scale of the original matrix mean the
    # system is singular for our purposes, not merely ill-conditioned.
    tiny = 64.0 * np.finfo(float).eps * max(float(np.max(np.abs(A))), 1e-300)
    for k in range(n):
        j = k + int(np.argmax(np.abs(A[k:, k])))
        if abs(A[j, k]) <= tiny:
            raise singular_exc(singular_msg)
        if j != k:
            A[[k, j], :] = A[[j, k], :]
            piv[[k, j]] = piv[[j, k]]
        A[k + 1:, k] /= A[k, k]
        A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    return A, piv


def _lu_solve(LU: np.ndarray, piv: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = LU.shape[0]
    x = b[piv].astype(float)
    for k in range(1, n):
        x[k] -= LU[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - LU[k, k + 1:] @ x[k + 1:]) / LU[k, k]
    return x


def solve_dense(A, b, singular_exc=SingularMatrixError,
                singular_msg: str = "singular linear system") -> np.ndarray:
    """Solve A x = b by partial-pivot Gaussian elimination.

    One step of iterative refinement is applied, which keeps the residual
    at backward-stable level even for moderately conditioned systems.  b
    may be a vector or a matrix of stacked right-hand-side columns.
    """
    M = as_square(A)
    rhs = np.array(b, dtype=float)
    vec = rhs.ndim == 1
    B = rhs[:, None] if vec else rhs
    LU, piv = _lu_factor(M, singular_exc, singular_msg)
    X = np.column_stack([_lu_solve(LU, piv, B[:, j]) for j in range(B.shape[1])])
    R = B - M @ X
    X = X + np.column_stack([_lu_solve(LU, piv, R[:, j]) for j in range(B.shape[1])])
    return X[:, 0] if vec else X


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve A X + X A^T = Q through the Kronecker d^2-by-d^2 system.

    The vectorized system (I (x) A + A (x) I) vec(X) = vec(Q) is solved by
    partial-pivot Gaussian elimination; the solution is symmetrized and
    its residual checked against 1e-10 * ||Q||_F.

    Raises
    ------
    HurwitzError
        If the Kronecker system is singular, i.e. lambda_i + lambda_j = 0
        for some pair of eigenvalues of A ("not Hurwitz-positive").
    """
    Am = as_square(A, "A")
    Qm = as_square(Q, "Q")
    d = Am.shape[0]
    if Qm.shape[0] != d:
        raise ValueError("A and Q must have matching shapes")
    eye = np.eye(d)
    K = np.kron(eye, Am) + np.kron(Am, eye)
    x = solve_dense(K, Qm.ravel(order="F"),
                    singular_exc=HurwitzError,
                    singular_msg="not Hurwitz-positive")
    X = symmetrize(x.reshape((d, d), order="F"))
    resid = frob(Am @ X + X @ Am.T - Qm)
    qn = frob(Qm)
    if qn > 0.0 and resid > 1e-10 * qn:
        raise RuntimeError(
            f"Lyapunov residual {resid:.3e} exceeds 1e-10 * ||Q|| = {1e-10 * qn:.3e}"
        )
    return X


def expm_norm_curve(A, ts) -> np.ndarray:
    """||exp(-t A)|| for each t in ts, by warm-started power iteration.

    The top singular vector of exp(-tA) moves smoothly in t, so carrying
    the previous iterate across grid points costs a handful of matvecs
    per point.  On a stall (clustered singular values) the best estimate
    is kept; it is accurate to the cluster width, which is plenty for
    envelope fitting where the prefactor gets inflated anyway.
    """
    Am = as_square(A)
    d = Am.shape[0]
    mix = np.cos(1.7 * np.arange(d, dtype=float) + 0.3)
    v = np.ones(d) + 0.3 * mix
    v /= math.sqrt(float(v @ v))
    out = np.empty(len(ts))
    for i, t in enumerate(ts):
        E = mat_exp(Am, -float(t))
        scale = float(np.max(np.abs(E)))
        if scale == 0.0:
            out[i] = 0.0
            continue
        G = (E / scale).T @ (E / scale)
        # A breath of the fixed pattern keeps the warm start from being
        # trapped in an invariant subspace after a mode crossing.
        v = v + 1e-3 * mix
        lam, v, _ = _power_iteration(G, v, tol=1e-11, max_iter=400)
        out[i] = scale * math.sqrt(max(lam, 0.0))
    return out


def _decay_probe(A: np.ndarray):
    """Crude (K, rate) envelope for ||exp(-t A)|| used to cut off tails.

    Doubles t until the norm falls below 1e-2, then fits a safe rate and
    prefactor on a coarse grid.  Raises HurwitzError if no decay shows up.
    """
    na = spectral_norm(A, allow_stall=True)
    if na == 0.0:
        raise HurwitzError("not Hurwitz-positive")
    t = 1.0 / na
    for _ in range(80):
        nrm = expm_norm_curve(A, [t])[0]
        if nrm < 1e-2:
            break
        t *= 2.0
    else:
        raise HurwitzError("not Hurwitz-positive")
    rate = -math.log(nrm) / t
    grid = np.geomspace(1e-3 * t, 2.0 * t, 24)
    K = max(1.0, float(np.max(expm_norm_curve(A, grid) * np.exp(rate * grid))))
    return 1.2 * K, rate


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _integrate_sigma(A: np.ndarray, Q: np.ndarray, T: float, panels: int) -> np.ndarray:
    """Composite 16-node Gauss-Legendre for int_0^T exp(-sA) Q exp(-sA^T) ds."""
    w = T / panels
    # exp(-(j*w + w/2 + w/2*x) A) = P_j @ N_i with P_j = Phi^j.
    nodes = [mat_exp(A, -(0.5 * w + 0.5 * w * x)) for x in _GL_NODES]
    phi_w = mat_exp(A, -w)
    P = np.eye(A.shape[0])
    out = np.zeros_like(Q)
    for _ in range(panels):
        for N, gw in zip(nodes, _GL_WEIGHTS):
            E = P @ N
            out += (0.5 * w * gw) * (E @ Q @ E.T)
        P = P @ phi_w
    return out


def sigma_quadrature(A, D, tol: float = 1e-8, envelope=None) -> np.ndarray:
    """Stationary covariance integral evaluated by direct quadrature.

    Computes int_0^inf exp(-sA) D D^T exp(-sA^T) ds on a truncated window
    [0, T_cut] with adaptive composite Gauss-Legendre panels.  T_cut is
    chosen so the decay-envelope tail bound K^2 exp(-2 lam0 T_cut) ||DD^T||
    stays below tol * ||result||.  This is the independent cross-check for
    the Lyapunov route; the two must never be collapsed into one.

    Parameters
    ----------
    envelope : (K, lam0) pair, optional
        A certified decay envelope for ||exp(-tA)||.  When absent a crude
        internal probe is used.
    """
    Am = as_square(A, "A")
    Dm = np.array(D, dtype=float)
    if Dm.ndim != 2 or Dm.shape[0] != Am.shape[0]:
        raise ValueError("D must be d-by-m with d matching A")
    Qm = Dm @ Dm.T
    qn = frob(Qm)
    if qn == 0.0:
        return np.zeros_like(Am)
    if envelope is None:
        K, lam0 = _decay_probe(Am)
    else:
        K, lam0 = float(envelope[0]), float(envelope[1])
        if lam0 <= 0.0 or K <= 0.0:
            raise ValueError("envelope must have positive K and rate")
    tol = max(tol, 1e-13)
    T = max(1.0 / lam0, (math.log(max(K * K, 1.0)) + 5.0) / (2.0 * lam0))
    result = None
    for _ in range(8):
        # Resolve the integrand on the 1/lam0 decay scale, then refine.
        panels = max(4, int(math.ceil(2.0 * lam0 * T)))
        est = _integrate_sigma(Am, Qm, T, panels)
        for _ in range(6):
            est2 = _integrate_sigma(Am, Qm, T, 2 * panels)
            if frob(est2 - est) <= 0.3 * tol * frob(est2):
                est = est2
                break
            panels *= 2
            est = est2
        else:
            raise RuntimeError("stationary covariance quadrature did not refine")
        result = symmetrize(est)
        rn = frob(result)
        tail_flat = K * K * math.exp(-2.0 * lam0 * T) * qn
        tail_true = tail_flat / (2.0 * lam0)
        if max(tail_flat, tail_true) <= tol * rn:
            return result
        T *= 1.7
    raise RuntimeError("could not certify quadrature tail truncation")
