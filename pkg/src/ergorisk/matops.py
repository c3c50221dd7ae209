"""Dense symmetric-matrix kernels: discrete Lyapunov and Riccati solvers,
spectral radius, and controllability/stabilizability rank tests.

All routines are pure functions of their arguments and safe to call
concurrently.
"""

import numpy as np

from .errors import NotStabilizable, ShapeError, UnstableMatrix

# Spectral radius must be below 1 - STABILITY_TOL for a matrix to count as
# Schur stable; guards the Lyapunov solve near marginal stability.
STABILITY_TOL = 1e-9

# Dimension threshold between the exact Kronecker linear solve and the
# squared-power (doubling) iteration for the discrete Lyapunov equation.
_KRON_MAX_DIM = 32


def as_square(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite square float array."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite entries")
    return a


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def spectral_radius(a) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    a = as_square(a, "A")
    try:
        eig = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as err:
        # LAPACK's QR iteration gave up; report the hard cap it uses (30n).
        n = a.shape[0]
        raise np.linalg.LinAlgError(
            f"eigenvalue iteration failed to converge for {n}x{n} matrix "
            f"(LAPACK cap ~{30 * n} sweeps): {err}"
        ) from err
    return float(np.max(np.abs(eig))) if eig.size else 0.0


def is_schur_stable(a, tol: float = STABILITY_TOL) -> bool:
    return spectral_radius(a) < 1.0 - tol


def solve_discrete_lyapunov(a, v, stability_tol: float = STABILITY_TOL) -> np.ndarray:
    """Solve ``S = A S A^T + V`` for the unique symmetric solution.

    Uses the exact vectorized linear solve ``vec(S) = (I - A (x) A)^{-1} vec(V)``
    up to dimension 32 and the quadratically convergent doubling iteration
    ``S <- S + A_k S A_k^T``, ``A_k <- A_k^2`` above that.

    Args:
        a: square matrix, Schur stable (spectral radius < 1 - stability_tol).
        v: symmetric positive semidefinite matrix of matching dimension.

    Returns:
        Symmetric solution S; positive definite whenever V is.

    Raises:
        UnstableMatrix: if ``a`` is not Schur stable within tolerance.
        ShapeError: on dimension mismatch or asymmetric ``v``.
    """
    a = as_square(a, "A")
    v = as_square(v, "V")
    n = a.shape[0]
    if v.shape[0] != n:
        raise ShapeError(f"V has dimension {v.shape[0]}, expected {n}")
    if np.max(np.abs(v - v.T)) > 1e-8 * max(1.0, np.max(np.abs(v))):
        raise ShapeError("V must be symmetric")
    v = symmetrize(v)

    rho = spectral_radius(a)
    if rho >= 1.0 - stability_tol:
        raise UnstableMatrix(
            f"Lyapunov solve needs spectral radius < {1.0 - stability_tol}, got {rho:.6g}"
        )

    if n <= _KRON_MAX_DIM:
        lhs = np.eye(n * n) - np.kron(a, a)
        s = np.linalg.solve(lhs, v.reshape(-1)).reshape(n, n)
    else:
        s = v.copy()
        ak = a.copy()
        for _ in range(128):
            update = ak @ s @ ak.T
            s += update
            if np.linalg.norm(update, "fro") <= 1e-16 * max(1.0, np.linalg.norm(s, "fro")):
                break
            ak = ak @ ak
    return symmetrize(s)


def lyapunov_residual(a, s, v) -> float:
    """Frobenius norm of ``S - A S A^T - V``."""
    return float(np.linalg.norm(s - a @ s @ a.T - v, "fro"))


def dare_residual(a, b, q, r, p) -> float:
    """Frobenius norm of the fixed-point defect of the discrete Riccati equation."""
    btp = b.T @ p
    rhs = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(r + btp @ b, btp @ a) + q
    return float(np.linalg.norm(p - rhs, "fro"))


def solve_dare(a, b, q, r, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates ``P <- A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A + Q`` from
    ``P_0 = Q`` until the successive-iterate Frobenius change drops below
    ``tol * (1 + ||P||_F)``.

    Raises:
        NotStabilizable: if the iteration diverges, fails to settle within
            ``max_iter`` steps to the residual bound, or the induced gain does
            not stabilize ``A + B K``.
    """
    a = as_square(a, "A")
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    q = as_square(q, "Q")
    r = as_square(r, "R")
    n = a.shape[0]
    if b.shape[0] != n:
        raise ShapeError(f"B has {b.shape[0]} rows, expected {n}")
    if q.shape[0] != n:
        raise ShapeError(f"Q has dimension {q.shape[0]}, expected {n}")
    if r.shape[0] != b.shape[1]:
        raise ShapeError(f"R has dimension {r.shape[0]}, expected {b.shape[1]}")

    p = symmetrize(q.copy())
    converged = False
    for _ in range(max_iter):
        btp = b.T @ p
        gain_rhs = np.linalg.solve(r + btp @ b, btp @ a)
        p_next = symmetrize(a.T @ p @ a - a.T @ p @ b @ gain_rhs + q)
        change = np.linalg.norm(p_next - p, "fro")
        p = p_next
        if not np.all(np.isfinite(p)) or np.linalg.norm(p, "fro") > 1e100:
            raise NotStabilizable("Riccati iteration diverged; (A, B) looks non-stabilizable")
        if change <= tol * (1.0 + np.linalg.norm(p, "fro")):
            converged = True
            break

    residual = dare_residual(a, b, q, r, p)
    if not converged and residual > 1e-9 * (1.0 + np.linalg.norm(p, "fro")):
        raise NotStabilizable(
            f"Riccati iteration did not settle in {max_iter} steps (residual {residual:.3g})"
        )
    gain = -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    if spectral_radius(a + b @ gain) >= 1.0:
        raise NotStabilizable("Riccati solution induced a non-stabilizing gain")
    return p


def dare_gain(a, b, r, p) -> np.ndarray:
    """Feedback gain ``K = -(R + B^T P B)^{-1} B^T P A`` induced by a Riccati solution."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    btp = b.T @ p
    return -np.linalg.solve(r + btp @ b, btp @ a)


def is_controllable(a, h, tol: float = 1e-8) -> bool:
    """Rank test on the controllability matrix ``[H, AH, ..., A^{n-1}H]``.

    Rank is judged by singular values above ``tol`` times the largest one.
    Degenerate inputs (zero H) simply return False.
    """
    a = as_square(a, "A")
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h.reshape(-1, 1)
    n = a.shape[0]
    if h.shape[0] != n:
        raise ShapeError(f"H has {h.shape[0]} rows, expected {n}")
    blocks = [h]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    ctrb = np.hstack(blocks)
    sv = np.linalg.svd(ctrb, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return False
    return int(np.sum(sv > tol * sv[0])) >= n


def is_stabilizable(a, b, tol: float = 1e-8) -> bool:
    """PBH test: every eigenvalue of A on or outside the unit circle must be
    controllable through B."""
    a = as_square(a, "A")
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ShapeError(f"B has {b.shape[0]} rows, expected {n}")
    for mu in np.linalg.eigvals(a):
        if abs(mu) < 1.0 - STABILITY_TOL:
            continue
        pencil = np.hstack([a - mu * np.eye(n), b.astype(complex)])
        sv = np.linalg.svd(pencil, compute_uv=False)
        if sv[0] == 0.0 or int(np.sum(sv > tol * sv[0])) < n:
            return False
    return True
