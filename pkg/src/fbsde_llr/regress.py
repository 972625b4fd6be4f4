"""Kernel-weighted local linear regression with a matrix-free CG solver.

For an anchor x_m inside a particle cloud {X_j}, the gradient estimate comes
from weighted ridge least squares on the affine model y_j ~ a0 + D_j . a_x,
D_j = X_j - x_m:

    (D~^T W D~ + lambda I) alpha = D~^T W y,     D~ = [1 | D].

The normal operator is never materialized: one application costs O(M d)
(two passes over the displacements), and the system is solved by conjugate
gradient. A batched variant solves all M anchors of a level simultaneously
with two M x d GEMMs per CG iteration, which is what the backward pass uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNeighborhoodError, InvalidParameterError
from .model import apply_diffusion_transpose

# weights below this (after normalization to sum 1) are not counted as
# effective neighbors in diagnostics
WEIGHT_COUNT_THRESHOLD = 1e-8


# ---------------------------------------------------------------------------
# Kernels, bandwidths, weights
# ---------------------------------------------------------------------------

def kernel_value(kernel: str, r: np.ndarray) -> np.ndarray:
    """Evaluate the kernel profile at scaled distances r >= 0."""
    r = np.asarray(r, dtype=float)
    if kernel == "gaussian":
        return np.exp(-r ** 2)
    if kernel == "epanechnikov":
        return np.maximum(0.0, 1.0 - r ** 2)
    raise InvalidParameterError(f"unknown kernel {kernel!r}")


def bandwidth_from_distances(distances: np.ndarray, rule: str, dt: float,
                             c: float = 1.0) -> float:
    """Bandwidth for one anchor given its distances to all particles.

    Rules: "max_distance" (eps = max_j ||D_j||, the default), "scaled_sqrt_dt"
    (eps = c sqrt(dt)), "fixed" (eps = c literally).
    """
    distances = np.asarray(distances, dtype=float)
    if rule == "max_distance":
        eps = float(np.max(distances))
        if eps <= 0.0:
            raise DegenerateNeighborhoodError(
                "max-distance bandwidth is zero: all particles coincide "
                "with the anchor")
        return eps
    if rule == "scaled_sqrt_dt":
        if dt <= 0:
            raise InvalidParameterError(
                f"scaled_sqrt_dt bandwidth needs dt > 0, got {dt}")
        return c * float(np.sqrt(dt))
    if rule == "fixed":
        if c <= 0:
            raise DegenerateNeighborhoodError(
                f"fixed bandwidth must be > 0, got {c}")
        return float(c)
    raise InvalidParameterError(f"unknown bandwidth rule {rule!r}")


def weights_from_distances(distances: np.ndarray, bandwidth: float,
                           kernel: str) -> np.ndarray:
    """Normalized kernel weights w_j = K(d_j / eps) / sum_i K(d_i / eps)."""
    distances = np.asarray(distances, dtype=float)
    if not np.all(np.isfinite(distances)) or np.any(distances < 0):
        raise InvalidParameterError("distances must be finite and >= 0")
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise DegenerateNeighborhoodError(
            f"bandwidth must be finite and > 0, got {bandwidth}")
    raw = kernel_value(kernel, distances / bandwidth)
    total = raw.sum()
    if total <= 0.0:
        raise DegenerateNeighborhoodError(
            "all kernel weights vanished (every particle is outside the "
            "kernel support); increase the bandwidth")
    return raw / total


def _anchor_distances(anchor_index: int, positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    m = positions.shape[0]
    if m < 2:
        raise InvalidParameterError(f"need M >= 2 particles, got {m}")
    if not 0 <= anchor_index < m:
        raise InvalidParameterError(
            f"anchor_index {anchor_index} outside [0, {m})")
    return np.sqrt(np.sum((positions - positions[anchor_index]) ** 2,
                          axis=1))


def compute_weights(anchor_index: int, positions: np.ndarray, eps: float,
                    kernel: str) -> np.ndarray:
    """Normalized kernel weights of every particle around one anchor.

    w_j = K(||X_j - X_anchor|| / eps) / sum_i K(...); the anchor itself is
    included (distance 0) and carries the maximal weight.
    """
    try:
        return weights_from_distances(_anchor_distances(anchor_index,
                                                        positions),
                                      eps, kernel)
    except DegenerateNeighborhoodError as exc:
        raise DegenerateNeighborhoodError(
            f"anchor {anchor_index}: {exc}") from None


def bandwidth(anchor_index: int, positions: np.ndarray, rule: str,
              dt: float, c: float = 1.0) -> float:
    """Kernel length scale for one anchor under the configured rule."""
    try:
        return bandwidth_from_distances(
            _anchor_distances(anchor_index, positions), rule, dt, c)
    except DegenerateNeighborhoodError as exc:
        raise DegenerateNeighborhoodError(
            f"anchor {anchor_index}: {exc}") from None


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    """(M, M) Euclidean distances between ensemble members."""
    sq = np.sum(positions ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (positions @ positions.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


# ---------------------------------------------------------------------------
# Normal operator and CG
# ---------------------------------------------------------------------------

def normal_operator_apply(displacements: np.ndarray, weights: np.ndarray,
                          ridge_lambda: float, v: np.ndarray) -> np.ndarray:
    """Apply (D~^T W D~ + lambda I) to v = (v0, v_x) without forming it.

    beta_j = w_j (v0 + D_j . v_x); the output is
    (sum_j beta_j + lambda v0, sum_j beta_j D_j + lambda v_x).
    """
    d_mat = np.asarray(displacements, dtype=float)
    w = np.asarray(weights, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != (d_mat.shape[1] + 1,):
        raise InvalidParameterError(
            f"v has shape {v.shape}, expected ({d_mat.shape[1] + 1},)")
    beta = w * (v[0] + d_mat @ v[1:])
    out = np.empty_like(v)
    out[0] = beta.sum() + ridge_lambda * v[0]
    out[1:] = d_mat.T @ beta + ridge_lambda * v[1:]
    return out


@dataclass
class RegressionOutput:
    """Result of one local linear fit.

    ``alpha`` is the intercept (kept for diagnostics; the value update does
    not use it) and ``alpha_x`` the gradient estimate. ``converged`` is False
    when CG stopped at cg_maxiter without meeting cg_tol; alpha/alpha_x are
    then the best (last) iterate rather than an exception — the caller
    decides whether a sloppy gradient is fatal.
    """

    alpha: float               # intercept
    alpha_x: np.ndarray        # (d,) gradient estimate
    iterations: int
    residual_norm: float
    effective_weight_count: int
    converged: bool = True
    bandwidth: float = float("nan")
    ridge_lambda: float = float("nan")


def auto_ridge_lambda(weights: np.ndarray, sq_distances: np.ndarray,
                      dim: int) -> float:
    """Default ridge scale 1e-8 * sum_j w_j ||D_j||^2 / d."""
    return 1e-8 * float(np.dot(weights, sq_distances)) / dim


def _batch_operator(p_pos, q_pos, w_mat, lams, v0, vx):
    """Normal operator applied anchor-wise to a batch of vectors.

    p_pos: (M, d) particles; q_pos: (A, d) anchors; w_mat: (A, M) weights;
    lams: (A,); v0: (A,); vx: (A, d). Displacements D^a_j = P_j - Q_a are
    never formed: the two GEMMs P @ vx^T and beta @ P carry all the work.
    """
    u = p_pos @ vx.T                              # (M, A)
    s = np.einsum("ad,ad->a", q_pos, vx)          # (A,)
    t_mat = u.T + (v0 - s)[:, None]               # (A, M)
    beta = w_mat * t_mat                          # (A, M)
    beta_sum = beta.sum(axis=1)                   # (A,)
    out0 = beta_sum + lams * v0
    outx = beta @ p_pos - beta_sum[:, None] * q_pos + lams[:, None] * vx
    return out0, outx


def _shared_gram_inverse(p_pos, lams):
    """Inverse of the unweighted uncentered Gram, shared across anchors.

    B = [1 P] is the uncentered design over all particles; G = B^T B + dI
    with d matched to the typical ridge. Each anchor's centered normal
    matrix is a shear-conjugate of a weighted version of G, and normalized
    kernel weights are bounded above and below on the sampled cloud, so
    G^-1 (shear-conjugated per anchor) is a spectrally-equivalent
    preconditioner for every anchor at once.
    """
    m, d = p_pos.shape
    trace_scale = (m + float(np.einsum("md,md->", p_pos, p_pos))) / (d + 1)
    delta = max(float(np.mean(lams)) * m, 1e-12 * trace_scale, 1e-300)
    try:
        if d + 1 > 2 * m:
            # tall regime: work with the M x M outer Gram S = B B^T + dI.
            # Exact Woodbury would divide an (I - B^T S^-1 B) cancellation
            # by the tiny d; instead approximate G^-1 on range(B^T) by
            # B^T S^-2 B and give the null space the benign scale 1/trace,
            # which PCG never needs to resolve (residuals live in the range)
            b_mat = np.concatenate([np.ones((m, 1)), p_pos], axis=1)
            small = b_mat @ b_mat.T
            small[np.diag_indices(m)] += delta
            small_inv = np.linalg.inv(small)
            # fused apply: P~^-1 v = v/trace + (v B^T) W with
            # W = S^-1 (S^-1 B - B/trace); two GEMMs per application
            w_fold = small_inv @ (small_inv @ b_mat - b_mat / trace_scale)
            return ("woodbury", b_mat, w_fold, trace_scale)
        col_sums = p_pos.sum(axis=0)
        gram = np.empty((d + 1, d + 1))
        gram[0, 0] = m
        gram[0, 1:] = col_sums
        gram[1:, 0] = col_sums
        gram[1:, 1:] = p_pos.T @ p_pos
        gram[np.diag_indices(d + 1)] += delta
        return ("dense", np.linalg.inv(gram))
    except np.linalg.LinAlgError:
        return None


def _apply_precond(g_inv, q_pos, r0, rx):
    """Per-anchor preconditioner: shear G^-1 into anchor-centered coords.

    Centered coordinates at anchor q relate to uncentered ones by the shear
    R_q = [[1, -q^T], [0, I]]; the preconditioner R_q^-1 G^-1 R_q^-T costs
    two rank-1 shifts plus one shared (d+1)x(d+1) product.
    """
    if g_inv is None:
        return r0, rx
    shifted = rx + q_pos * r0[:, None]
    stacked = np.concatenate([r0[:, None], shifted], axis=1)   # (A, d+1)
    if g_inv[0] == "woodbury":
        _, b_mat, w_fold, null_scale = g_inv
        y = stacked / null_scale + (stacked @ b_mat.T) @ w_fold
    else:
        y = stacked @ g_inv[1]                                 # symmetric G
    z0 = y[:, 0] + np.einsum("ad,ad->a", q_pos, y[:, 1:])
    return z0, np.ascontiguousarray(y[:, 1:])


def _cg_batch(p_pos, q_pos, w_mat, lams, responses, cg_tol, cg_maxiter):
    """Solve all anchors' ridge systems by masked batched CG.

    Starts from the warm point (weighted response mean, zero gradient) and
    preconditions with the shared uncentered Gram; the convergence target
    for each anchor is cg_tol * ||initial residual|| on the true residual.
    Anchors still above target at cg_maxiter keep their last iterate and are
    reported unconverged. Returns (alpha0 (A,), alphax (A, d), iters (A,),
    resnorm (A,), converged (A,) bool).
    """
    a_n, m = w_mat.shape
    d = p_pos.shape[1]
    b0 = w_mat @ responses                        # (A,)
    bx = (w_mat * responses[None, :]) @ p_pos - b0[:, None] * q_pos
    g_inv = _shared_gram_inverse(p_pos, lams)

    x0 = b0.copy()
    xx = np.zeros((a_n, d))
    o0, ox = _batch_operator(p_pos, q_pos, w_mat, lams, x0, xx)
    r0 = b0 - o0
    rx = bx - ox
    rr = r0 ** 2 + np.einsum("ad,ad->a", rx, rx)  # true residual, squared
    rr_target = np.maximum((cg_tol ** 2) * rr, 1e-300)
    converged = rr <= rr_target
    iters = np.zeros(a_n, dtype=int)
    z0, zx = _apply_precond(g_inv, q_pos, r0, rx)
    rz = r0 * z0 + np.einsum("ad,ad->a", rx, zx)
    p0 = z0.copy()
    px = zx.copy()

    for _ in range(cg_maxiter):
        n_conv = int(np.count_nonzero(converged))
        if n_conv == a_n:
            break
        # plain slices are views; only pay for gather copies once some
        # anchors have actually converged
        idx = slice(None) if n_conv == 0 else np.flatnonzero(~converged)
        ap0, apx = _batch_operator(p_pos, q_pos[idx], w_mat[idx], lams[idx],
                                   p0[idx], px[idx])
        pap = p0[idx] * ap0 + np.einsum("ad,ad->a", px[idx], apx)
        # pap <= 0 can only mean a zero search direction (lambda >= 0 keeps
        # the operator PSD); treat as stalled-but-done
        safe = pap > 0
        step = np.where(safe, rz[idx] / np.where(safe, pap, 1.0), 0.0)
        x0[idx] += step * p0[idx]
        xx[idx] += step[:, None] * px[idx]
        r0[idx] -= step * ap0
        rx[idx] -= step[:, None] * apx
        rr_new = r0[idx] ** 2 + np.einsum("ad,ad->a", rx[idx], rx[idx])
        z0_new, zx_new = _apply_precond(g_inv, q_pos[idx], r0[idx], rx[idx])
        rz_new = r0[idx] * z0_new + np.einsum("ad,ad->a", rx[idx], zx_new)
        ratio = np.where(rz[idx] != 0, rz_new / np.where(rz[idx] != 0,
                                                         rz[idx], 1.0), 0.0)
        p0[idx] = z0_new + ratio * p0[idx]
        px[idx] = zx_new + ratio[:, None] * px[idx]
        iters[idx] += 1
        rr[idx] = rr_new
        rz[idx] = rz_new
        converged[idx] = (rr_new <= rr_target[idx]) | ~safe

    return x0, xx, iters, np.sqrt(rr), converged


def solve_wls(anchor_index: int, positions: np.ndarray,
              responses: np.ndarray, weights: np.ndarray,
              ridge_lambda: float, cg_tol: float = 1e-10,
              cg_maxiter: int | None = None) -> RegressionOutput:
    """Solve one anchor's weighted ridge system matrix-free.

    Displacements are D_j = X_j - X_anchor; ``weights`` must be normalized
    to sum 1. lambda = 0 is allowed only in the overdetermined regime
    M > d + 1; otherwise the x-block is rank deficient and the ridge is
    mandatory. Minimizes sum_j w_j (y_j - a0 - a_x . D_j)^2 + lambda |a|^2.
    """
    positions = np.asarray(positions, dtype=float)
    w = np.asarray(weights, dtype=float)
    y = np.asarray(responses, dtype=float)
    m, d = positions.shape
    if not 0 <= anchor_index < m:
        raise InvalidParameterError(
            f"anchor_index {anchor_index} outside [0, {m})")
    d_mat = positions - positions[anchor_index]
    if w.shape != (m,) or y.shape != (m,):
        raise InvalidParameterError(
            f"weights {w.shape} / responses {y.shape} do not match "
            f"positions ({m}, {d})")
    if not np.all(np.isfinite(d_mat)):
        raise InvalidParameterError("positions must be finite")
    if not np.all(np.isfinite(y)):
        raise InvalidParameterError("responses must be finite")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidParameterError("weights must be finite and >= 0")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise InvalidParameterError(
            f"weights must be normalized to sum 1, got sum {float(w.sum())!r}")
    if ridge_lambda < 0:
        raise InvalidParameterError(
            f"ridge_lambda must be >= 0, got {ridge_lambda}")
    if ridge_lambda == 0 and m <= d + 1:
        raise InvalidParameterError("ridge required when M <= d+1")
    if cg_maxiter is None:
        cg_maxiter = min(10 * (d + 1), 2000)

    a0, ax, iters, res, conv = _cg_batch(
        d_mat, np.zeros((1, d)), w[None, :], np.array([ridge_lambda]), y,
        cg_tol, cg_maxiter)
    return RegressionOutput(
        alpha=float(a0[0]), alpha_x=ax[0],
        iterations=int(iters[0]),
        residual_norm=float(res[0]),
        effective_weight_count=int(np.count_nonzero(
            w > WEIGHT_COUNT_THRESHOLD)),
        converged=bool(conv[0]),
        ridge_lambda=float(ridge_lambda))


def estimate_gradient(anchor_index: int, level, responses: np.ndarray,
                      problem, config) -> tuple[np.ndarray, RegressionOutput]:
    """Diffusion-adapted gradient estimate z = sigma^T alpha_x at one anchor.

    Composes bandwidth -> weights -> WLS solve -> sigma^T for the particle
    ``anchor_index`` of ``level`` (a forward LevelState), regressing the
    given responses on displacements. Returns (z, diagnostics).
    """
    pos = np.asarray(level.positions, dtype=float)
    y = np.asarray(responses, dtype=float)
    m, d = pos.shape
    if not 0 <= anchor_index < m:
        raise InvalidParameterError(
            f"anchor_index {anchor_index} outside [0, {m})")
    dt = problem.horizon / config.n_steps
    dist = _anchor_distances(anchor_index, pos)
    try:
        eps = bandwidth_from_distances(dist, config.bandwidth_rule, dt,
                                       config.bandwidth_c)
        w = weights_from_distances(dist, eps, config.kernel)
    except DegenerateNeighborhoodError as exc:
        raise DegenerateNeighborhoodError(
            f"anchor {anchor_index}, level {level.level}: {exc}") from exc
    if config.ridge_lambda == "auto":
        lam = auto_ridge_lambda(w, dist ** 2, d)
        if lam == 0 and m <= d + 1:
            # zero weighted spread would make the auto ridge vanish exactly
            # where it is mandatory; keep a floor tied to the bandwidth scale
            lam = 1e-8 * eps ** 2 / d
    else:
        lam = float(config.ridge_lambda)
    out = solve_wls(anchor_index, pos, y, w, lam, cg_tol=config.cg_tol,
                    cg_maxiter=config.resolved_cg_maxiter(d))
    out.bandwidth = eps
    z = apply_diffusion_transpose(problem.diffusion, out.alpha_x)
    return z, out
