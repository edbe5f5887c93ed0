"""Depth preprocessing: mask-based removal, normals, boundaries and the
global least-squares depth solve that produces the initially refined depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def transposed(self) -> "Intrinsics":
        return Intrinsics(self.fy, self.fx, self.cy, self.cx)

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics after resizing the image by factors ``sx`` (width) and ``sy`` (height)."""
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5
        )


@dataclass
class DepthMap:
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.validity.shape:
            raise ValueError("depth values and validity must be matching 2-D arrays")
        if min(self.values.shape) < 2:
            raise ValueError("depth maps must be at least 2x2")
        v = self.values[self.validity]
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("valid depth must be finite and non-negative")

    @classmethod
    def complete(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def from_sensor(cls, values) -> "DepthMap":
        """Sensor convention: zero (or non-finite) marks a missing reading."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.validity, self.values, fill)

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.validity.copy())


def pixel_rays(shape, intrinsics: Intrinsics) -> np.ndarray:
    """Back-projection directions with unit z, shape (H, W, 3)."""
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], axis=-1
    )


def mask_invalid_depth(raw: DepthMap, mask: np.ndarray) -> DepthMap:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != raw.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth shape {raw.shape}")
    return DepthMap(raw.values.copy(), raw.validity & ~mask)


def _tangent(points, valid, axis, jump):
    """Per-pixel tangent along ``axis``: central differences, one-sided at
    image borders, invalid neighbours, or where one side jumps in depth."""
    n = points.shape[axis]
    fwd = np.zeros_like(points)
    bwd = np.zeros_like(points)
    has_f = np.zeros(valid.shape, dtype=bool)
    has_b = np.zeros(valid.shape, dtype=bool)
    lo = [slice(None)] * 2
    hi = [slice(None)] * 2
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    lo, hi = tuple(lo), tuple(hi)
    diff = points[hi] - points[lo]
    pair = valid[hi] & valid[lo]
    fwd[lo] = diff
    has_f[lo] = pair
    bwd[hi] = diff
    has_b[hi] = pair

    dzf, dzb = np.abs(fwd[..., 2]), np.abs(bwd[..., 2])
    both = has_f & has_b
    use_f = has_f & ~has_b | both & (dzf + jump < dzb)
    use_b = has_b & ~has_f | both & (dzb + jump < dzf)
    central = both & ~use_f & ~use_b
    out = np.zeros_like(points)
    out[use_f] = fwd[use_f]
    out[use_b] = bwd[use_b]
    out[central] = 0.5 * (fwd[central] + bwd[central])
    return out


def normals_from_depth(depth: DepthMap, intrinsics: Intrinsics, jump: float = 0.05) -> np.ndarray:
    """Unit normals (H, W, 3) pointing toward the camera; (0, 0, -1) where undefined."""
    if intrinsics.fx <= 0 or intrinsics.fy <= 0:
        raise ValueError("focal lengths must be positive")
    points = pixel_rays(depth.shape, intrinsics) * depth.values[..., None]
    tu = _tangent(points, depth.validity, 1, jump)
    tv = _tangent(points, depth.validity, 0, jump)
    n = np.cross(tv, tu)
    norm = np.linalg.norm(n, axis=-1)
    ok = (norm > 1e-12) & depth.validity
    out = np.zeros_like(points)
    out[..., 2] = -1.0
    out[ok] = n[ok] / norm[ok, None]
    flip = ok & (np.einsum("hwc,hwc->hw", out, points) > 0)
    out[flip] *= -1.0
    return out


def detect_boundaries(depth: DepthMap, threshold: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Boundary weights in {0, 1}: 0 where a valid 4-neighbour differs by more than ``threshold``.

    Pixels flagged in ``mask`` are treated like invalid depth.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    valid = depth.validity.copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValueError("mask shape does not match depth")
        valid &= ~mask
    d = depth.values
    worst = np.zeros(d.shape)
    for axis in (0, 1):
        n = d.shape[axis]
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        diff = np.where(valid[lo] & valid[hi], np.abs(d[hi] - d[lo]), 0.0)
        worst[lo] = np.maximum(worst[lo], diff)
        worst[hi] = np.maximum(worst[hi], diff)
    return np.where(valid & (worst > threshold), 0.0, 1.0)


def _edges(shape):
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return p, q


def _residual_system(sparse: DepthMap, normals, boundaries, intrinsics, w_obs, w_normal, w_smooth, floor):
    """Weighted residual rows ``A x - b`` whose squared norm is the energy."""
    h, w = sparse.shape
    n = h * w
    normals = np.asarray(normals, dtype=np.float64).reshape(n, 3)
    bw = np.asarray(boundaries, dtype=np.float64).ravel()
    rays = pixel_rays(sparse.shape, intrinsics).reshape(n, 3)
    p, q = _edges(sparse.shape)
    m = len(p)
    b_pq = np.maximum(bw[p] * bw[q], floor)

    obs = np.flatnonzero(sparse.validity.ravel())
    k = len(obs)
    so = np.sqrt(w_obs)
    ss = np.sqrt(w_smooth * b_pq)
    sn = np.sqrt(w_normal * b_pq)

    nrm = normals[p] + normals[q]
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    cp = np.einsum("ij,ij->i", nrm, rays[p])
    cq = np.einsum("ij,ij->i", nrm, rays[q])

    e = np.arange(m)
    rows = np.concatenate([np.arange(k), k + e, k + e, k + m + e, k + m + e])
    cols = np.concatenate([obs, p, q, p, q])
    vals = np.concatenate([np.full(k, so), ss, -ss, -sn * cp, sn * cq])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(k + 2 * m, n))
    b = np.zeros(k + 2 * m)
    b[:k] = so * sparse.values.ravel()[obs]
    return A, b


def depth_energy(depth, sparse: DepthMap, normals, boundaries, intrinsics: Intrinsics,
                 w_obs=1000.0, w_normal=1.0, w_smooth=1.0, boundary_floor=1e-3) -> float:
    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    A, b = _residual_system(sparse, normals, boundaries, intrinsics, w_obs, w_normal, w_smooth, boundary_floor)
    r = A @ values.ravel() - b
    return float(r @ r)


def normal_equations(sparse: DepthMap, normals, boundaries, intrinsics: Intrinsics,
                     w_obs=1000.0, w_normal=1.0, w_smooth=1.0, boundary_floor=1e-3):
    """Sparse symmetric system ``H x = g`` minimising the depth energy."""
    A, b = _residual_system(sparse, normals, boundaries, intrinsics, w_obs, w_normal, w_smooth, boundary_floor)
    return (A.T @ A).tocsr(), A.T @ b


def nearest_fill(sparse: DepthMap) -> np.ndarray:
    """Fill invalid pixels with the nearest valid observation."""
    if not sparse.validity.any():
        raise SolverError("no valid depth observations")
    _, (ii, jj) = ndimage.distance_transform_edt(~sparse.validity, return_indices=True)
    return sparse.values[ii, jj]


def global_optimize_depth(sparse: DepthMap, normals, boundaries, intrinsics: Intrinsics,
                          w_obs=1000.0, w_normal=1.0, w_smooth=1.0, boundary_floor=1e-3,
                          tol=1e-12, maxiter_factor=10.0) -> DepthMap:
    """Minimise the observation + normal + boundary-weighted smoothness energy.

    Solved with Jacobi-preconditioned conjugate gradients, warm-started
    from a nearest-neighbour fill.
    """
    if w_obs <= 0 or min(w_normal, w_smooth) < 0 or w_normal + w_smooth <= 0:
        raise ValueError("need w_obs > 0, non-negative edge weights and w_normal + w_smooth > 0")
    if not sparse.validity.any():
        raise SolverError("no valid depth observations: the system has a null direction")
    H, g = normal_equations(sparse, normals, boundaries, intrinsics, w_obs, w_normal, w_smooth, boundary_floor)
    inv_diag = 1.0 / H.diagonal()
    M = LinearOperator(H.shape, matvec=lambda x: inv_diag * x, dtype=np.float64)
    x0 = nearest_fill(sparse).ravel()
    maxiter = max(1, int(maxiter_factor * H.shape[0]))
    x, info = cg(H, g, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    rel = np.linalg.norm(H @ x - g) / max(np.linalg.norm(g), 1e-300)
    if info != 0 or not np.all(np.isfinite(x)):
        raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {rel:.3e})")
    return DepthMap.complete(x.reshape(sparse.shape))


def refine_depth(raw: DepthMap, mask, normals, boundaries, intrinsics: Intrinsics, cfg) -> DepthMap:
    """Mask removal followed by the global solve, with weights from a ``GeometryConfig``."""
    sparse = mask_invalid_depth(raw, mask)
    return global_optimize_depth(
        sparse, normals, boundaries, intrinsics,
        w_obs=cfg.w_obs, w_normal=cfg.w_normal, w_smooth=cfg.w_smooth,
        boundary_floor=cfg.boundary_floor, tol=cfg.cg_tol, maxiter_factor=cfg.cg_maxiter_factor,
    )
