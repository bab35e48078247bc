"""Unsigned distance field evaluation over triangle meshes.

A median-split BVH accelerates exact point-to-mesh distance queries (numba
kernels); `brute_force_udf` is an independent vectorized-numpy twin used as
the correctness oracle. Grids store corner samples so the surfacer can
consume them directly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .meshkit import TriMesh, SurfaceSamples


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


def default_bounds() -> Box:
    return Box(np.full(3, -0.55), np.full(3, 0.55))


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True, inline="always")
def _closest_point_on_tri(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    # Ericson, Real-Time Collision Detection, 5.1.5
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    if va + vb + vc == 0.0:  # degenerate triangle
        return ax, ay, az
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@njit(cache=True, inline="always")
def _aabb_dist2(lox, loy, loz, hix, hiy, hiz, px, py, pz):
    dx = max(lox - px, 0.0, px - hix)
    dy = max(loy - py, 0.0, py - hiy)
    dz = max(loz - pz, 0.0, pz - hiz)
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _query_one(node_lo, node_hi, node_left, node_right, node_start, node_count,
               tris, px, py, pz):
    best = 1e300
    bx = by = bz = 0.0
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        ni = stack[top]
        if _aabb_dist2(node_lo[ni, 0], node_lo[ni, 1], node_lo[ni, 2],
                       node_hi[ni, 0], node_hi[ni, 1], node_hi[ni, 2],
                       px, py, pz) >= best:
            continue
        if node_left[ni] < 0:  # leaf
            for t in range(node_start[ni], node_start[ni] + node_count[ni]):
                qx, qy, qz = _closest_point_on_tri(
                    tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2],
                    tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2],
                    tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2],
                    px, py, pz)
                dx, dy, dz = px - qx, py - qy, pz - qz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best:
                    best = d2
                    bx, by, bz = qx, qy, qz
        else:
            l, r = node_left[ni], node_right[ni]
            dl = _aabb_dist2(node_lo[l, 0], node_lo[l, 1], node_lo[l, 2],
                             node_hi[l, 0], node_hi[l, 1], node_hi[l, 2], px, py, pz)
            dr = _aabb_dist2(node_lo[r, 0], node_lo[r, 1], node_lo[r, 2],
                             node_hi[r, 0], node_hi[r, 1], node_hi[r, 2], px, py, pz)
            # push farther child first so the nearer one is explored next
            if dl <= dr:
                stack[top] = r; top += 1
                stack[top] = l; top += 1
            else:
                stack[top] = l; top += 1
                stack[top] = r; top += 1
    return best, bx, by, bz


@njit(cache=True, parallel=True)
def _query_many(node_lo, node_hi, node_left, node_right, node_start, node_count,
                tris, pts, out_d, out_cp):
    for i in prange(pts.shape[0]):
        d2, qx, qy, qz = _query_one(node_lo, node_hi, node_left, node_right,
                                    node_start, node_count, tris,
                                    pts[i, 0], pts[i, 1], pts[i, 2])
        out_d[i] = np.sqrt(d2)
        out_cp[i, 0] = qx
        out_cp[i, 1] = qy
        out_cp[i, 2] = qz


# ---------------------------------------------------------------------------
# BVH

class MeshBvh:
    """Median-split bounding volume hierarchy over mesh triangles (leaf <= 4)."""

    LEAF_SIZE = 4

    def __init__(self, mesh: TriMesh):
        if len(mesh.faces) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        tv = mesh.vertices[mesh.faces]  # (T, 3, 3)
        centroids = tv.mean(axis=1)
        order = np.arange(len(tv), dtype=np.int64)

        lo_list, hi_list, left, right, start, count = [], [], [], [], [], []

        def build(idx):
            node = len(lo_list)
            pts = tv[idx].reshape(-1, 3)
            lo_list.append(pts.min(axis=0))
            hi_list.append(pts.max(axis=0))
            left.append(-1); right.append(-1); start.append(-1); count.append(0)
            if len(idx) <= self.LEAF_SIZE:
                start[node] = build.cursor
                count[node] = len(idx)
                build.order[build.cursor:build.cursor + len(idx)] = idx
                build.cursor += len(idx)
                return node
            cb_lo = centroids[idx].min(axis=0)
            cb_hi = centroids[idx].max(axis=0)
            axis = int(np.argmax(cb_hi - cb_lo))
            mid = len(idx) // 2
            part = idx[np.argsort(centroids[idx, axis], kind="stable")]
            l = build(part[:mid])
            r = build(part[mid:])
            left[node] = l
            right[node] = r
            return node

        build.cursor = 0
        build.order = np.empty(len(tv), dtype=np.int64)
        build(order)

        self.node_lo = np.asarray(lo_list)
        self.node_hi = np.asarray(hi_list)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_count = np.asarray(count, dtype=np.int64)
        self.tri_order = build.order
        self.tris = np.ascontiguousarray(tv[build.order])

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and closest surface points for an (N, 3) point array."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d = np.empty(len(pts))
        cp = np.empty((len(pts), 3))
        _query_many(self.node_lo, self.node_hi, self.node_left, self.node_right,
                    self.node_start, self.node_count, self.tris, pts, d, cp)
        return d, cp


def build_bvh(mesh: TriMesh) -> MeshBvh:
    return MeshBvh(mesh)


def udf(bvh: MeshBvh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance and unit gradient (p - closest)/d per point; zero gradient on-surface."""
    single = np.asarray(points).ndim == 1
    d, cp = bvh.query(points)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    grad = pts - cp
    safe = d > 1e-9
    grad[safe] /= d[safe, None]
    grad[~safe] = 0.0
    if single:
        return float(d[0]), grad[0]
    return d, grad


def brute_force_udf(mesh: TriMesh, points: np.ndarray,
                    chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """O(F*N) oracle: vectorized closest-point over every triangle.

    Independent of the BVH path; used to validate it.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    ab, ac = b - a, c - a
    out_d = np.empty(len(pts))
    out_cp = np.empty((len(pts), 3))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk][:, None, :]  # (n, 1, 3)
        ap = p - a[None]
        d1 = (ab[None] * ap).sum(-1)
        d2 = (ac[None] * ap).sum(-1)
        bp = p - b[None]
        d3 = (ab[None] * bp).sum(-1)
        d4 = (ac[None] * bp).sum(-1)
        cp_ = p - c[None]
        d5 = (ab[None] * cp_).sum(-1)
        d6 = (ac[None] * cp_).sum(-1)

        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        with np.errstate(divide="ignore", invalid="ignore"):
            v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
            w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
            w_bc = np.where((d4 - d3) + (d5 - d6) != 0,
                            (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)
            denom = va + vb + vc
            v_in = np.where(denom != 0, vb / denom, 0.0)
            w_in = np.where(denom != 0, vc / denom, 0.0)

        n, t = d1.shape
        q = np.empty((n, t, 3))
        # interior by default
        q[:] = a[None] + v_in[..., None] * ab[None] + w_in[..., None] * ac[None]
        m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        q = np.where(m_bc[..., None], b[None] + w_bc[..., None] * (c - b)[None], q)
        m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        q = np.where(m_ac[..., None], a[None] + w_ac[..., None] * ac[None], q)
        m_c = (d6 >= 0) & (d5 <= d6)
        q = np.where(m_c[..., None], np.broadcast_to(c[None], q.shape), q)
        m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        q = np.where(m_ab[..., None], a[None] + v_ab[..., None] * ab[None], q)
        m_b = (d3 >= 0) & (d4 <= d3)
        q = np.where(m_b[..., None], np.broadcast_to(b[None], q.shape), q)
        m_a = (d1 <= 0) & (d2 <= 0)
        q = np.where(m_a[..., None], np.broadcast_to(a[None], q.shape), q)

        dist2 = ((p - q) ** 2).sum(-1)
        best = dist2.argmin(axis=1)
        rows = np.arange(n)
        out_d[s:s + n] = np.sqrt(dist2[rows, best])
        out_cp[s:s + n] = q[rows, best]
    return out_d, out_cp


# ---------------------------------------------------------------------------
# grids

@dataclass
class UdfGrid:
    """Corner-sampled distances/gradients on a regular lattice.

    `resolution` counts lattice samples per axis; cells per axis are one
    fewer, so voxel size is extent / (resolution - 1).
    """

    resolution: tuple[int, int, int]
    bounds: Box
    distances: np.ndarray  # flat, res_x*res_y*res_z, C order (x major)
    gradients: np.ndarray  # flat, same length x 3

    def __post_init__(self):
        n = int(np.prod(self.resolution))
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(n)
        self.gradients = np.asarray(self.gradients, dtype=np.float64).reshape(n, 3)
        if (self.distances < 0).any():
            raise ValueError("grid distances must be nonnegative")

    @property
    def voxel_size(self) -> float:
        steps = self.bounds.extent / (np.array(self.resolution) - 1)
        return float(steps.max())

    def corner_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rx, ry, rz = self.resolution
        xs = np.linspace(self.bounds.lo[0], self.bounds.hi[0], rx)
        ys = np.linspace(self.bounds.lo[1], self.bounds.hi[1], ry)
        zs = np.linspace(self.bounds.lo[2], self.bounds.hi[2], rz)
        return xs, ys, zs

    def distances_3d(self) -> np.ndarray:
        return self.distances.reshape(self.resolution)

    def gradients_4d(self) -> np.ndarray:
        return self.gradients.reshape(self.resolution + (3,))


def sample_grid(bvh: MeshBvh, resolution: int, bounds: Box | None = None) -> UdfGrid:
    """Query distance+gradient at every lattice corner. Deterministic."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    bounds = bounds or default_bounds()
    xs = np.linspace(bounds.lo[0], bounds.hi[0], resolution)
    ys = np.linspace(bounds.lo[1], bounds.hi[1], resolution)
    zs = np.linspace(bounds.lo[2], bounds.hi[2], resolution)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    d, grad = udf(bvh, pts)
    return UdfGrid(resolution=(resolution,) * 3, bounds=bounds,
                   distances=d, gradients=grad)


def grid_from_field(values: np.ndarray, gradients: np.ndarray, bounds: Box) -> UdfGrid:
    """Wrap externally computed corner samples (e.g. decoder output) as a grid."""
    res = values.shape
    return UdfGrid(resolution=tuple(res), bounds=bounds,
                   distances=values.ravel(), gradients=gradients.reshape(-1, 3))


def numeric_gradients(values_3d: np.ndarray, bounds: Box) -> np.ndarray:
    """Central-difference gradients of a corner-sampled scalar field, unit-normalized."""
    res = values_3d.shape
    steps = bounds.extent / (np.array(res) - 1)
    gx, gy, gz = np.gradient(values_3d, steps[0], steps[1], steps[2])
    g = np.stack([gx, gy, gz], axis=-1)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    np.divide(g, norms, out=g, where=norms > 1e-12)
    return g.reshape(-1, 3)


# ---------------------------------------------------------------------------
# scalar helpers

def normalize_clip(d, delta: float):
    """Map distance to [0, 1]: d/delta clipped at 1."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        raise ValueError("distances must be nonnegative")
    out = np.minimum(d / delta, 1.0)
    return float(out) if out.ndim == 0 else out


def merge_udf(values):
    """Pointwise minimum of several distance fields (union of shapes)."""
    values = list(values)
    if not values:
        raise ValueError("merge_udf needs at least one field")
    out = np.asarray(values[0], dtype=np.float64)
    for v in values[1:]:
        out = np.minimum(out, np.asarray(v, dtype=np.float64))
    if out.ndim == 0:
        return float(out)
    return out


def training_queries(samples: SurfaceSamples, bounds: Box, n: int, seed: int,
                     near_fraction: float = 0.8, sigma: float = 0.05) -> np.ndarray:
    """Near-surface Gaussian perturbations (clamped to bounds) plus uniform fill."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_near = int(round(near_fraction * n))
    idx = rng.integers(0, len(samples.points), size=n_near)
    near = samples.points[idx] + rng.normal(0.0, sigma, size=(n_near, 3))
    near = np.clip(near, bounds.lo, bounds.hi)
    uniform = rng.uniform(bounds.lo, bounds.hi, size=(n - n_near, 3))
    return np.vstack([near, uniform])


# ---------------------------------------------------------------------------
# grid I/O

_MAGIC = b"UDFG"


def save_grid(grid: UdfGrid, path, source_mesh: TriMesh | None = None,
              delta: float | None = None):
    """Write the binary grid plus a JSON provenance sidecar."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<3I", *grid.resolution))
        fh.write(struct.pack("<6d", *grid.bounds.lo, *grid.bounds.hi))
        fh.write(grid.distances.astype("<f4").tobytes())
        fh.write(grid.gradients.astype("<f4").tobytes())
    sidecar = {
        "version": 1,
        "resolution": list(grid.resolution),
        "bounds": {"lo": grid.bounds.lo.tolist(), "hi": grid.bounds.hi.tolist()},
        "delta": delta,
        "source_mesh_sha256": mesh_hash(source_mesh) if source_mesh is not None else None,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_grid(path) -> UdfGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a UDFG file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported UDFG version {version}")
        res = struct.unpack("<3I", fh.read(12))
        b = struct.unpack("<6d", fh.read(48))
        n = res[0] * res[1] * res[2]
        d = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
        g = np.frombuffer(fh.read(12 * n), dtype="<f4").astype(np.float64)
    return UdfGrid(resolution=res, bounds=Box(b[:3], b[3:]),
                   distances=d, gradients=g.reshape(n, 3))


def mesh_hash(mesh: TriMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()
