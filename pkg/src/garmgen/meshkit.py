"""Triangle-mesh kernel for open surfaces.

Meshes are plain vertex/face arrays. Boundary edges (exactly one incident
face) are first-class citizens: hems, necklines and armholes stay open
through every operation unless `fill_holes` is asked to close them.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TriMesh:
    """Indexed triangle mesh. `uv`, when present, is per-face-corner (F, 3, 2)."""

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
        self.validate()

    def validate(self):
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError(
                f"face index {int(self.faces.max())} out of range "
                f"(mesh has {len(self.vertices)} vertices)"
            )
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        f = self.faces
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise ValueError(f"degenerate face at index {int(np.where(degen)[0][0])}")
        if self.uv is not None and len(self.uv) != len(self.faces):
            raise ValueError("uv must have one entry per face corner triple")

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(),
                       None if self.uv is None else self.uv.copy())

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class SurfaceSamples:
    """Area-uniform point samples on a mesh, with unit face normals."""

    points: np.ndarray
    normals: np.ndarray
    seed: int


@dataclass
class Transform:
    """Uniform scale about a center: normalized = (v - center) * scale."""

    scale: float
    center: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.center


# ---------------------------------------------------------------------------
# OBJ I/O

def load_obj(path) -> TriMesh:
    """Parse an ASCII OBJ file (v / vt / f records, 1-based indices)."""
    verts, uvs, faces, face_uv = [], [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    vi, ti = [], []
                    for token in parts[1:]:
                        fields = token.split("/")
                        vi.append(int(fields[0]))
                        if len(fields) > 1 and fields[1]:
                            ti.append(int(fields[1]))
                    if len(vi) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    # fan-triangulate polygons
                    for k in range(1, len(vi) - 1):
                        faces.append((vi[0], vi[k], vi[k + 1]))
                        if len(ti) == len(vi):
                            face_uv.append((ti[0], ti[k], ti[k + 1]))
            except ValueError as exc:
                raise ValueError(f"{path}: parse error at line {lineno}: {exc}") from None

    nv, nt = len(verts), len(uvs)
    fidx = []
    for tri in faces:
        res = []
        for i in tri:
            if i < 1 or i > nv:
                raise ValueError(f"{path}: face index {i} out of range (1..{nv})")
            res.append(i - 1)
        fidx.append(res)
    uv = None
    if face_uv and len(face_uv) == len(faces):
        uv = np.empty((len(faces), 3, 2))
        for fi, tri in enumerate(face_uv):
            for ci, t in enumerate(tri):
                if t < 1 or t > nt:
                    raise ValueError(f"{path}: uv index {t} out of range (1..{nt})")
                uv[fi, ci] = uvs[t - 1]
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(fidx, dtype=np.int64).reshape(-1, 3), uv)


def save_obj(mesh: TriMesh, path, mtl_name: str | None = None, texture_png: str | None = None):
    """Write ASCII OBJ; emits vt/f v/vt records when the mesh carries UVs."""
    lines = []
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
        lines.append("usemtl material0")
    for v in mesh.vertices:
        lines.append("v %.10g %.10g %.10g" % (v[0], v[1], v[2]))
    if mesh.uv is not None:
        uv_index: dict[tuple, int] = {}
        corner_ti = np.empty((len(mesh.faces), 3), dtype=np.int64)
        for fi in range(len(mesh.faces)):
            for ci in range(3):
                key = (round(mesh.uv[fi, ci, 0], 9), round(mesh.uv[fi, ci, 1], 9))
                if key not in uv_index:
                    uv_index[key] = len(uv_index)
                    lines.append("vt %.10g %.10g" % key)
                corner_ti[fi, ci] = uv_index[key]
        for fi, f in enumerate(mesh.faces):
            lines.append("f %d/%d %d/%d %d/%d" % (
                f[0] + 1, corner_ti[fi, 0] + 1, f[1] + 1, corner_ti[fi, 1] + 1,
                f[2] + 1, corner_ti[fi, 2] + 1))
    else:
        for f in mesh.faces:
            lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# measures

def face_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unit normals per face (right-hand rule on vertex order)."""
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    n = np.cross(b - a, c - a)
    norms = np.linalg.norm(n, axis=1)
    norms[norms < 1e-300] = 1.0
    return n / norms[:, None]


def surface_area(mesh: TriMesh) -> float:
    return float(face_areas(mesh).sum())


def edge_face_count(mesh: TriMesh) -> dict[tuple[int, int], int]:
    count: dict[tuple[int, int], int] = defaultdict(int)
    for f in mesh.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            count[(min(a, b), max(a, b))] += 1
    return count


def boundary_edges(mesh: TriMesh) -> list[tuple[int, int]]:
    """Edges with exactly one incident face, as (min, max) vertex pairs."""
    return [e for e, c in edge_face_count(mesh).items() if c == 1]


def _edge_to_faces(mesh: TriMesh) -> dict[tuple[int, int], list[int]]:
    e2f: dict[tuple[int, int], list[int]] = defaultdict(list)
    for fi, f in enumerate(mesh.faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            e2f[(int(min(a, b)), int(max(a, b)))].append(fi)
    return e2f


def boundary_loops(mesh: TriMesh) -> list[list[int]]:
    """Chain boundary edges into closed vertex loops.

    Successive boundary edges are paired by pivoting through the face fan
    around their shared vertex, which decomposes bowtie vertices canonically
    and needs no globally consistent winding (extracted meshes may lack one).
    Raises ValueError naming the open chain if the boundary does not close.
    """
    e2f = _edge_to_faces(mesh)
    boundary = {e for e, fs in e2f.items() if len(fs) == 1}

    def next_boundary(e, v):
        # rotate around v, starting from boundary edge e, until the fan ends
        cur_e, cur_f = e, e2f[e][0]
        for _ in range(len(mesh.faces) + 1):
            f = mesh.faces[cur_f]
            o = cur_e[0] if cur_e[1] == v else cur_e[1]
            w = int([x for x in f if x != v and x != o][0])
            ne = (min(v, w), max(v, w))
            if ne in boundary:
                return ne
            fs = e2f[ne]
            if len(fs) != 2:
                raise ValueError(
                    f"non-manifold edge {ne} (on {len(fs)} faces) while tracing "
                    f"the boundary fan at vertex {v}")
            cur_f = fs[0] if fs[1] == cur_f else fs[1]
            cur_e = ne
        raise ValueError(f"boundary fan walk at vertex {v} did not terminate")

    remaining = set(boundary)
    loops = []
    while remaining:
        start = min(remaining)
        remaining.discard(start)
        a, b = start
        loop = [a, b]
        cur_e, cur_v = start, b
        while True:
            ne = next_boundary(cur_e, cur_v)
            if ne == start:
                break
            if ne not in remaining:
                raise ValueError(
                    f"boundary chain starting at edge {start} does not close "
                    f"(revisited edge {ne})")
            remaining.discard(ne)
            cur_v = ne[0] if ne[1] == cur_v else ne[1]
            loop.append(cur_v)
            cur_e = ne
        if len(loop) > 2 and loop[-1] == loop[0]:
            loop.pop()
        loops.append(loop)
    return loops


def orient_coherent(mesh: TriMesh) -> TriMesh:
    """Flip faces so adjacent faces traverse shared edges in opposite order.

    BFS per connected component; orientation conflicts (non-orientable
    junctions) are left as first reached. Deterministic.
    """
    faces = mesh.faces.copy()
    edge_to_faces = defaultdict(list)
    for fi, f in enumerate(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_to_faces[(min(a, b), max(a, b))].append(fi)

    visited = np.zeros(len(faces), dtype=bool)
    for seed_face in range(len(faces)):
        if visited[seed_face]:
            continue
        visited[seed_face] = True
        queue = [seed_face]
        while queue:
            fi = queue.pop()
            f = faces[fi]
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                for nj in edge_to_faces[(min(a, b), max(a, b))]:
                    if visited[nj]:
                        continue
                    visited[nj] = True
                    g = faces[nj]
                    # neighbor must traverse the shared edge as b -> a
                    pairs = ((g[0], g[1]), (g[1], g[2]), (g[2], g[0]))
                    if (a, b) in pairs:  # same direction: flip neighbor
                        faces[nj] = g[::-1]
                    queue.append(nj)
    return TriMesh(mesh.vertices.copy(), faces, None if mesh.uv is None else mesh.uv.copy())


def connected_components(mesh: TriMesh) -> list[np.ndarray]:
    """Face index arrays of edge-connected components."""
    edge_to_faces = defaultdict(list)
    for fi, f in enumerate(mesh.faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_to_faces[(min(a, b), max(a, b))].append(fi)
    visited = np.zeros(len(mesh.faces), dtype=bool)
    comps = []
    for s in range(len(mesh.faces)):
        if visited[s]:
            continue
        comp, queue = [], [s]
        visited[s] = True
        while queue:
            fi = queue.pop()
            comp.append(fi)
            f = mesh.faces[fi]
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                for nj in edge_to_faces[(min(a, b), max(a, b))]:
                    if not visited[nj]:
                        visited[nj] = True
                        queue.append(nj)
        comps.append(np.array(sorted(comp), dtype=np.int64))
    return comps


def enclosed_volume(mesh: TriMesh) -> float:
    """Divergence-theorem volume of a closed mesh (absolute value).

    Input winding may be inconsistent: each component is re-oriented
    coherently and its signed volume taken in absolute value, so disjoint
    closed shells add up regardless of how they were wound.
    """
    if boundary_edges(mesh):
        raise ValueError("mesh has boundary edges; fill_holes before computing volume")
    oriented = orient_coherent(mesh)
    v, f = oriented.vertices, oriented.faces
    signed = np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])) / 6.0
    total = 0.0
    for comp in connected_components(oriented):
        total += abs(signed[comp].sum())
    return float(total)


def _directed_edges(mesh: TriMesh) -> set[tuple[int, int]]:
    out = set()
    for f in mesh.faces:
        out.add((int(f[0]), int(f[1])))
        out.add((int(f[1]), int(f[2])))
        out.add((int(f[2]), int(f[0])))
    return out


def cap_triangle(directed: set, a: int, b: int, apex: int) -> tuple[int, int, int]:
    """Triangle over boundary edge (a, b) wound opposite to its face."""
    return (b, a, apex) if (a, b) in directed else (a, b, apex)


def fill_holes(mesh: TriMesh) -> TriMesh:
    """Close every boundary loop with a centroid fan. Idempotent."""
    loops = boundary_loops(mesh)
    if not loops:
        return mesh.copy()
    directed = _directed_edges(mesh)
    verts = [mesh.vertices]
    new_faces = [mesh.faces]
    next_vid = len(mesh.vertices)
    for loop in loops:
        centroid = mesh.vertices[loop].mean(axis=0)
        verts.append(centroid[None, :])
        fan = []
        for i in range(len(loop)):
            a, b = loop[i], loop[(i + 1) % len(loop)]
            fan.append(cap_triangle(directed, a, b, next_vid))
        new_faces.append(np.array(fan, dtype=np.int64))
        next_vid += 1
    return TriMesh(np.vstack(verts), np.vstack(new_faces))


# ---------------------------------------------------------------------------
# sampling / smoothing / decimation / normalization

def sample_surface(mesh: TriMesh, n: int, seed: int) -> SurfaceSamples:
    """Area-weighted uniform surface sampling, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("zero-area mesh cannot be sampled")
    rng = np.random.default_rng(seed)
    fidx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = mesh.vertices[mesh.faces[fidx, 0]]
    b = mesh.vertices[mesh.faces[fidx, 1]]
    c = mesh.vertices[mesh.faces[fidx, 2]]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = face_normals(mesh)[fidx]
    return SurfaceSamples(points=pts, normals=normals, seed=seed)


def vertex_adjacency(mesh: TriMesh) -> list[set]:
    adj = [set() for _ in range(len(mesh.vertices))]
    for f in mesh.faces:
        adj[f[0]].update((f[1], f[2]))
        adj[f[1]].update((f[0], f[2]))
        adj[f[2]].update((f[0], f[1]))
    return adj


def laplacian_smooth(mesh: TriMesh, iterations: int, factor: float) -> TriMesh:
    """Move interior vertices toward their neighbor centroid; boundary pinned."""
    if not (0 < factor <= 1):
        raise ValueError("factor must be in (0, 1]")
    adj = vertex_adjacency(mesh)
    on_boundary = np.zeros(len(mesh.vertices), dtype=bool)
    for a, b in boundary_edges(mesh):
        on_boundary[a] = on_boundary[b] = True
    v = mesh.vertices.copy()
    movable = [i for i in range(len(v)) if adj[i] and not on_boundary[i]]
    neigh = [np.fromiter(adj[i], dtype=np.int64) for i in movable]
    for _ in range(iterations):
        new_v = v.copy()
        for i, nb in zip(movable, neigh):
            centroid = v[nb].mean(axis=0)
            new_v[i] = v[i] + factor * (centroid - v[i])
        v = new_v
    return TriMesh(v, mesh.faces.copy(), None if mesh.uv is None else mesh.uv.copy())


def decimate(mesh: TriMesh, target_faces: int) -> TriMesh:
    """Shortest-edge collapse decimation with a boundary lock.

    Boundary edges are never collapsed and boundary vertices never move, so
    open boundary loops survive topologically. Collapses that would pinch the
    surface (link condition) or flip a face normal are skipped.
    """
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    if len(mesh.faces) <= target_faces:
        return mesh.copy()

    verts = mesh.vertices.copy()
    faces = [tuple(f) for f in mesh.faces]
    alive = [True] * len(faces)
    v_faces: list[set] = [set() for _ in range(len(verts))]
    for fi, f in enumerate(faces):
        for vi in f:
            v_faces[vi].add(fi)

    def is_boundary_edge(a, b):
        return sum(1 for fi in (v_faces[a] & v_faces[b]) if alive[fi]) == 1

    on_boundary = np.zeros(len(verts), dtype=bool)
    for a, b in boundary_edges(mesh):
        on_boundary[a] = on_boundary[b] = True

    def edge_len(a, b):
        return float(np.linalg.norm(verts[a] - verts[b]))

    heap = []
    pushed = set()

    def push_edges_of(vi):
        for fi in v_faces[vi]:
            if not alive[fi]:
                continue
            f = faces[fi]
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(a, b), max(a, b))
                if key not in pushed:
                    pushed.add(key)
                    heapq.heappush(heap, (edge_len(*key), key[0], key[1]))

    for vi in range(len(verts)):
        push_edges_of(vi)

    n_alive = len(faces)

    def neighbors(vi):
        nb = set()
        for fi in v_faces[vi]:
            if alive[fi]:
                nb.update(faces[fi])
        nb.discard(vi)
        return nb

    while n_alive > target_faces and heap:
        length, u, v = heapq.heappop(heap)
        pushed.discard((u, v))
        shared = [fi for fi in (v_faces[u] & v_faces[v]) if alive[fi]]
        if not shared:
            continue
        if abs(length - edge_len(u, v)) > 1e-12:  # stale entry
            heapq.heappush(heap, (edge_len(u, v), u, v))
            pushed.add((u, v))
            continue
        if on_boundary[u] and on_boundary[v]:
            continue
        # link condition: common neighbors must be exactly the opposite vertices
        opposite = set()
        for fi in shared:
            opposite.update(set(faces[fi]) - {u, v})
        if neighbors(u) & neighbors(v) != opposite:
            continue
        # collapse u -> target position
        if on_boundary[u]:
            u, v = v, u  # move the interior endpoint
        new_pos = verts[v] if on_boundary[v] else 0.5 * (verts[u] + verts[v])

        # reject collapses that flip any surviving face
        flip = False
        moved = {u: new_pos, v: new_pos}
        for fi in (v_faces[u] | v_faces[v]):
            if not alive[fi] or fi in shared:
                continue
            f = faces[fi]
            p0, p1, p2 = (verts[i] for i in f)
            q0, q1, q2 = (moved.get(i, verts[i]) for i in f)
            n_old = np.cross(p1 - p0, p2 - p0)
            n_new = np.cross(q1 - q0, q2 - q0)
            if np.dot(n_old, n_new) <= 0 or np.linalg.norm(n_new) < 1e-14:
                flip = True
                break
        if flip:
            continue

        verts[v] = new_pos
        for fi in shared:
            alive[fi] = False
            n_alive -= 1
        for fi in list(v_faces[u]):
            if not alive[fi]:
                continue
            f = faces[fi]
            faces[fi] = tuple(v if i == u else i for i in f)
            v_faces[v].add(fi)
        v_faces[u] = set()
        push_edges_of(v)

    kept = [faces[fi] for fi in range(len(faces)) if alive[fi]]
    used = sorted({vi for f in kept for vi in f})
    remap = {old: new for new, old in enumerate(used)}
    new_faces = np.array([[remap[i] for i in f] for f in kept], dtype=np.int64)
    return TriMesh(verts[used], new_faces)


def normalize_unit(mesh: TriMesh) -> tuple[TriMesh, Transform]:
    """Translate + uniformly scale so the bbox fits [-0.5, 0.5]^3 (longest axis 1)."""
    lo, hi = mesh.bbox
    extent = hi - lo
    m = float(extent.max())
    if m <= 0:
        raise ValueError("zero-extent mesh cannot be normalized")
    t = Transform(scale=1.0 / m, center=(lo + hi) / 2.0)
    return TriMesh(t.apply(mesh.vertices), mesh.faces.copy(),
                   None if mesh.uv is None else mesh.uv.copy()), t


def mean_dihedral_deviation(mesh: TriMesh) -> float:
    """Mean angle between adjacent face normals (a cheap curvature proxy)."""
    normals = face_normals(mesh)
    edge_to_faces = defaultdict(list)
    for fi, f in enumerate(mesh.faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_to_faces[(min(a, b), max(a, b))].append(fi)
    angles = []
    for fks in edge_to_faces.values():
        if len(fks) == 2:
            d = np.clip(np.dot(normals[fks[0]], normals[fks[1]]), -1.0, 1.0)
            angles.append(np.arccos(d))
    return float(np.mean(angles)) if angles else 0.0
