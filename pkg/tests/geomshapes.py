"""Parametric reference shapes used across the test suite."""

import numpy as np

from garmgen.meshkit import TriMesh


def unit_cube() -> TriMesh:
    v = np.array([
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ], dtype=float)
    f = [
        (0, 2, 1), (0, 3, 2),
        (4, 5, 6), (4, 6, 7),
        (0, 1, 5), (0, 5, 4),
        (2, 3, 7), (2, 7, 6),
        (1, 2, 6), (1, 6, 5),
        (3, 0, 4), (3, 4, 7),
    ]
    return TriMesh(v, np.array(f))


def uv_sphere(radius=1.0, rings=16, segments=24, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed lat-long sphere with triangle fans at the poles."""
    cx, cy, cz = center
    verts = [[cx, cy, cz + radius]]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append([cx + radius * np.sin(phi) * np.cos(th),
                          cy + radius * np.sin(phi) * np.sin(th),
                          cz + radius * np.cos(phi)])
    verts.append([cx, cy, cz - radius])
    south = len(verts) - 1
    faces = []
    for j in range(segments):
        faces.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 2):
        a = 1 + i * segments
        b = 1 + (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append((a + j, b + j, b + j2))
            faces.append((a + j, b + j2, a + j2))
    a = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append((a + j, south, a + (j + 1) % segments))
    return TriMesh(np.array(verts), np.array(faces))


def open_cylinder(radius=0.3, y0=-0.3, y1=0.3, segments=24, rings=6) -> TriMesh:
    ys = np.linspace(y0, y1, rings)
    verts = []
    for y in ys:
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append([radius * np.cos(th), y, radius * np.sin(th)])
    faces = []
    for i in range(rings - 1):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = (i + 1) * segments + j
            d = (i + 1) * segments + (j + 1) % segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(np.array(verts), np.array(faces))


def hemisphere(radius=1.0, rings=32, segments=64) -> TriMesh:
    """Open upper hemisphere (one rim loop)."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings + 1):
        phi = 0.5 * np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append([radius * np.sin(phi) * np.cos(th),
                          radius * np.sin(phi) * np.sin(th),
                          radius * np.cos(phi)])
    faces = []
    for j in range(segments):
        faces.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 1):
        a = 1 + i * segments
        b = 1 + (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append((a + j, b + j, b + j2))
            faces.append((a + j, b + j2, a + j2))
    return TriMesh(np.array(verts), np.array(faces))


def flat_grid(n=8, extent=1.0) -> TriMesh:
    xs = np.linspace(0, extent, n)
    verts = [[x, y, 0.0] for x in xs for y in xs]
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = i * n + j + 1
            c = (i + 1) * n + j
            d = (i + 1) * n + j + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(np.array(verts), np.array(faces))


def noisy_sphere(seed=0, amplitude=0.03, **kw) -> TriMesh:
    mesh = uv_sphere(**kw)
    rng = np.random.default_rng(seed)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return TriMesh(mesh.vertices + radial * rng.normal(0, amplitude, (len(mesh.vertices), 1)),
                   mesh.faces)


def analytic_sphere_grid(radius=0.4, resolution=32, center=(0, 0, 0)):
    """UdfGrid of an exact sphere distance field (no tessellation error)."""
    from garmgen.udf_field import UdfGrid, default_bounds

    b = default_bounds()
    xs = np.linspace(b.lo[0], b.hi[0], resolution)
    gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
    p = np.stack([gx, gy, gz], -1) - np.asarray(center)
    rho = np.linalg.norm(p, axis=-1)
    d = np.abs(rho - radius)
    with np.errstate(invalid="ignore"):
        g = np.sign(rho - radius)[..., None] * p / np.where(
            rho[..., None] > 1e-12, rho[..., None], 1.0)
    g[d < 1e-12] = 0.0
    return UdfGrid((resolution,) * 3, b, d.ravel(), g.reshape(-1, 3))


def analytic_disc_grid(radius=0.35, resolution=64):
    """UdfGrid of a flat horizontal disc (open surface, one rim)."""
    from garmgen.udf_field import UdfGrid, default_bounds

    b = default_bounds()
    xs = np.linspace(b.lo[0], b.hi[0], resolution)
    gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
    rho = np.sqrt(gx ** 2 + gz ** 2)
    excess = np.maximum(rho - radius, 0.0)
    d = np.sqrt(excess ** 2 + gy ** 2)
    safe_rho = np.where(rho > 1e-12, rho, 1.0)
    g = np.stack([gx / safe_rho * excess, gy, gz / safe_rho * excess], -1)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    g = np.where(n > 1e-12, g / np.where(n > 1e-12, n, 1.0), 0.0)
    return UdfGrid((resolution,) * 3, b, d.ravel(), g.reshape(-1, 3))
