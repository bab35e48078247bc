"""Texture synthesis pipeline: orthographic front/back depth rendering,
side-by-side compositing, a deterministic stand-in colorizer, normal-based
front/back UV charting, and barycentric texel back-projection.

The external generator protocol is file-based (depth PNG out, RGB PNG in), so
a real depth-conditioned image model can replace `stub_colorize` without code
changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import meshkit
from .meshkit import TriMesh

VIEW_WINDOW = (-0.55, 0.55, -0.55, 0.55)   # x min/max, y min/max
DEPTH_RANGE = (-0.55, 0.55)                # z extent mapped onto [0, 1]
BACKGROUND_RGB = (0, 0, 0)


@dataclass
class DepthImage:
    values: np.ndarray              # (H, W) in [0, 1], background 0
    metadata: dict

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any() or (self.values > 1).any():
            raise ValueError("depth values must lie in [0, 1]")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class RgbImage:
    pixels: np.ndarray              # (H, W, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("RgbImage needs (H, W, 3) data")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class TextureAtlas:
    size: int
    texels: np.ndarray = None       # (size, size, 3) uint8
    chart: np.ndarray = None        # (F,) 0 = front, 1 = back
    uv: np.ndarray = None           # (F, 3, 2), v runs down the raster
    coverage: np.ndarray = None     # 0 empty, 1 projected, 2 dilated
    window: tuple = VIEW_WINDOW

    def __post_init__(self):
        if self.texels is None:
            self.texels = np.zeros((self.size, self.size, 3), dtype=np.uint8)
        if self.coverage is None:
            self.coverage = np.zeros((self.size, self.size), dtype=np.uint8)

    def coverage_fraction(self) -> float:
        interior = self.coverage > 0
        return float((self.coverage == 1).sum() / max(interior.sum(), 1))


# ---------------------------------------------------------------------------
# rasterization core

def edge_function(px, py, ax, ay, bx, by):
    """Twice the signed area of (a, b, p); shared by rasterizer and oracles."""
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _project_pixels(verts: np.ndarray, view: str, resolution: int) -> np.ndarray:
    """Vertex positions -> (x_px, y_px, depth) for one orthographic view."""
    xmin, xmax, ymin, ymax = VIEW_WINDOW
    zmin, zmax = DEPTH_RANGE
    u = (verts[:, 0] - xmin) / (xmax - xmin)
    v = (ymax - verts[:, 1]) / (ymax - ymin)
    if view == "front":     # camera on +z looking along -z
        depth = (verts[:, 2] - zmin) / (zmax - zmin)
    elif view == "back":    # camera on -z looking along +z, mirrored in x
        depth = (zmax - verts[:, 2]) / (zmax - zmin)
    else:
        raise ValueError(f"view must be front or back, got {view!r}")
    return np.stack([u * resolution, v * resolution, depth], axis=1)


def _raster_coverage(ax, ay, bx, by, cx, cy, width, height):
    """Covered pixel centers and barycentric weights for one triangle."""
    lo_x = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
    hi_x = min(int(np.ceil(max(ax, bx, cx) + 0.5)), width - 1)
    lo_y = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
    hi_y = min(int(np.ceil(max(ay, by, cy) + 0.5)), height - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return None
    area2 = edge_function(cx, cy, ax, ay, bx, by)
    if area2 == 0.0:
        return None
    cols, rows = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
    px = cols + 0.5
    py = rows + 0.5
    e_ab = edge_function(px, py, ax, ay, bx, by)
    e_bc = edge_function(px, py, bx, by, cx, cy)
    e_ca = edge_function(px, py, cx, cy, ax, ay)
    inside = ((e_ab >= 0) & (e_bc >= 0) & (e_ca >= 0)) | \
             ((e_ab <= 0) & (e_bc <= 0) & (e_ca <= 0))
    if not inside.any():
        return None
    w_a = e_bc[inside] / area2
    w_b = e_ca[inside] / area2
    w_c = e_ab[inside] / area2
    return cols[inside], rows[inside], w_a, w_b, w_c


def render_depth_ortho(mesh: TriMesh, view: str, resolution: int = 512) -> DepthImage:
    """Z-buffered orthographic depth render of one view (near = bright)."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot render an empty mesh")
    proj = _project_pixels(mesh.vertices, view, resolution)
    zbuf = np.zeros((resolution, resolution))
    for f in mesh.faces:
        a, b, c = proj[f[0]], proj[f[1]], proj[f[2]]
        hit = _raster_coverage(a[0], a[1], b[0], b[1], c[0], c[1],
                               resolution, resolution)
        if hit is None:
            continue
        cols, rows, w_a, w_b, w_c = hit
        depth = w_a * a[2] + w_b * b[2] + w_c * c[2]
        depth = np.clip(depth, 1e-4, 1.0)   # keep geometry above background 0
        better = depth > zbuf[rows, cols]
        zbuf[rows[better], cols[better]] = depth[better]
    meta = {"view": view, "window": list(VIEW_WINDOW), "depth_range": list(DEPTH_RANGE),
            "mirror": view == "back", "resolution": resolution}
    return DepthImage(zbuf, meta)


def composite_front_back(front: DepthImage, back: DepthImage) -> DepthImage:
    """Concatenate the two half views side by side (front left, back right)."""
    if front.values.shape != back.values.shape:
        raise ValueError(
            f"half sizes differ: {front.values.shape} vs {back.values.shape}")
    values = np.hstack([front.values, back.values])
    meta = {"front": front.metadata, "back": back.metadata,
            "layout": "front_left_back_right"}
    return DepthImage(values, meta)


# ---------------------------------------------------------------------------
# stand-in colorizer

def stub_colorize(depth: DepthImage, style_seed: int = 0) -> RgbImage:
    """Deterministic procedural coloring of the covered pixels.

    One seeded palette colors both halves, so cross-view consistency holds by
    construction; depth shades the pattern so geometry stays legible.
    """
    rng = np.random.default_rng(np.random.SeedSequence([style_seed, 9099]))
    n_colors = int(rng.integers(3, 6))
    palette = rng.integers(45, 230, size=(n_colors, 3)).astype(np.float64)
    stripes = int(rng.integers(6, 14))
    checker = bool(rng.random() < 0.4)
    cell = max(8, depth.height // 16)

    h, w = depth.values.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if checker:
        idx = ((rows // cell) + (cols // cell)) % n_colors
    else:
        idx = (rows * stripes // h) % n_colors
    shade = 0.55 + 0.45 * depth.values
    img = palette[idx] * shade[..., None]
    mask = depth.values > 0
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[...] = np.array(BACKGROUND_RGB, dtype=np.uint8)
    out[mask] = np.clip(np.rint(img[mask]), 0, 255).astype(np.uint8)
    return RgbImage(out)


# ---------------------------------------------------------------------------
# UV parametrization

CHART_PAD = 4  # texel inset of each chart half


def uv_parametrize(mesh: TriMesh, size: int = 1024) -> TextureAtlas:
    """Assign each face to the front or back chart by normal direction and
    give it orthographic-window UVs inside its half of the atlas."""
    normals = meshkit.face_normals(mesh)
    chart = (normals[:, 2] < 0).astype(np.uint8)   # +z faces the front camera
    xmin, xmax, ymin, ymax = VIEW_WINDOW
    pad = CHART_PAD / size
    half_w = 0.5 - 2 * pad

    uv = np.empty((len(mesh.faces), 3, 2))
    for fi, f in enumerate(mesh.faces):
        for ci in range(3):
            x, y = mesh.vertices[f[ci], 0], mesh.vertices[f[ci], 1]
            u_norm = (x - xmin) / (xmax - xmin)
            v_norm = (ymax - y) / (ymax - ymin)
            u = pad + u_norm * half_w + (0.5 if chart[fi] else 0.0)
            v = pad + v_norm * (1.0 - 2 * pad)
            uv[fi, ci] = (u, v)
    return TextureAtlas(size=size, chart=chart, uv=uv)


def _owner_map(atlas: TextureAtlas) -> tuple[np.ndarray, np.ndarray]:
    """Per-texel owning face (-1 = none) and barycentric weights."""
    size = atlas.size
    owner = np.full((size, size), -1, dtype=np.int64)
    bary = np.zeros((size, size, 3))
    for fi in range(len(atlas.uv)):
        (ax, ay), (bx, by), (cx, cy) = atlas.uv[fi] * size
        hit = _raster_coverage(ax, ay, bx, by, cx, cy, size, size)
        if hit is None:
            continue
        cols, rows, w_a, w_b, w_c = hit
        free = owner[rows, cols] < 0   # ties -> lowest face index
        owner[rows[free], cols[free]] = fi
        bary[rows[free], cols[free], 0] = w_a[free]
        bary[rows[free], cols[free], 1] = w_b[free]
        bary[rows[free], cols[free], 2] = w_c[free]
    return owner, bary


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) image at float pixel coords with edge clamping."""
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def project_texture(mesh: TriMesh, atlas: TextureAtlas, rgb: RgbImage,
                    dilation: int = 2) -> TextureAtlas:
    """Fill atlas texels by projecting their 3-D location into the composited
    RGB image; unreached texels are filled by iterative neighbor dilation."""
    if atlas.chart is None or atlas.uv is None:
        raise ValueError("atlas has no chart assignment; run uv_parametrize first")
    if rgb.width % 2 != 0:
        raise ValueError("composited RGB width must be even (two views)")
    owner, bary = _owner_map(atlas)
    rows, cols = np.nonzero(owner >= 0)
    faces = owner[rows, cols]
    w = bary[rows, cols]   # (N, 3)

    tri = mesh.vertices[mesh.faces[faces]]            # (N, 3 corners, xyz)
    pts = np.einsum("nc,ncx->nx", w, tri)
    xmin, xmax, ymin, ymax = atlas.window
    u_norm = (pts[:, 0] - xmin) / (xmax - xmin)
    v_norm = (ymax - pts[:, 1]) / (ymax - ymin)
    is_back = atlas.chart[faces] == 1
    u_comp = np.where(is_back, 0.5 + u_norm / 2.0, u_norm / 2.0)

    px = u_comp * rgb.width - 0.5
    py = v_norm * rgb.height - 0.5
    colors = _bilinear(rgb.pixels.astype(np.float64), px, py)

    texels = atlas.texels.copy()
    coverage = np.zeros_like(atlas.coverage)
    texels[rows, cols] = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    coverage[rows, cols] = 1

    filled = coverage > 0
    work = texels.astype(np.float64)
    for _ in range(dilation):
        empty = ~filled
        acc = np.zeros(texels.shape, dtype=np.float64)
        cnt = np.zeros(texels.shape[:2])
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                src = np.roll(np.roll(work, dy, axis=0), dx, axis=1)
                msk = np.roll(np.roll(filled, dy, axis=0), dx, axis=1)
                acc += src * msk[..., None]
                cnt += msk
        grow = empty & (cnt > 0)
        work[grow] = acc[grow] / cnt[grow][..., None]
        coverage[grow] = 2
        filled = filled | grow
    texels = np.clip(np.rint(work), 0, 255).astype(np.uint8)
    texels[~filled] = BACKGROUND_RGB
    return TextureAtlas(size=atlas.size, texels=texels, chart=atlas.chart,
                        uv=atlas.uv, coverage=coverage, window=atlas.window)


def render_textured(mesh: TriMesh, atlas: TextureAtlas, view: str,
                    resolution: int = 512) -> RgbImage:
    """Rasterize the mesh sampling the atlas (validation / preview path)."""
    proj = _project_pixels(mesh.vertices, view, resolution)
    zbuf = np.zeros((resolution, resolution))
    out = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    out[...] = np.array(BACKGROUND_RGB, dtype=np.uint8)
    tex = atlas.texels.astype(np.float64)
    for fi, f in enumerate(mesh.faces):
        a, b, c = proj[f[0]], proj[f[1]], proj[f[2]]
        hit = _raster_coverage(a[0], a[1], b[0], b[1], c[0], c[1],
                               resolution, resolution)
        if hit is None:
            continue
        cols, rows, w_a, w_b, w_c = hit
        depth = np.clip(w_a * a[2] + w_b * b[2] + w_c * c[2], 1e-4, 1.0)
        better = depth > zbuf[rows, cols]
        if not better.any():
            continue
        cols, rows = cols[better], rows[better]
        w3 = np.stack([w_a[better], w_b[better], w_c[better]], axis=1)
        uv = (w3[:, :, None] * atlas.uv[fi][None]).sum(axis=1) * atlas.size
        colors = _bilinear(tex, uv[:, 0] - 0.5, uv[:, 1] - 0.5)
        zbuf[rows, cols] = depth[better]
        out[rows, cols] = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    return RgbImage(out)


# ---------------------------------------------------------------------------
# file exchange

def save_depth_png(depth: DepthImage, path):
    """16-bit grayscale PNG plus JSON view-metadata sidecar."""
    arr = np.clip(np.rint(depth.values * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump(depth.metadata, fh, indent=2, sort_keys=True)


def load_depth_png(path) -> DepthImage:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 65535.0
    meta_path = str(path) + ".json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    return DepthImage(arr, meta)


def save_rgb_png(rgb: RgbImage, path):
    Image.fromarray(rgb.pixels, mode="RGB").save(path)


def load_rgb_png(path) -> RgbImage:
    img = Image.open(path).convert("RGB")
    return RgbImage(np.asarray(img, dtype=np.uint8))


def export_textured(mesh: TriMesh, atlas: TextureAtlas, out_prefix) -> dict:
    """Write OBJ + MTL + PNG; the OBJ carries per-corner vt records."""
    obj_path = str(out_prefix) + ".obj"
    mtl_path = str(out_prefix) + ".mtl"
    png_path = str(out_prefix) + ".png"
    # OBJ vt convention: origin bottom-left, ours runs down the raster
    uv_flipped = atlas.uv.copy()
    uv_flipped[..., 1] = 1.0 - uv_flipped[..., 1]
    textured = TriMesh(mesh.vertices.copy(), mesh.faces.copy(), uv=uv_flipped)
    meshkit.save_obj(textured, obj_path, mtl_name=os.path.basename(mtl_path))
    with open(mtl_path, "w") as fh:
        fh.write("newmtl material0\nKd 1 1 1\nmap_Kd %s\n" % os.path.basename(png_path))
    Image.fromarray(atlas.texels, mode="RGB").save(png_path)
    return {"obj": obj_path, "mtl": mtl_path, "png": png_path}
