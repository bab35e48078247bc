"""Evaluation metrics and the procedural garment corpus.

The corpus generates open parametric surfaces (skirts, tops, ponchos) with
labeled attributes directly inside the canonical [-0.5, 0.5]^3 working box,
so absolute measurements like hem-to-waist length stay meaningful across
garments. Chamfer follows the squared-distance convention with a x1000
reporting scale; `chamfer_rms` is the voxel-comparable length-unit variant.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from . import meshkit
from .meshkit import TriMesh
from .udf_field import build_bvh, udf

WAIST_Y = 0.42
LENGTH_SCALE = 0.75  # world y-extent per unit of the length parameter

FAMILIES = ("skirt", "top", "poncho")


@dataclass
class GarmentParams:
    family: str
    length: float = 0.7
    waist_radius: float = 0.15
    hem_radius: float = 0.22
    sleeve_length: float = 0.0
    wrinkle_amplitude: float = 0.02
    wrinkle_count: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        checks = [
            ("length", self.length, 0.3, 1.2),
            ("waist_radius", self.waist_radius, 0.06, 0.25),
            ("hem_radius", self.hem_radius, 0.06, 0.40),
            ("sleeve_length", self.sleeve_length, 0.0, 0.5),
            ("wrinkle_amplitude", self.wrinkle_amplitude, 0.0, 0.05),
            ("wrinkle_count", self.wrinkle_count, 0, 16),
        ]
        for name, v, lo, hi in checks:
            if not (lo <= v <= hi):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def descriptor(self) -> list[str]:
        tokens = [self.family]
        tokens.append("long" if self.length >= 0.75 else "short")
        tokens.append("flared" if self.hem_radius >= 1.5 * self.waist_radius else "straight")
        tokens.append("wrinkled" if self.wrinkle_amplitude >= 0.012 else "smooth")
        if self.family == "top":
            tokens.append("sleeved" if self.sleeve_length > 0.05 else "sleeveless")
        return tokens


@dataclass
class MetricReport:
    chamfer: float
    p2s: float
    delta_area: float
    delta_vol: float
    metadata: dict

    def __post_init__(self):
        for name in ("chamfer", "p2s", "delta_area", "delta_vol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# procedural garments

def _tube(radius_fn, y_top: float, y_bottom: float, rings: int, segments: int,
          center=(0.0, 0.0)) -> TriMesh:
    """Open tube along y; radius_fn(t, theta) with t=0 at the top ring."""
    ts = np.linspace(0.0, 1.0, rings)
    thetas = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    verts = np.empty((rings * segments, 3))
    for i, t in enumerate(ts):
        r = radius_fn(t, thetas)
        y = y_top + t * (y_bottom - y_top)
        verts[i * segments:(i + 1) * segments, 0] = center[0] + r * np.cos(thetas)
        verts[i * segments:(i + 1) * segments, 1] = y
        verts[i * segments:(i + 1) * segments, 2] = center[1] + r * np.sin(thetas)
    faces = []
    for i in range(rings - 1):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = (i + 1) * segments + j
            d = (i + 1) * segments + (j + 1) % segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def _sheet(height_fn, half_x: float, half_z: float, nu: int, nv: int) -> TriMesh:
    us = np.linspace(-1.0, 1.0, nu)
    vs = np.linspace(-1.0, 1.0, nv)
    gu, gv = np.meshgrid(us, vs, indexing="ij")
    verts = np.stack([gu.ravel() * half_x, height_fn(gu, gv).ravel(),
                      gv.ravel() * half_z], axis=1)
    faces = []
    for i in range(nu - 1):
        for j in range(nv - 1):
            a = i * nv + j
            b = i * nv + j + 1
            c = (i + 1) * nv + j
            d = (i + 1) * nv + j + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def gen_garment(params: GarmentParams) -> tuple[TriMesh, list[str]]:
    """Deterministic open mesh + descriptor tokens for one parameter set."""
    p = params
    drop = p.length * LENGTH_SCALE
    if p.family == "skirt":
        def radius(t, th):
            base = p.waist_radius + t * (p.hem_radius - p.waist_radius)
            return base + p.wrinkle_amplitude * np.sin(p.wrinkle_count * th) * t
        mesh = _tube(radius, WAIST_Y, WAIST_Y - drop, rings=25, segments=44)
    elif p.family == "top":
        def torso(t, th):
            base = p.waist_radius * (1.12 - 0.12 * t)
            return base + p.wrinkle_amplitude * np.sin(p.wrinkle_count * th) * t
        mesh = _tube(torso, WAIST_Y, WAIST_Y - drop, rings=22, segments=40)
        if p.sleeve_length > 0.05:
            r_sleeve = 0.42 * p.waist_radius
            tilt = 0.9
            # keep a clear gap to the torso and stay inside the working box
            x0_abs = p.waist_radius * 1.12 + r_sleeve + 0.035
            span = min(0.5 * p.sleeve_length,
                       (0.48 - x0_abs - np.cos(tilt) * r_sleeve) / np.sin(tilt))
            span = max(span, 0.02)
            parts = [mesh]
            for side in (-1.0, 1.0):
                y_sh = WAIST_Y - 0.02
                sleeve = _tube(lambda t, th: np.full_like(th, r_sleeve),
                               0.0, -span, rings=8, segments=18)
                lx, ly, lz = sleeve.vertices.T
                # rotate the local frame about z so the sleeve hangs outward
                ang = side * tilt
                sv = np.stack([side * x0_abs + np.cos(ang) * lx - np.sin(ang) * ly,
                               y_sh + np.sin(ang) * lx + np.cos(ang) * ly,
                               lz], axis=1)
                parts.append(TriMesh(sv, sleeve.faces))
            verts = np.vstack([m.vertices for m in parts])
            off, faces = 0, []
            for m in parts:
                faces.append(m.faces + off)
                off += len(m.vertices)
            mesh = TriMesh(verts, np.vstack(faces))
    else:  # poncho: draped curved sheet, one rim
        droop = drop * (0.9 - p.wrinkle_amplitude) / 0.9

        def height(gu, gv):
            rr = gu ** 2 + gv ** 2
            y = WAIST_Y - 0.02 - droop * rr / 2.0
            return y + p.wrinkle_amplitude * np.sin(
                p.wrinkle_count * np.arctan2(gv, gu + 1e-12)) * rr / 2.0
        mesh = _sheet(height, half_x=0.30 + 0.4 * p.hem_radius,
                      half_z=0.30 + 0.4 * p.hem_radius, nu=30, nv=30)
    lo, hi = mesh.bbox
    if (lo < -0.5 - 1e-9).any() or (hi > 0.5 + 1e-9).any():
        raise ValueError(f"generated garment escapes the unit box: {lo}, {hi}")
    return mesh, p.descriptor()


@dataclass
class CorpusItem:
    garment_id: str
    params: GarmentParams
    mesh: TriMesh
    tokens: list[str]


def sample_params(family: str, rng: np.random.Generator) -> GarmentParams:
    waist = rng.uniform(0.12, 0.22)
    hem = min(0.38, waist * rng.uniform(1.0, 2.2))
    count = int(rng.integers(3, 5))
    # keep folds star-shaped (amp*count << radius) so sheet walls never come
    # within a voxel of each other, which extraction cannot separate
    amp_cap = min(0.045, 0.7 * min(waist, hem) / count)
    amp = float(rng.choice([0.5, 0.9, 1.0])) * amp_cap
    return GarmentParams(
        family=family,
        length=rng.uniform(0.35, 1.15),
        waist_radius=waist,
        hem_radius=hem,
        sleeve_length=float(rng.uniform(0.1, 0.45)) if (family == "top" and rng.random() < 0.7) else 0.0,
        wrinkle_amplitude=amp,
        wrinkle_count=count,
        seed=int(rng.integers(0, 2 ** 31)),
    )


def make_corpus(n_train: int = 24, n_holdout: int = 8, seed: int = 0
                ) -> tuple[list[CorpusItem], list[CorpusItem]]:
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_train + n_holdout):
        family = FAMILIES[i % len(FAMILIES)]
        params = sample_params(family, rng)
        mesh, tokens = gen_garment(params)
        prefix = "train" if i < n_train else "holdout"
        items.append(CorpusItem(f"{prefix}_{i:03d}", params, mesh, tokens))
    return items[:n_train], items[n_train:]


def save_manifest(items: list[CorpusItem], path):
    data = {it.garment_id: {**asdict(it.params), "tokens": it.tokens} for it in items}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# metrics

CHAMFER_SCALE = 1e3


def _sym_mean_sq(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs nonempty point sets")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance, x1000 reporting scale."""
    return CHAMFER_SCALE * _sym_mean_sq(a, b)


def chamfer_rms(a: np.ndarray, b: np.ndarray) -> float:
    """Root of the symmetric mean squared distance, in length units."""
    return float(np.sqrt(_sym_mean_sq(a, b)))


def p2s(points: np.ndarray, mesh: TriMesh) -> float:
    """Mean unsigned distance from the points to the mesh surface."""
    points = np.atleast_2d(points)
    if len(points) == 0 or len(mesh.faces) == 0:
        raise ValueError("p2s needs nonempty inputs")
    d, _ = udf(build_bvh(mesh), points)
    return float(np.mean(d))


def delta_area(g1: TriMesh, g2: TriMesh, g_avg: TriMesh, alpha: float) -> float:
    """|area(avg) - blend of endpoint areas| for an interpolated garment."""
    a1, a2 = meshkit.surface_area(g1), meshkit.surface_area(g2)
    return abs(meshkit.surface_area(g_avg) - (alpha * a1 + (1 - alpha) * a2))


def delta_vol(g1: TriMesh, g2: TriMesh, g_avg: TriMesh, alpha: float) -> float:
    """Like delta_area but on hole-filled enclosed volumes."""
    v1 = meshkit.enclosed_volume(meshkit.fill_holes(g1))
    v2 = meshkit.enclosed_volume(meshkit.fill_holes(g2))
    va = meshkit.enclosed_volume(meshkit.fill_holes(g_avg))
    return abs(va - (alpha * v1 + (1 - alpha) * v2))


def measured_length(mesh: TriMesh) -> float:
    """Hem-to-waist extent (world y span) of a garment mesh."""
    lo, hi = mesh.bbox
    return float(hi[1] - lo[1])


# ---------------------------------------------------------------------------
# ablation runner

GEOMETRY_ROWS = ("single_stage", "no_grad_loss", "no_latent_loss", "full")
INTERP_ROWS = ("latent_loss_on", "latent_loss_off")


def run_ablation(train_items, holdout_items, variants: dict, out_dir,
                 n_pairs: int = 20, pair_seed: int = 11, resolution: int = 48):
    """Geometry + interpolation metric table over trained variants.

    `variants` maps each GEOMETRY_ROWS name to a trained model bundle (see
    garment_latent.TwoStageModel). Interpolation rows reuse "full" for
    latent_loss_on and "no_latent_loss" for latent_loss_off. Emits CSV + JSON.
    """
    import os
    from . import garment_latent as gl

    missing = [name for name in GEOMETRY_ROWS if name not in variants]
    if missing:
        raise ValueError(f"missing trained variants: {missing}")

    rows = []
    for name in GEOMETRY_ROWS:
        model = variants[name]
        cd, ps = gl.reconstruction_metrics(model, train_items, resolution=resolution)
        rows.append({"row": name, "kind": "geometry", "CD": cd, "P2S": ps,
                     "delta_area": "", "delta_vol": ""})

    rng = np.random.default_rng(pair_seed)
    pool = holdout_items if len(holdout_items) >= 2 else train_items
    pairs = [(rng.integers(0, len(pool)), rng.integers(0, len(pool)), rng.uniform())
             for _ in range(n_pairs)]
    for row_name, variant in (("latent_loss_on", "full"), ("latent_loss_off", "no_latent_loss")):
        model = variants[variant]
        das, dvs = [], []
        for i, j, alpha in pairs:
            if i == j:
                j = (int(j) + 1) % len(pool)
            g1, g2 = pool[int(i)].mesh, pool[int(j)].mesh
            g_avg = gl.decode_interpolated(model, g1, g2, float(alpha), resolution=resolution)
            das.append(delta_area(g1, g2, g_avg, float(alpha)))
            dvs.append(delta_vol(g1, g2, g_avg, float(alpha)))
        rows.append({"row": row_name, "kind": "interpolation", "CD": "", "P2S": "",
                     "delta_area": float(np.mean(das)), "delta_vol": float(np.mean(dvs))})

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["row", "kind", "CD", "P2S", "delta_area", "delta_vol"])
        w.writeheader()
        w.writerows(rows)
    json_path = os.path.join(out_dir, "ablation.json")
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    return rows
