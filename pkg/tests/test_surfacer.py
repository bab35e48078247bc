import numpy as np
import pytest

from garmgen import meshkit as mk
from garmgen import surfacer as sf
from garmgen import udf_field as uf
from garmgen.evalkit_data import GarmentParams, gen_garment

from geomshapes import analytic_sphere_grid, analytic_disc_grid


def test_sphere_extraction_closed_with_correct_volume():
    grid = analytic_sphere_grid(radius=0.4, resolution=64)
    mesh = sf.extract_mesh(grid, iso=0.5 * grid.voxel_size)
    assert len(mk.boundary_edges(mesh)) == 0
    vol = mk.enclosed_volume(mesh)
    exact = 4.0 / 3.0 * np.pi * 0.4 ** 3
    assert abs(vol - exact) / exact < 0.03


def test_disc_extraction_single_boundary_loop():
    mesh = sf.extract_mesh(analytic_disc_grid(radius=0.35, resolution=64))
    assert len(mk.boundary_loops(mesh)) == 1


def test_merged_spheres_two_components():
    a = analytic_sphere_grid(radius=0.18, resolution=64, center=(-0.25, 0, 0))
    b = analytic_sphere_grid(radius=0.18, resolution=64, center=(0.25, 0, 0))
    merged = uf.merge_udf([a.distances, b.distances])
    pick = a.distances <= b.distances
    grads = np.where(pick[:, None], a.gradients, b.gradients)
    grid = uf.UdfGrid((64,) * 3, uf.default_bounds(), merged, grads)
    mesh = sf.extract_mesh(grid)
    assert len(mk.connected_components(mesh)) == 2


def test_extraction_parameter_validation():
    grid = analytic_sphere_grid(resolution=16)
    with pytest.raises(ValueError, match="iso"):
        sf.extract_mesh(grid, iso=-1.0)
    with pytest.raises(ValueError, match="iso"):
        sf.extract_mesh(grid, iso=0.5, open_threshold=0.1)


def test_extraction_resolution_floor():
    grid = analytic_sphere_grid(resolution=16)
    small = uf.UdfGrid((7, 16, 16), grid.bounds,
                       grid.distances_3d()[:7].ravel(),
                       grid.gradients_4d()[:7].reshape(-1, 3))
    with pytest.raises(ValueError, match=">= 8"):
        sf.extract_mesh(small)


def test_extraction_deterministic():
    grid = analytic_sphere_grid(radius=0.3, resolution=32)
    m1 = sf.extract_mesh(grid)
    m2 = sf.extract_mesh(grid)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.faces, m2.faces)


def test_extraction_vertices_near_surface():
    mesh, _ = gen_garment(GarmentParams("skirt"))
    bvh = uf.build_bvh(mesh)
    grid = uf.sample_grid(bvh, 48)
    out = sf.extract_mesh(grid)
    d, _ = uf.udf(bvh, out.vertices)
    assert d.max() < np.sqrt(3) * grid.voxel_size


def test_extraction_no_degenerate_faces():
    mesh, _ = gen_garment(GarmentParams("top", sleeve_length=0.3))
    out = sf.extract_mesh(uf.sample_grid(uf.build_bvh(mesh), 48))
    areas = mk.face_areas(out)
    assert areas.min() > 0


@pytest.mark.parametrize("family,kw", [
    ("skirt", {}),
    ("top", {"sleeve_length": 0.3}),
    ("poncho", {}),
])
def test_round_trip_boundary_loops_preserved(family, kw):
    mesh, _ = gen_garment(GarmentParams(family, **kw))
    out = sf.extract_mesh(uf.sample_grid(uf.build_bvh(mesh), 64))
    assert len(mk.boundary_loops(out)) == len(mk.boundary_loops(mesh))


def test_round_trip_error_resolution_monotone():
    mesh, _ = gen_garment(GarmentParams("skirt", length=0.8))
    cd64, p64 = sf.round_trip_error(mesh, 64)
    cd128, _ = sf.round_trip_error(mesh, 128)
    voxel = 1.1 / 63
    assert cd64 < 2 * voxel
    assert cd128 <= cd64
    assert p64 < voxel
