import numpy as np
import pytest

from garmgen import evalkit_data as ek
from garmgen import meshkit as mk
from garmgen.evalkit_data import GarmentParams, gen_garment

from geomshapes import unit_cube


# ---------------------------------------------------------------------------
# procedural garments

def test_gen_garment_length_scaling():
    long_skirt, _ = gen_garment(GarmentParams("skirt", length=1.0))
    short_skirt, _ = gen_garment(GarmentParams("skirt", length=0.4))
    ratio = ek.measured_length(long_skirt) / ek.measured_length(short_skirt)
    assert ratio == pytest.approx(2.5, rel=0.05)


@pytest.mark.parametrize("family", ek.FAMILIES)
def test_gen_garment_is_open(family):
    mesh, _ = gen_garment(GarmentParams(family))
    assert len(mk.boundary_loops(mesh)) >= 1


def test_gen_garment_deterministic():
    p = GarmentParams("top", sleeve_length=0.3, wrinkle_amplitude=0.02)
    m1, t1 = gen_garment(p)
    m2, t2 = gen_garment(p)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.faces, m2.faces)
    assert t1 == t2


def test_gen_garment_range_validation():
    with pytest.raises(ValueError, match="length"):
        GarmentParams("skirt", length=2.0)
    with pytest.raises(ValueError, match="family"):
        GarmentParams("hat")


def test_descriptor_tokens():
    p = GarmentParams("skirt", length=1.0, waist_radius=0.1, hem_radius=0.3,
                      wrinkle_amplitude=0.03, wrinkle_count=4)
    tokens = p.descriptor()
    assert "skirt" in tokens and "long" in tokens
    assert "flared" in tokens and "wrinkled" in tokens
    p2 = GarmentParams("top", length=0.5, sleeve_length=0.3,
                       wrinkle_amplitude=0.0)
    tokens2 = p2.descriptor()
    assert "short" in tokens2 and "smooth" in tokens2 and "sleeved" in tokens2


def test_corpus_length_monotone_in_parameter():
    lengths = np.linspace(0.35, 1.15, 7)
    measured = []
    for L in lengths:
        mesh, _ = gen_garment(GarmentParams("skirt", length=float(L)))
        measured.append(ek.measured_length(mesh))
    assert all(b > a for a, b in zip(measured, measured[1:]))


def test_make_corpus_counts_and_manifest(tmp_path):
    train, hold = ek.make_corpus(6, 2, seed=5)
    assert len(train) == 6 and len(hold) == 2
    assert len({it.garment_id for it in train + hold}) == 8
    ek.save_manifest(train + hold, tmp_path / "manifest.json")
    import json
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert len(data) == 8
    assert all("tokens" in v for v in data.values())


# ---------------------------------------------------------------------------
# metrics

def test_chamfer_identity_zero():
    pts = np.random.default_rng(0).normal(size=(100, 3))
    assert ek.chamfer(pts, pts) == 0.0


def test_chamfer_single_points():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert ek.chamfer(a, b) == pytest.approx(1.0 * ek.CHAMFER_SCALE)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(500, 3))
    fast = ek.chamfer(a, b)
    d_ab = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1).min(axis=1)
    d_ba = ((b[:, None, :] - a[None, :, :]) ** 2).sum(-1).min(axis=1)
    slow = ek.CHAMFER_SCALE * 0.5 * (d_ab.mean() + d_ba.mean())
    assert abs(fast - slow) < 1e-12 * ek.CHAMFER_SCALE


def test_chamfer_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(80, 3))
    assert ek.chamfer(a, b) == ek.chamfer(b, a)


def test_chamfer_empty_error():
    with pytest.raises(ValueError):
        ek.chamfer(np.zeros((0, 3)), np.zeros((5, 3)))


def test_p2s_on_mesh_near_zero():
    mesh, _ = gen_garment(GarmentParams("skirt"))
    s = mk.sample_surface(mesh, 300, seed=0)
    assert ek.p2s(s.points, mesh) < 1e-9


def test_p2s_point_above_plane():
    plane = mk.TriMesh(np.array([[-5, 0, -5], [5, 0, -5], [0, 0, 5]], float),
                       np.array([[0, 1, 2]]))
    assert ek.p2s(np.array([[0.0, 0.7, 0.0]]), plane) == pytest.approx(0.7)


def test_p2s_matches_brute_force():
    from garmgen.udf_field import brute_force_udf
    mesh, _ = gen_garment(GarmentParams("poncho"))
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, (200, 3))
    d, _ = brute_force_udf(mesh, pts)
    assert ek.p2s(pts, mesh) == pytest.approx(float(d.mean()), abs=1e-12)


def _scaled_cube(volume):
    c = unit_cube()
    return mk.TriMesh(c.vertices * volume ** (1.0 / 3.0), c.faces)


def test_delta_area_cases():
    g = _scaled_cube(1.0)
    assert ek.delta_area(g, g, g, 0.3) == pytest.approx(0.0, abs=1e-12)
    g2 = _scaled_cube(2.0)
    assert ek.delta_area(g, g2, g, 1.0) == pytest.approx(0.0, abs=1e-12)
    # hand-built: areas 2, 4, 3.5 at alpha 0.5 -> |3.5 - 3| = 0.5
    tri = mk.TriMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], float),
                     np.array([[0, 1, 2]]))

    def with_area(a):
        s = np.sqrt(a / 2.0)
        return mk.TriMesh(tri.vertices * s, tri.faces)

    assert ek.delta_area(with_area(2), with_area(4), with_area(3.5), 0.5) \
        == pytest.approx(0.5)


def test_delta_vol_cases():
    g = _scaled_cube(1.0)
    assert ek.delta_vol(g, g, g, 0.7) == pytest.approx(0.0, abs=1e-12)
    g2 = _scaled_cube(2.0)
    assert ek.delta_vol(g, g2, g2, 0.0) == pytest.approx(0.0, abs=1e-12)
    gm = _scaled_cube(1.4)
    assert ek.delta_vol(g, g2, gm, 0.5) == pytest.approx(0.1)


def test_metric_report_validation():
    with pytest.raises(ValueError, match="chamfer"):
        ek.MetricReport(chamfer=-1, p2s=0, delta_area=0, delta_vol=0, metadata={})
