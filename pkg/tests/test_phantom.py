import numpy as np
import pytest

from scanfuse.fields import AnalyticField, evaluate_grid, intersect
from scanfuse.metrics import compute_metrics
from scanfuse.phantom import (
    PHANTOMS,
    Box,
    Capsule,
    Csg,
    Ellipsoid,
    ScanSpec,
    Sphere,
    analytic_field,
    dilate_along,
    make_phantom,
    parse_shape,
    simulate_scan,
)
from scanfuse.meshing import sample_mesh_surface
from scanfuse.pointcloud import ViewTag

SPHERE = Sphere((0, 0, 0), 0.5)


def test_sphere_values():
    f = analytic_field(SPHERE)
    assert f.value((0, 0, 0)) == -0.5
    assert f.value((1, 0, 0)) == 0.5


def test_union_of_spheres_at_origin():
    f = analytic_field("union(sphere(center=[0.5,0,0], r=0.3), sphere(center=[-0.5,0,0], r=0.3))")
    assert f.value((0, 0, 0)) == pytest.approx(0.2, abs=1e-15)


def test_box_is_exact_outside_and_inside():
    b = Box((0, 0, 0), (0.5, 0.5, 0.5))
    np.testing.assert_allclose(b.sdf(np.array([(1.0, 1.0, 0.0), (0.0, 0.0, 0.0), (0.8, 0, 0)])),
                               [np.sqrt(0.5), -0.5, 0.3])


def test_ellipsoid_is_lower_bound():
    e = Ellipsoid((0, 0, 0), (0.6, 0.3, 0.4))
    pts = np.random.default_rng(0).uniform(-1, 1, size=(300, 3))
    # distance to a dense surface sample bounds the true distance from above
    u = np.random.default_rng(1).normal(size=(200000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    surf = u * np.array(e.radii)
    from scipy.spatial import cKDTree

    d, _ = cKDTree(surf).query(pts)
    assert np.all(np.abs(e.sdf(pts)) <= d + 1e-9)


def test_capsule_distance():
    c = Capsule((0, 0, 0), (1, 0, 0), 0.25)
    np.testing.assert_allclose(c.sdf(np.array([(0.5, 1.0, 0.0), (-1.0, 0, 0), (0.5, 0, 0)])),
                               [0.75, 0.75, -0.25])


@pytest.mark.parametrize("name", sorted(PHANTOMS))
def test_spec_text_round_trip(name):
    spec = PHANTOMS[name]
    again = parse_shape(spec.to_text())
    pts = np.random.default_rng(0).uniform(-1, 1, size=(500, 3))
    np.testing.assert_array_equal(again.sdf(pts), spec.sdf(pts))


@pytest.mark.parametrize("text", [
    "sphere(center=[0,0,0])",
    "cube(center=[0,0,0], r=1)",
    "union(sphere(center=[0,0,0], r=1))",
    "sphere(center=[0,0], r=1)",
    "sphere(center=[0,0,0], r=1",
    "difference(sphere(center=[0,0,0], r=1), sphere(center=[0,0,0], r=1), sphere(center=[0,0,0], r=1))",
])
def test_malformed_specs(text):
    with pytest.raises(ValueError, match="shape spec|needs two|3-vector"):
        parse_shape(text)


def test_dilation_identity_and_capsule_oracle():
    f = AnalyticField(SPHERE)
    assert dilate_along(f, (1, 0, 0), 0.0) is f
    d = dilate_along(f, (1, 0, 0), 0.2)
    assert d.value((0.6, 0, 0)) == pytest.approx(0.0, abs=1e-15)
    cap = Capsule((-0.1, 0, 0), (0.1, 0, 0), 0.5)
    # along the axis and on the equator the 9-tap min equals the capsule distance
    pts = np.array([(0.9, 0, 0), (-0.75, 0, 0), (0, 0.7, 0), (0.1, 0.0, 0.3)])
    np.testing.assert_allclose(d(pts), cap.sdf(pts), atol=1e-12)


def test_dilation_is_monotone():
    f = AnalyticField(PHANTOMS["VertebraToy"])
    pts = np.random.default_rng(2).uniform(-1, 1, size=(2000, 3))
    assert np.all(dilate_along(f, (0.3, 0.9, 0.1), 0.15)(pts) <= f(pts))


def test_intersection_recovers_convex_truth_at_zero_thickness():
    g = AnalyticField(Ellipsoid((0, 0, 0), (0.5, 0.4, 0.3)))
    fused = intersect(dilate_along(g, (1, 0, 0), 0.0), dilate_along(g, (0, 1, 0), 0.0))
    np.testing.assert_array_equal(evaluate_grid(fused, 17).values, evaluate_grid(g, 17).values)


def test_intersection_error_shrinks_with_thickness():
    g = AnalyticField(Ellipsoid((0, 0, 0), (0.5, 0.4, 0.3)))
    pts = np.random.default_rng(3).uniform(-1, 1, size=(3000, 3))
    errs = []
    for t in (0.3, 0.1, 0.02):
        fused = intersect(dilate_along(g, (1, 0, 0), t), dilate_along(g, (0, 1, 0), t))
        errs.append(np.abs(fused(pts) - g(pts)).max())
    assert errs[0] > errs[1] > errs[2]


def test_undistorted_scan_lies_on_sphere():
    cloud = simulate_scan(SPHERE, ScanSpec(thickness=0.0, n_points=500, seed=1))
    assert np.abs(np.linalg.norm(cloud.points, axis=1) - 0.5).max() < 1e-5


def test_scan_extent_and_slices():
    scan = ScanSpec(direction=(1, 0, 0), thickness=0.2, n_points=3000, seed=2)
    cloud = simulate_scan(SPHERE, scan, ViewTag.ROW)
    ext = cloud.points.max(0) - cloud.points.min(0)
    assert ext[0] == pytest.approx(1.2, abs=0.02)
    assert ext[1] == pytest.approx(1.0, abs=0.02)
    k = cloud.points[:, 0] / scan.slice_spacing
    assert np.abs(k - np.round(k)).max() * scan.slice_spacing < 1e-9
    assert cloud.view_tag == ViewTag.ROW


def test_scan_non_orthogonal_direction():
    u = (np.cos(np.radians(75)), np.sin(np.radians(75)), 0.0)
    scan = ScanSpec(direction=u, thickness=0.1, n_points=300, seed=4)
    cloud = simulate_scan(SPHERE, scan)
    s = cloud.points @ np.array(scan.direction) / scan.slice_spacing
    assert np.abs(s - np.round(s)).max() * scan.slice_spacing < 1e-9


def test_scan_noise_and_determinism():
    a = simulate_scan(SPHERE, ScanSpec(n_points=200, noise_sigma=0.01, seed=5))
    b = simulate_scan(SPHERE, ScanSpec(n_points=200, noise_sigma=0.01, seed=5))
    np.testing.assert_array_equal(a.points, b.points)


def test_scan_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        simulate_scan(Sphere((5, 5, 5), 0.1), ScanSpec(n_points=10))


def test_orthogonal_views_differ():
    spec = PHANTOMS["EllipsoidPair"]
    row = simulate_scan(spec, ScanSpec(direction=(1, 0, 0), thickness=0.2, n_points=2000, seed=1))
    col = simulate_scan(spec, ScanSpec(direction=(0, 1, 0), thickness=0.2, n_points=2000, seed=1))
    # each view carries a t/2 elongation the other lacks; only the extremes move
    # that far, so the averaged CD sits near t/4 while HD exceeds t/2
    r = compute_metrics(row.points, col.points)
    assert r.hd > 0.2 / 2
    assert r.cd > 0.2 / 5


def test_scan_spec_validation():
    with pytest.raises(ValueError):
        ScanSpec(thickness=1.0)
    with pytest.raises(ValueError):
        ScanSpec(direction=(0, 0, 0))


def test_unknown_phantom():
    with pytest.raises(ValueError, match="unknown phantom"):
        make_phantom("Teapot")


def test_phantom_meshes():
    spec, mesh = make_phantom("SphereCap", res=128)
    pts = sample_mesh_surface(mesh, 5000, seed=0)
    assert np.abs(spec.sdf(pts)).mean() < 0.01
    _, vmesh = make_phantom("VertebraToy", res=128)
    assert vmesh.is_watertight()
    assert PHANTOMS["EllipsoidPair"].sdf(np.zeros((1, 3)))[0] < 0


def test_vertebra_thin_features_resolve_at_256():
    # the thinnest process has radius 0.07: diameter 0.14 spans > 4 voxels of 2/255
    caps = [c for c in PHANTOMS["VertebraToy"].children if isinstance(c, Capsule)]
    assert min(2 * c.r for c in caps) / (2 / 255) >= 4
