import numpy as np
import pytest

from scanfuse.autodiff import Value
from scanfuse.network import (
    Network,
    NetworkArch,
    Role,
    eval_sdf,
    init_network,
    load_network,
    network_from_bytes,
    project_to_surface,
    snapshot_bytes,
    spatial_gradient,
)


def hand_net(w1, b1, w2, b2):
    arch = NetworkArch(n_layers=1, hidden=len(b1), skip_at=None)
    return Network(arch, [np.asarray(w1, float), np.asarray(w2, float)],
                   [np.asarray(b1, float), np.asarray(b2, float)])


def relu_x1_net():
    # f(x) = relu(x1) - 0.5
    return hand_net([[1, 0, 0]], [0.0], [[1.0]], [-0.5])


def linear_net():
    # f(x) = relu(2 x1 + 3 x2 + 100) - 100 = 2 x1 + 3 x2 near the origin
    return hand_net([[2, 3, 0]], [100.0], [[1.0]], [-100.0])


def test_arch_layer_widths():
    dims = NetworkArch(8, 256, 4).layer_dims()
    assert len(dims) == 9
    assert dims[3] == (256, 253)
    assert dims[4] == (256, 256)
    assert dims[-1] == (256, 1)


@pytest.mark.parametrize("skip", [0, 8, 9])
def test_arch_rejects_bad_skip(skip):
    with pytest.raises(ValueError):
        NetworkArch(8, 256, skip)


def test_hand_forward():
    net = relu_x1_net()
    assert eval_sdf(net, (1, 0, 0)) == 0.5
    assert eval_sdf(net, (-1, 0, 0)) == -0.5


def test_batch_equals_single():
    net = init_network(NetworkArch(4, 32, 2), seed=0)
    pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
    batch = net(pts)
    single = np.array([eval_sdf(net, p) for p in pts])
    # BLAS may block a batched product differently from a single row
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-15)


def test_graph_forward_matches_numpy_forward():
    net = init_network(NetworkArch(4, 32, 2), seed=1)
    pts = np.random.default_rng(1).uniform(-1, 1, size=(9, 3))
    np.testing.assert_allclose(net.forward(Value(pts)).data[:, 0], net(pts), rtol=1e-14)


@pytest.mark.parametrize("arch", [NetworkArch(8, 256, 4), NetworkArch(4, 64, 2)])
def test_geometric_init_sign(arch):
    net = init_network(arch, seed=0)
    assert eval_sdf(net, (0, 0, 0)) < 0
    assert eval_sdf(net, (0.9, 0.9, 0.9)) > 0


def test_geometric_init_gradient_points_outward():
    net = init_network(NetworkArch(8, 256, 4), seed=0)
    g = spatial_gradient(net, [(0.8, 0, 0)])[0]
    angle = np.degrees(np.arccos(g[0] / np.linalg.norm(g)))
    assert angle < 15


def test_init_deterministic():
    a = init_network(NetworkArch(4, 32, 2), seed=9)
    b = init_network(NetworkArch(4, 32, 2), seed=9)
    for x, y in zip(a.parameter_arrays(), b.parameter_arrays()):
        np.testing.assert_array_equal(x, y)


def test_finite_outputs_on_box():
    net = init_network(NetworkArch(8, 256, 4), seed=2)
    pts = np.random.default_rng(2).uniform(-2, 2, size=(500, 3))
    assert np.isfinite(net(pts)).all()


def test_linear_gradient():
    g = spatial_gradient(linear_net(), [(0.1, -0.3, 0.7), (0.0, 0.0, 0.0)])
    np.testing.assert_allclose(g, [[2, 3, 0], [2, 3, 0]])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = init_network(NetworkArch(3, 16, 1), seed=5)
    for w in net.weights:
        w += rng.normal(scale=0.3, size=w.shape)
    pts = rng.uniform(-1, 1, size=(10, 3))
    g = spatial_gradient(net, pts)
    h = 1e-5
    fd = np.stack([(net(pts + h * e) - net(pts - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    rel = np.linalg.norm(g - fd, axis=1) / np.linalg.norm(fd, axis=1)
    assert rel.max() < 1e-6


def unit_sphere(x):
    return (x * x).sum(axis=1, keepdims=True).sqrt() - 1.0


def test_project_zero_displacement_on_surface():
    np.testing.assert_allclose(project_to_surface(unit_sphere, [(0, 1, 0)]), [(0, 1, 0)])


@pytest.mark.parametrize("x", [(2, 0, 0), (0.5, 0, 0)])
def test_project_onto_sphere(x):
    np.testing.assert_allclose(project_to_surface(unit_sphere, [x]), [(1, 0, 0)], atol=1e-15)


def test_project_plane_exact():
    def plane(x):
        return (x * Value([[0.0, 0.0, 1.0]])).sum(axis=1, keepdims=True) - 0.25

    pts = np.random.default_rng(0).uniform(-1, 1, size=(50, 3))
    out = project_to_surface(plane, pts)
    np.testing.assert_allclose(out[:, 2], 0.25, atol=1e-15)
    np.testing.assert_array_equal(out[:, :2], pts[:, :2])


def test_project_unnormalized_uses_raw_gradient():
    def doubled(x):
        return unit_sphere(x) * 2.0

    # raw step: x - f * grad = 2 - 2 * 2 = -2 along x
    np.testing.assert_allclose(project_to_surface(doubled, [(2, 0, 0)], normalize_direction=False), [(-2, 0, 0)])
    np.testing.assert_allclose(project_to_surface(doubled, [(2, 0, 0)]), [(0, 0, 0)])


def test_project_degenerate_gradient():
    with pytest.raises(ValueError, match="degenerate"):
        project_to_surface(lambda x: (x * 0.0).sum(axis=1, keepdims=True) + 1.0, [(0.3, 0, 0)])


def test_snapshot_round_trip(tmp_path):
    net = init_network(NetworkArch(4, 32, 2), seed=3, role=Role.COL)
    path = tmp_path / "n.rcsn"
    net.save(path)
    back = load_network(path)
    assert back.arch == net.arch and back.role == Role.COL and back.seed == 3
    for a, b in zip(net.parameter_arrays(), back.parameter_arrays()):
        np.testing.assert_array_equal(a.astype(np.float32), b)
    assert snapshot_bytes(back) == path.read_bytes()


def test_snapshot_layout_is_output_major():
    net = hand_net([[1, 2, 3], [4, 5, 6]], [7, 8], [[9, 10]], [11])
    raw = snapshot_bytes(net)
    blob = np.frombuffer(raw[raw.index(b"end\n") + 4:], dtype="<f4")
    np.testing.assert_array_equal(blob, np.arange(1, 12))


def test_snapshot_truncated_reports_offset():
    raw = snapshot_bytes(init_network(NetworkArch(2, 8, 1), seed=0))
    with pytest.raises(ValueError, match="byte offset"):
        network_from_bytes(raw[:-5])
