"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``CRITERION n: PASS|FAIL ...`` line (shown even
under pytest's output capture). Criteria 5, 6 and 10 run the desk pipeline
three times in total and take roughly a quarter of an hour on one core.
"""

import json
import time

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from scanfuse import pipeline as P
from scanfuse.autodiff import Value, concat, input_gradient
from scanfuse.fields import AnalyticField, NetworkField, evaluate_grid, intersect
from scanfuse.meshing import marching_cubes, sample_mesh_surface
from scanfuse.metrics import compute_metrics
from scanfuse.network import Network, NetworkArch, init_network, projection_graph
from scanfuse.phantom import Sphere
from scanfuse.pointcloud import PointCloud, sample_training_queries
from scanfuse.refine import RefineConfig, sample_refinement_set
from scanfuse.selfsup import SelfSupConfig, train_view


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def central_diff(fn, arr, h):
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# -- 1. first-order gradients on random graphs ----------------------------------------

class KinkError(Exception):
    pass


def _random_graph(rng):
    """A random expression over three (3, 3) parameter leaves; returns (params, loss_fn)."""
    params = [Value(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(3)]
    n_ops = int(rng.integers(3, 8))
    plan = [(str(rng.choice(["add", "mul", "div", "relu", "exp", "abs", "sqrt", "matmul", "T", "rowsum",
                             "concat"])), int(rng.integers(0, 100)), int(rng.integers(0, 100)))
            for _ in range(n_ops)]
    weights = rng.normal(size=(3, 3))

    def loss(check_kinks=False):
        pool = list(params)
        for op, i, j in plan:
            a, b = pool[i % len(pool)], pool[j % len(pool)]
            if op in ("relu", "abs") and check_kinks and np.abs(a.data).min() < 1e-2:
                raise KinkError
            out = {
                "add": lambda: a + b,
                "mul": lambda: a * b,
                "div": lambda: a / (b * b + 1.0),
                "relu": lambda: a.relu(),
                "exp": lambda: (a * 0.3).exp(),
                "abs": lambda: a.abs(),
                "sqrt": lambda: (a * a + 1.0).sqrt(),
                "matmul": lambda: a @ b,
                "T": lambda: a.T,
                "rowsum": lambda: a.sum(axis=1, keepdims=True) * b,
                "concat": lambda: concat([a, b], axis=1).sum(axis=1, keepdims=True) * 0.5 + a,
            }[op]()
            pool.append(out)
        return (pool[-1] * Value(weights)).sum()

    return params, loss


def test_criterion_1_first_order_gradients(report):
    t0 = time.perf_counter()
    worst, graphs, seed = 0.0, 0, 0
    while graphs < 50:
        rng = np.random.default_rng(seed)
        seed += 1
        params, loss = _random_graph(rng)
        try:
            L = loss(check_kinks=True)
        except KinkError:
            continue
        L.backward(inputs=params)
        for p in params:
            fd = central_diff(lambda: float(loss().data), p.data, 1e-6)
            worst = max(worst, rel_err(p.grad, fd))
        graphs += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 10
    report(1, ok, f"50 random graphs, worst relative error {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 2. second-order: gradient of the projection loss ---------------------------------

def test_criterion_2_second_order_projection(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    net = init_network(NetworkArch(1, 16, None), seed=2)
    net.set_parameter_arrays([a + rng.normal(scale=0.4, size=a.shape) for a in net.parameter_arrays()])
    pts = rng.uniform(-0.8, 0.8, size=(6, 3))
    c = rng.uniform(-0.8, 0.8, size=(6, 3))

    def loss(n):
        x = Value(pts, requires_grad=True)
        f = n.forward(x)
        g = input_gradient(f, x)
        proj, valid = projection_graph(f, g, x, normalize_direction=True)
        assert valid.all()
        d = proj - Value(c)
        return (d * d).sum()

    L = loss(net)
    params = net.parameters()
    L.backward(params)
    arrays = net.parameter_arrays()
    worst = 0.0
    for k, p in enumerate(params):
        def at():
            probe = net.copy()
            probe.set_parameter_arrays(arrays)
            return float(loss(probe).data)

        fd = central_diff(at, arrays[k], 1e-6)
        worst = max(worst, rel_err(p.grad, fd))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    report(2, ok, f"2-layer net, worst relative error {worst:.2e} (< 1e-4), {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 3. desk-scale sphere fit ----------------------------------------------------------------

def test_criterion_3_sphere_fit(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    p = rng.normal(size=(2000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    queries = sample_training_queries(PointCloud(p), 20, 50, n_uniform=4000, seed=1)
    net, _ = train_view(queries, SelfSupConfig(iterations=2000, batch=5000, seed=0), NetworkArch(4, 64, 2))

    x = rng.normal(size=(20000, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x *= rng.uniform(0.9, 1.1, size=(20000, 1))
    band = float(np.mean(np.abs(net(x) - (np.linalg.norm(x, axis=1) - 1.0))))

    # the unit sphere touches the cube faces, so both meshes use a slightly larger box
    box = ((-1.1,) * 3, (1.1,) * 3)
    recon = marching_cubes(evaluate_grid(NetworkField(net), 64, box))
    truth = marching_cubes(evaluate_grid(AnalyticField(Sphere((0, 0, 0), 1.0)), 64, box))
    cd = compute_metrics(sample_mesh_surface(recon, 30000, 1), sample_mesh_surface(truth, 30000, 2)).cd
    elapsed = time.perf_counter() - t0
    ok = band < 0.02 and cd < 0.02 and elapsed < 300
    report(3, ok, f"band error {band:.4f} (< 0.02), mesh CD {cd:.4f} (< 0.02), {elapsed:.0f} s (< 300 s)")
    assert ok


# -- 4. CSG exactness ----------------------------------------------------------------

def test_criterion_4_csg_exact(report):
    t0 = time.perf_counter()
    a = NetworkField(init_network(NetworkArch(4, 64, 2), seed=10))
    b = NetworkField(init_network(NetworkArch(4, 64, 2), seed=11))
    axis = np.linspace(-1, 1, 33)
    nodes = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    fused = intersect(a, b)(nodes)
    exact64 = np.array_equal(fused, np.maximum(a(nodes), b(nodes)))
    g = evaluate_grid(intersect(a, b), 33)
    exact32 = np.array_equal(g.values, np.maximum(evaluate_grid(a, 33).values, evaluate_grid(b, 33).values))
    elapsed = time.perf_counter() - t0
    ok = exact64 and exact32 and elapsed < 5
    report(4, ok, f"33^3 grid bitwise f64={exact64} f32 grid={exact32}, {elapsed:.2f} s (< 5 s)")
    assert ok


# -- 5, 6, 10. desk pipeline runs ----------------------------------------------------

def _run(tmp_path_factory, phantom, name):
    out = tmp_path_factory.mktemp(name)
    cfg = P.resolve_config({"phantom": phantom}, preset="desk", seed=0, out=str(out))
    t0 = time.perf_counter()
    manifest = P.run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    cds = {n: float((out / f"metrics_{n}.csv").read_text().splitlines()[1].split(",")[0])
           for n in P.MESH_NAMES}
    return {"out": out, "manifest": manifest, "elapsed": elapsed, "cd": cds}


@pytest.fixture(scope="module")
def ellipsoid_run(tmp_path_factory):
    return _run(tmp_path_factory, "EllipsoidPair", "ellipsoid")


@pytest.fixture(scope="module")
def vertebra_runs(tmp_path_factory):
    return [_run(tmp_path_factory, "VertebraToy", f"vertebra{i}") for i in (1, 2)]


def test_criterion_5_fusion_beats_single_views(ellipsoid_run, report):
    cd = ellipsoid_run["cd"]
    gain_row = 1 - cd["refined"] / cd["row"]
    gain_col = 1 - cd["refined"] / cd["col"]
    ok = gain_row >= 0.15 and gain_col >= 0.15 and ellipsoid_run["elapsed"] < 1200
    report(5, ok, f"EllipsoidPair CD row {cd['row']:.4f} col {cd['col']:.4f} refined {cd['refined']:.4f}: "
                  f"{100 * gain_row:.1f}% / {100 * gain_col:.1f}% lower (>= 15%), "
                  f"{ellipsoid_run['elapsed']:.0f} s (< 1200 s)")
    assert ok


def test_criterion_6_refinement_not_worse_than_csg(vertebra_runs, report):
    cd = vertebra_runs[0]["cd"]
    ok = cd["refined"] <= cd["csg"]
    report(6, ok, f"VertebraToy CD refined {cd['refined']:.5f} <= direct CSG {cd['csg']:.5f}")
    assert ok


def test_criterion_10_determinism(vertebra_runs, report):
    a, b = (r["out"] / "manifest.json" for r in vertebra_runs)
    same = a.read_bytes() == b.read_bytes()
    n = len(json.loads(a.read_text())["artifacts"])
    report(10, same, f"two desk runs, manifests byte-identical={same} ({n} artifacts hashed)")
    assert same


# -- 7. marching cubes ----------------------------------------------------------------

def test_criterion_7_marching_cubes(report):
    t0 = time.perf_counter()
    mesh = marching_cubes(evaluate_grid(AnalyticField(Sphere((0, 0, 0), 0.5)), 64))
    err = abs(float(np.linalg.norm(mesh.vertices, axis=1).mean()) - 0.5)
    watertight = mesh.is_watertight()
    from scanfuse.phantom import PHANTOMS

    closed = all(marching_cubes(evaluate_grid(AnalyticField(PHANTOMS[k]), 64)).is_watertight()
                 for k in PHANTOMS)
    elapsed = time.perf_counter() - t0
    ok = err < 0.03125 and watertight and closed and elapsed < 10
    report(7, ok, f"mean radius error {err:.2e} (< 0.03125), sphere watertight={watertight}, "
                  f"phantoms watertight={closed}, {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 8. metrics vs brute force ---------------------------------------------------------

def _brute_metrics(a, b):
    dab = np.array([np.sqrt(np.sum((x - b) ** 2, axis=-1)).min() for x in a])
    dba = np.array([np.sqrt(np.sum((y - a) ** 2, axis=-1)).min() for y in b])
    return (0.5 * (dab.mean() + dba.mean()), max(dab.max(), dba.max()), dab.mean(), np.sqrt(np.mean(dab ** 2)))


def test_criterion_8_metrics_oracle(report):
    t0 = time.perf_counter()
    mismatches = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        a = rng.normal(size=(int(rng.integers(1, 201)), 3))
        b = rng.normal(size=(int(rng.integers(1, 201)), 3))
        r = compute_metrics(a, b)
        mismatches += (r.cd, r.hd, r.mad, r.rmse) != _brute_metrics(a, b)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report(8, ok, f"100 trials, {mismatches} inexact matches (need 0), {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 9. sampler laws ----------------------------------------------------------------

def test_criterion_9_sampler_laws(report):
    t0 = time.perf_counter()
    field = AnalyticField(Sphere((0, 0, 0), 0.5))
    s = sample_refinement_set(field, RefineConfig(n_uniform=10000, n_surface=10000, seed=9,
                                                  candidate_batch=50000))
    pvalue = mannwhitneyu(np.abs(s.target[s.near_surface]), np.abs(s.target[~s.near_surface]),
                          alternative="less").pvalue
    bad = 0
    for n in (50, 200, 500):
        rng = np.random.default_rng(n)
        cloud = PointCloud(rng.uniform(-0.8, 0.8, size=(n, 3)))
        qs = sample_training_queries(cloud, per_point=4, n_uniform=300, seed=n)
        d = np.sqrt(((qs.queries[:, None] - cloud.points[None]) ** 2).sum(-1))
        best = np.lexsort((np.tile(np.arange(n), (len(d), 1)), d), axis=1)[:, 0]
        bad += int(np.sum(best != qs.nearest_index))
    elapsed = time.perf_counter() - t0
    ok = pvalue < 0.01 and bad == 0 and elapsed < 30
    report(9, ok, f"rank-sum p={pvalue:.1e} (< 0.01), {bad} nearest-neighbour mismatches on clouds "
                  f"<= 500 points, {elapsed:.2f} s (< 30 s)")
    assert ok
