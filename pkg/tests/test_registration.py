import json
import warnings

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from conftest import grid_surface, sphere_surface
from refshape.registration import (
    CpdConfig,
    CpdConvergenceWarning,
    DegenerateLandmarksError,
    RigidTransform,
    closest_point_on_triangles,
    closest_points_on_surface,
    correspondence_remesh,
    cpd_nonrigid,
    procrustes_align,
    qem_simplify,
    register_manifest,
    select_template,
)
from refshape.surface import LabeledSurface, diameter, load_surface, save_surface
from refshape.synth import AnatomyParams, apply_deformity, make_template, sample_normal

SMALL = AnatomyParams(n_vertices=300, n_landmarks=6)


def unit_template():
    """Small synthetic template rescaled to diameter 1."""
    t = make_template(SMALL)
    return t.with_vertices((t.vertices - t.vertices.mean(0)) / diameter(t))


def residual(tf, src, dst):
    return float(((tf.apply(src) - dst) ** 2).sum())


# ------------------------------------------------------------------ Procrustes


def test_procrustes_identity():
    src = np.random.default_rng(0).normal(size=(6, 3))
    tf = procrustes_align(src, src)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.translation, 0, atol=1e-12)
    assert tf.scale == pytest.approx(1.0, abs=1e-12)


def test_procrustes_recovers_known_motion():
    src = np.random.default_rng(1).normal(size=(8, 3))
    rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    tf = procrustes_align(src, src @ rz.T + [1, 2, 3])
    np.testing.assert_allclose(tf.rotation, rz, atol=1e-9)
    np.testing.assert_allclose(tf.translation, [1, 2, 3], atol=1e-9)
    assert tf.scale == pytest.approx(1.0, abs=1e-9)


def test_procrustes_beats_random_transforms():
    rng = np.random.default_rng(2)
    for _ in range(5):
        src, dst = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        best = residual(procrustes_align(src, dst), src, dst)
        rots = Rotation.random(1000, random_state=rng).as_matrix()
        for r, t, s in zip(rots, rng.normal(size=(1000, 3)), rng.uniform(0.2, 3, 1000)):
            assert best <= residual(RigidTransform(r, t, s), src, dst) + 1e-12


@given(st.integers(0, 10_000))
def test_procrustes_residual_ignores_source_rotation(seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    turned = src @ Rotation.random(random_state=rng).as_matrix().T
    a = residual(procrustes_align(src, dst), src, dst)
    b = residual(procrustes_align(turned, dst), turned, dst)
    assert a == pytest.approx(b, abs=1e-9)


def test_procrustes_handles_reflection():
    src = np.random.default_rng(3).normal(size=(6, 3))
    tf = procrustes_align(src, src * [1, 1, -1])
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize(
    "src", [np.zeros((4, 3)), np.outer(np.arange(4.0), [1, 2, 3]), np.eye(3)[:2]], ids=["coincident", "collinear", "two"]
)
def test_procrustes_degenerate(src):
    with pytest.raises(DegenerateLandmarksError):
        procrustes_align(src, np.random.default_rng(0).normal(size=src.shape))


def test_rigid_transform_rejects_bad_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), np.zeros(3), 0.0)


# ------------------------------------------------------------------- template


def test_select_template_examples():
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert select_template([a]) == 0
    assert select_template([a, a.copy(), a.copy()]) == 0
    with pytest.raises(ValueError):
        select_template([])


def test_select_template_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        sets = [rng.normal(size=(5, 3)) for _ in range(10)]
        mean = sum(sets) / 10
        costs = [sum(float(np.sum((s[k] - mean[k]) ** 2)) for k in range(5)) for s in sets]
        assert select_template(sets) == min(range(10), key=lambda i: (costs[i], i))


# ------------------------------------------------------------------------- CPD


def test_cpd_config_validation():
    for kw in (dict(beta=0), dict(lam=-1), dict(w=1.0), dict(max_iter=0), dict(tol=0)):
        with pytest.raises(ValueError):
            CpdConfig(**kw)


def test_cpd_self_registration():
    t = unit_template()
    r = cpd_nonrigid(t, t.vertices)
    assert np.abs(r.surface.vertices - t.vertices).max() < 1e-3
    assert np.array_equal(r.surface.faces, t.faces)


def test_cpd_translation():
    t = unit_template()
    target = t.vertices + [0.1, 0, 0]
    r = cpd_nonrigid(t, target)
    d, _ = cKDTree(target).query(r.surface.vertices)
    assert d.mean() < 0.01


def test_cpd_known_deformation():
    tpl = make_template(SMALL)
    target = apply_deformity(sample_normal(SMALL, 2, tpl), SMALL)
    r = cpd_nonrigid(tpl, target.vertices)
    err = np.linalg.norm(r.surface.vertices - target.vertices, axis=1).mean()
    assert err < 0.05 * diameter(target)
    assert np.array_equal(r.surface.faces, tpl.faces)
    assert np.array_equal(r.surface.region, tpl.region) and np.array_equal(r.surface.landmarks, tpl.landmarks)


def test_cpd_warns_without_convergence():
    t = unit_template()
    with pytest.warns(CpdConvergenceWarning):
        r = cpd_nonrigid(t, t.vertices + 0.2, CpdConfig(max_iter=1))
    assert not r.converged and r.iterations == 1


def test_cpd_rejects_empty_target():
    with pytest.raises(ValueError):
        cpd_nonrigid(unit_template(), np.zeros((0, 3)))


# ------------------------------------------------------------------------- QEM


def test_qem_noop_when_small_enough():
    s = sphere_surface(1)
    out = qem_simplify(s, s.n_vertices)
    assert out.reached_target and out.surface is s


def test_qem_flat_square_stays_planar():
    s = grid_surface(12, 12)
    out = qem_simplify(s, 4)
    assert out.surface.n_vertices <= max(4, s.n_vertices)
    assert np.abs(out.surface.vertices[:, 2]).max() <= 1e-9


def test_qem_sphere_radial_error():
    s = sphere_surface(4)
    assert s.n_vertices == 2562
    out = qem_simplify(s, 642)
    assert out.reached_target and out.surface.n_vertices <= 642
    radial = np.abs(np.linalg.norm(out.surface.vertices, axis=1) - 1.0)
    assert radial.mean() < 0.02


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(20, 150))
@example(237, 20)  # once merged two landmarks
def test_qem_properties(seed, target):
    rng = np.random.default_rng(seed)
    base = sphere_surface(2)
    v = base.vertices * rng.uniform(0.9, 1.1, (base.n_vertices, 1))
    lm = rng.choice(base.n_vertices, 5, replace=False)
    s = LabeledSurface(v, base.faces, base.region, lm)
    out = qem_simplify(s, target).surface
    assert out.n_vertices <= s.n_vertices
    assert len(out.landmarks) == 5 and len(set(out.landmarks.tolist())) == 5
    assert set(np.unique(out.region)) == {0, 1}


def test_qem_rejects_tiny_target():
    with pytest.raises(ValueError):
        qem_simplify(sphere_surface(1), 3)


# ---------------------------------------------------------- closest points


def brute_closest(p, a, b, c, steps=200):
    u, w = np.meshgrid(np.linspace(0, 1, steps + 1), np.linspace(0, 1, steps + 1))
    keep = u + w <= 1
    bary = np.stack([1 - u[keep] - w[keep], u[keep], w[keep]], axis=1)
    pts = bary @ np.stack([a, b, c])
    d = np.linalg.norm(pts - p, axis=1)
    return d.min()


def test_closest_point_matches_dense_sampling():
    rng = np.random.default_rng(5)
    for _ in range(60):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        q = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
        ours = np.linalg.norm(q - p)
        assert ours <= brute_closest(p, a, b, c) + 1e-12
        assert brute_closest(p, a, b, c) - ours < 0.02 * np.linalg.norm(np.stack([a, b, c]).std(0))


def barycentric_residual(q, a, b, c):
    m = np.stack([b - a, c - a], axis=1)
    uv, *_ = np.linalg.lstsq(m, q - a, rcond=None)
    on_plane = np.linalg.norm(m @ uv - (q - a))
    inside = min(uv[0], uv[1], 1 - uv.sum())
    return on_plane, inside


def test_remesh_lands_on_target_triangles():
    rng = np.random.default_rng(6)
    target = sphere_surface(2)
    target = target.with_vertices(target.vertices * rng.uniform(0.9, 1.1, (target.n_vertices, 1)))
    ref = sphere_surface(1)
    ref = ref.with_vertices(ref.vertices * 1.3 + rng.normal(scale=0.05, size=ref.vertices.shape))
    pts, face = closest_points_on_surface(ref.vertices, target)
    out = correspondence_remesh(ref, target)
    assert np.array_equal(out.vertices, pts) and np.array_equal(out.faces, ref.faces)
    for q, f in zip(pts, face):
        plane, inside = barycentric_residual(q, *target.vertices[target.faces[f]])
        assert plane < 1e-9 and inside > -1e-9
    # exact: no triangle is closer than the chosen one
    all_tri = target.vertices[target.faces]
    for i in range(0, ref.n_vertices, 7):
        cand = closest_point_on_triangles(np.repeat(ref.vertices[i][None], len(all_tri), 0), *np.moveaxis(all_tri, 1, 0))
        assert np.linalg.norm(pts[i] - ref.vertices[i]) <= np.linalg.norm(cand - ref.vertices[i], axis=1).min() + 1e-12


def test_remesh_identity_and_translation():
    s = sphere_surface(2)
    np.testing.assert_allclose(correspondence_remesh(s, s).vertices, s.vertices, atol=1e-12)
    plane = grid_surface(10, 10)
    shifted = plane.with_vertices(plane.vertices + [0, 0, 0.05])
    np.testing.assert_allclose(correspondence_remesh(plane, shifted).vertices, plane.vertices + [0, 0, 0.05], atol=1e-12)


def test_remesh_point_cloud_and_errors():
    s = sphere_surface(1)
    out = correspondence_remesh(s, s.vertices[::-1])
    np.testing.assert_allclose(out.vertices, s.vertices)
    with pytest.raises(ValueError):
        correspondence_remesh(s, np.zeros((0, 3)))


# ----------------------------------------------------------- batch driver


def test_register_manifest(tmp_path):
    tpl = make_template(SMALL)
    rng = np.random.default_rng(7)
    files = []
    for i in range(3):
        s = sample_normal(SMALL, i, tpl)
        r = Rotation.random(random_state=rng).as_matrix()
        s = s.with_vertices(s.vertices @ r.T + rng.normal(size=3) * 20)
        save_surface(s, tmp_path / f"s{i}.ply")
        files.append(f"s{i}.ply")
    (tmp_path / "m.json").write_text(json.dumps({"surfaces": files}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CpdConvergenceWarning)
        res = register_manifest(tmp_path / "m.json", simplify_to=200)
    assert not res.failures and len(res.outputs) == 3
    outs = [load_surface(p) for p in res.outputs]
    assert all(o.n_vertices <= 200 and o.same_layout(outs[0]) for o in outs)
    for f, o in zip(files, outs):
        src = load_surface(tmp_path / f)
        d, _ = cKDTree(src.vertices).query(o.vertices)
        assert d.mean() < 0.03 * diameter(src)
