import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid_surface, random_surface, sphere_surface
from refshape.surface import (
    JAW,
    MIDFACE,
    DisplacementField,
    LabeledSurface,
    NormalizationBox,
    PlyParseError,
    SurfaceValidationError,
    compute_box,
    denormalize,
    denormalize_points,
    edges,
    load_surface,
    normalize,
    normalize_points,
    one_ring,
    save_surface,
)

MINIMAL_PLY = """ply
format ascii 1.0
element vertex 3
property double x
property double y
property double z
property uchar region
element face 1
property list uchar int vertex_indices
end_header
0 0 0 0
1 0 0 0
0 1 0 1
3 0 1 2
"""


def write_ply(tmp_path, text, landmarks=(0,), name="s.ply"):
    p = tmp_path / name
    p.write_text(text)
    p.with_suffix(".json").write_text(json.dumps({"landmarks": list(landmarks)}))
    return p


def tetrahedron(k=1):
    v = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    f = [(0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)]
    return LabeledSurface(v, f, [0, 0, 1, 1], list(range(k)))


# ------------------------------------------------------------------ validation


def test_minimal_file_loads(tmp_path):
    s = load_surface(write_ply(tmp_path, MINIMAL_PLY))
    assert s.n_vertices == 3 and len(s.landmarks) == 1
    assert s.region.tolist() == [MIDFACE, MIDFACE, JAW]


def test_face_index_out_of_range(tmp_path):
    text = MINIMAL_PLY.replace("element vertex 3", "element vertex 4").replace("3 0 1 2", "1 1 1 0\n3 0 1 7")
    with pytest.raises(SurfaceValidationError):
        load_surface(write_ply(tmp_path, text))


def test_missing_region_property_rejected(tmp_path):
    text = MINIMAL_PLY.replace("property uchar region\n", "").replace(" 0\n", "\n").replace(" 1\n3", "\n3")
    with pytest.raises(SurfaceValidationError):
        load_surface(write_ply(tmp_path, text))


def test_malformed_file(tmp_path):
    with pytest.raises(PlyParseError):
        load_surface(write_ply(tmp_path, "not a ply\n"))
    with pytest.raises(PlyParseError):
        load_surface(write_ply(tmp_path, MINIMAL_PLY.replace("0 1 0 1\n", "")))


def test_non_manifold_edge_rejected():
    v = np.random.default_rng(0).normal(size=(5, 3))
    with pytest.raises(SurfaceValidationError, match="non-manifold"):
        LabeledSurface(v, [(0, 1, 2), (0, 1, 3), (0, 1, 4)], [0, 0, 1, 1, 1], [])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(region=[0, 0, 0, 0]),
        dict(region=[0, 0, 1]),
        dict(region=[0, 2, 1, 1]),
        dict(landmarks=[4]),
        dict(faces=[(0, 0, 1)]),
        dict(vertices=[(0, 0, np.nan), (1, 0, 0), (0, 1, 0), (0, 0, 1)]),
    ],
)
def test_invariants(kwargs):
    base = dict(vertices=tetrahedron().vertices, faces=tetrahedron().faces, region=[0, 0, 1, 1], landmarks=[0])
    base.update(kwargs)
    with pytest.raises(SurfaceValidationError):
        LabeledSurface(**base)


def test_arrays_are_read_only():
    s = tetrahedron()
    with pytest.raises(ValueError):
        s.vertices[0, 0] = 5.0


def test_displacement_field_finite():
    with pytest.raises(ValueError):
        DisplacementField(np.array([[0.0, np.inf, 0.0]]))


# ------------------------------------------------------------------------ I/O


def test_tetrahedron_file_layout(tmp_path):
    p = tmp_path / "t.ply"
    save_surface(tetrahedron(), p)
    lines = p.read_text().split("\n")
    body = lines[lines.index("end_header") + 1 :]
    assert sum(1 for l in body if len(l.split()) == 4 and not l.startswith("3 ")) == 4
    assert sum(1 for l in body if l.startswith("3 ")) == 4
    assert b"\r" not in p.read_bytes()


def test_zero_landmarks(tmp_path):
    p = tmp_path / "t.ply"
    save_surface(tetrahedron(k=0), p)
    assert json.loads(p.with_suffix(".json").read_text()) == {"landmarks": []}
    assert len(load_surface(p).landmarks) == 0


def test_round_trip_random_surfaces(tmp_path):
    rng = np.random.default_rng(3)
    for i in range(20):
        s = random_surface(rng, subdivisions=1)
        a = tmp_path / f"a{i}.ply"
        b = tmp_path / f"b{i}.ply"
        save_surface(s, a)
        loaded = load_surface(a)
        save_surface(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()
        np.testing.assert_allclose(loaded.vertices, s.vertices, rtol=1e-8)
        assert np.array_equal(loaded.faces, s.faces) and np.array_equal(loaded.landmarks, s.landmarks)


# ---------------------------------------------------------------- adjacency


def test_one_ring_small_cases():
    tri = LabeledSurface(np.eye(3), [(0, 1, 2)], [0, 1, 1], [])
    assert one_ring(tri) == [{1, 2}, {0, 2}, {0, 1}]
    two = LabeledSurface(np.random.default_rng(1).normal(size=(4, 3)), [(0, 1, 2), (1, 3, 2)], [0, 1, 1, 0], [])
    assert one_ring(two)[1] == {0, 2, 3}


def test_isolated_vertex_has_empty_ring():
    s = LabeledSurface(np.random.default_rng(1).normal(size=(4, 3)), [(0, 1, 2)], [0, 1, 1, 0], [])
    assert one_ring(s)[3] == set()


@given(st.integers(0, 10_000))
def test_one_ring_matches_face_scan(seed):
    rng = np.random.default_rng(seed)
    s = random_surface(rng, subdivisions=1)
    keep = rng.random(len(s.faces)) < 0.7
    s = LabeledSurface(s.vertices, s.faces[keep], s.region, s.landmarks)
    ring = one_ring(s)
    oracle = [set() for _ in range(s.n_vertices)]
    for f in s.faces:
        for a in f:
            for b in f:
                if a != b:
                    oracle[a].add(int(b))
    assert ring == oracle
    for i, r in enumerate(ring):
        assert i not in r
        assert all(i in ring[j] for j in r)
    assert len(edges(s.faces)) == sum(len(r) for r in ring) // 2


# -------------------------------------------------------------- normalization


def test_box_examples():
    s = LabeledSurface([(0, 0, 0), (1, 2, 3)], [], [0, 1], [])
    b = compute_box(s)
    assert b.lo == (0, 0, 0) and b.hi == (1, 2, 3)
    one = compute_box([LabeledSurface([(4, 5, 6), (4, 5, 6)], [], [0, 1], [])])
    assert one.lo == one.hi == (4, 5, 6)


def test_box_matches_scan(rng):
    clouds = [rng.normal(size=(30, 3)) for _ in range(3)]
    surfaces = [LabeledSurface(c, [], [0] * 29 + [1], []) for c in clouds]
    b = compute_box(surfaces)
    allp = np.concatenate(clouds)
    assert b.lo == tuple(min(p[k] for p in allp) for k in range(3))
    assert b.hi == tuple(max(p[k] for p in allp) for k in range(3))


def test_box_rejects_inverted():
    with pytest.raises(ValueError):
        NormalizationBox((1, 0, 0), (0, 1, 1))


def test_normalize_examples():
    box = NormalizationBox((0, 0, 0), (2, 2, 2))
    assert normalize_points([[1, 1, 1]], box).tolist() == [[0.5, 0.5, 0.5]]
    assert normalize_points([[0, 0, 0]], box).tolist() == [[0, 0, 0]]
    assert denormalize_points([[0.5, 0.5, 0.5]], box).tolist() == [[1, 1, 1]]
    flat = NormalizationBox((0, 3, 0), (1, 3, 1))
    assert normalize_points([[0.5, 3, 0.5]], flat)[0, 1] == 0.5
    assert denormalize_points([[0.5, 0.5, 0.5]], flat)[0, 1] == 3


def test_normalize_round_trip_random(rng):
    for _ in range(50):
        s = random_surface(rng, subdivisions=1)
        b = compute_box(s)
        n = normalize(s, b)
        assert n.vertices.min() >= 0 and n.vertices.max() <= 1
        assert np.array_equal(n.faces, s.faces) and n.same_layout(s)
        np.testing.assert_allclose(denormalize(n, b).vertices, s.vertices, atol=1e-6)


def test_permuted_keeps_geometry():
    s = sphere_surface(1)
    perm = np.random.default_rng(0).permutation(s.n_vertices)
    p = s.permuted(perm)
    assert np.array_equal(p.vertices, s.vertices[perm])
    assert np.array_equal(p.vertices[p.landmarks], s.vertices[s.landmarks])
    assert np.array_equal(np.sort(p.vertices[p.faces].reshape(-1, 9), axis=0), np.sort(s.vertices[s.faces].reshape(-1, 9), axis=0))


def test_grid_helper_is_valid():
    g = grid_surface(4, 4)
    assert g.n_vertices == 16 and len(g.faces) == 18
