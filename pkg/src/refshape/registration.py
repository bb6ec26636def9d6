"""Rigid alignment, template choice, non-rigid CPD, QEM simplification, remeshing."""

from __future__ import annotations

import heapq
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial import cKDTree

from .surface import LabeledSurface, load_surface, save_surface

log = logging.getLogger(__name__)


class DegenerateLandmarksError(ValueError):
    pass


class RegistrationError(ArithmeticError):
    pass


class CpdConvergenceWarning(UserWarning):
    pass


# ------------------------------------------------------------------ similarity


@dataclass(frozen=True)
class RigidTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_surface(self, surface: LabeledSurface) -> LabeledSurface:
        return surface.with_vertices(self.apply(surface.vertices))


def procrustes_align(source, target) -> RigidTransform:
    """Least-squares similarity transform taking ``source`` landmarks onto ``target``."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"landmark arrays must both be (K, 3), got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateLandmarksError("at least 3 landmarks are required")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    for pts, name in ((a, "source"), (b, "target")):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
            raise DegenerateLandmarksError(f"{name} landmarks are coincident or collinear")
    u, s, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.array([1.0, 1.0, d])
    rot = (u * fix) @ vt
    scale = float((s * fix).sum() / (a * a).sum())
    return RigidTransform(rot, mu_d - scale * rot @ mu_s, scale)


def select_template(landmark_sets) -> int:
    """Index of the landmark set closest (sum of squares) to the mean set; ties go low."""
    sets = [np.asarray(s, dtype=np.float64) for s in landmark_sets]
    if not sets:
        raise ValueError("no surfaces to choose a template from")
    if len({s.shape for s in sets}) != 1:
        raise ValueError("all surfaces need the same number of landmarks")
    stack = np.stack(sets)
    cost = ((stack - stack.mean(axis=0)) ** 2).sum(axis=(1, 2))
    return int(np.argmin(cost))


# ------------------------------------------------------------------------- CPD


@dataclass(frozen=True)
class CpdConfig:
    beta: float = 2.0  # Gaussian kernel width of the motion field
    lam: float = 3.0  # motion-coherence weight
    w: float = 0.1  # outlier weight
    max_iter: int = 150
    tol: float = 1e-6

    def __post_init__(self):
        if self.beta <= 0 or self.lam <= 0:
            raise ValueError("beta and lam must be positive")
        if not 0 <= self.w < 1:
            raise ValueError("outlier weight must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class CpdResult:
    surface: LabeledSurface
    converged: bool
    iterations: int
    sigma2: float


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def cpd_nonrigid(template: LabeledSurface, target, cfg: CpdConfig = CpdConfig()) -> CpdResult:
    """Warp the template vertices onto a target cloud by coherent point drift.

    Both clouds are expressed in the target's frame (centroid removed, unit RMS
    radius) so the kernel width is scale free. Topology and labels are kept.
    """
    y0 = np.asarray(template.vertices, dtype=np.float64)
    x = np.asarray(getattr(target, "vertices", target), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ValueError("target must be a non-empty (N, 3) point cloud")
    center = x.mean(axis=0)
    scale = np.sqrt(((x - center) ** 2).sum(1).mean()) or 1.0
    x = (x - center) / scale
    y = (y0 - center) / scale
    n, m = len(x), len(y)
    g = np.exp(-_sq_dists(y, y) / (2 * cfg.beta**2))
    wts = np.zeros_like(y)
    t = y.copy()
    sigma2 = _sq_dists(x, t).sum() / (3 * m * n)
    xx = (x * x).sum(1)
    prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # E-step
        p = np.exp(-_sq_dists(t, x) / (2 * sigma2))
        c = (2 * np.pi * sigma2) ** 1.5 * cfg.w / (1 - cfg.w) * m / n
        den = p.sum(axis=0) + c
        if not np.all(np.isfinite(den)) or np.any(den <= 0):
            raise RegistrationError(f"CPD E-step produced invalid posteriors at iteration {it}")
        p /= den
        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        px = p @ x
        np_ = p1.sum()
        # M-step: (diag(P1) G + lam sigma2 I) W = PX - diag(P1) Y
        lhs = p1[:, None] * g + cfg.lam * sigma2 * np.eye(m)
        rhs = px - p1[:, None] * y
        wts = lu_solve(lu_factor(lhs), rhs)
        t = y + g @ wts
        new_sigma2 = (xx @ pt1 - 2 * (px * t).sum() + ((t * t).sum(1) @ p1)) / (np_ * 3)
        objective = -np.log(den).sum() + 1.5 * np_ * np.log(sigma2) + 0.5 * cfg.lam * (wts * (g @ wts)).sum()
        if not np.isfinite(new_sigma2) or not np.isfinite(objective):
            raise RegistrationError(f"CPD produced non-finite values at iteration {it}")
        sigma2 = max(new_sigma2, 1e-12)
        if prev is not None and abs(objective - prev) <= cfg.tol * abs(objective):
            converged = True
            break
        prev = objective
        if sigma2 <= 1e-12:
            converged = True  # clouds coincide
            break
    if not converged:
        warnings.warn(f"CPD did not converge in {cfg.max_iter} iterations", CpdConvergenceWarning, stacklevel=2)
    warped = t * scale + center
    return CpdResult(template.with_vertices(warped), converged, it, float(sigma2 * scale * scale))


# ------------------------------------------------------------------------- QEM


@dataclass(frozen=True)
class SimplifyResult:
    surface: LabeledSurface
    reached_target: bool


def _face_quadrics(v, faces):
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    nrm = np.cross(b - a, c - a)
    length = np.linalg.norm(nrm, axis=1)
    ok = length > 0
    nrm[ok] /= length[ok, None]
    nrm[~ok] = 0.0
    plane = np.concatenate([nrm, -(nrm * a).sum(1, keepdims=True)], axis=1)
    return plane[:, :, None] * plane[:, None, :]


def qem_simplify(surface: LabeledSurface, target_n: int) -> SimplifyResult:
    """Collapse edges in order of quadric error until at most ``target_n`` vertices remain.

    A collapse is skipped when it would break the two-manifold link condition,
    flip a face, merge two landmarks or remove the last vertex of a region.
    """
    if target_n < 4:
        raise ValueError("target_n must be at least 4")
    if surface.n_vertices <= target_n:
        return SimplifyResult(surface, True)
    v = surface.vertices.copy()
    faces = surface.faces.copy()
    region = surface.region.copy()
    n = len(v)
    alive_f = np.ones(len(faces), dtype=bool)
    alive_v = np.ones(n, dtype=bool)
    vf = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for k in f:
            vf[k].add(fi)
    fq = _face_quadrics(v, faces)
    q = np.zeros((n, 4, 4))
    for k in range(3):
        np.add.at(q, faces[:, k], fq)
    _add_boundary_quadrics(q, v, faces)
    is_landmark = np.zeros(n, dtype=bool)
    is_landmark[surface.landmarks] = True
    parent = np.arange(n)
    counts = np.bincount(region, minlength=2)

    def neighbors(i):
        return {k for fi in vf[i] for k in faces[fi]} - {i}

    def on_border(i):
        return any(len(vf[i] & vf[k]) == 1 for k in neighbors(i))

    def placement(i, j):
        qq = q[i] + q[j]
        a = qq[:3, :3]
        if np.linalg.cond(a) < 1e12:
            pos = np.linalg.solve(a, -qq[:3, 3])
        else:
            pos = 0.5 * (v[i] + v[j])
        h = np.append(pos, 1.0)
        return float(h @ qq @ h), pos

    heap = []
    current = {}

    def push(i, j):
        i, j = min(i, j), max(i, j)
        cost, _ = placement(i, j)
        current[(i, j)] = cost
        heapq.heappush(heap, (cost, i, j))

    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    for i, j in np.unique(e, axis=0):
        push(int(i), int(j))

    remaining = n
    while remaining > target_n and heap:
        cost, i, j = heapq.heappop(heap)
        if current.get((i, j)) != cost or not (alive_v[i] and alive_v[j]):
            continue
        del current[(i, j)]
        shared = vf[i] & vf[j]
        if not shared:
            continue
        if is_landmark[i] and is_landmark[j]:
            continue
        ni, nj = neighbors(i), neighbors(j)
        link = ni & nj
        opposite = {k for fi in shared for k in faces[fi]} - {i, j}
        if link != opposite:
            continue  # collapsing would pinch the surface
        if len(shared) == 2 and on_border(i) and on_border(j):
            continue  # interior edge bridging two boundary points
        if remaining - 1 < 4:
            break
        keep, drop = (j, i) if is_landmark[j] else (i, j)  # a landmark is never the dropped end
        if region[drop] != region[keep] and counts[region[drop]] <= 1:
            continue
        _, pos = placement(i, j)
        touched = (vf[i] | vf[j]) - shared
        if _flips(v, faces, touched, (i, j), pos):
            continue
        # commit
        v[keep] = pos
        q[keep] = q[i] + q[j]
        for fi in shared:
            alive_f[fi] = False
            for k in faces[fi]:
                vf[k].discard(fi)
        for fi in vf[drop]:
            faces[fi][faces[fi] == drop] = keep
            vf[keep].add(fi)
        vf[drop] = set()
        alive_v[drop] = False
        parent[drop] = keep
        counts[region[drop]] -= 1
        remaining -= 1
        for k in neighbors(keep):
            push(keep, k)
    reached = remaining <= target_n
    if not reached:
        log.warning("simplification stopped at %d vertices (target %d): no legal collapse left", remaining, target_n)

    def root(k):
        while parent[k] != k:
            k = parent[k]
        return k

    new_id = np.full(n, -1, dtype=np.int64)
    new_id[alive_v] = np.arange(alive_v.sum())
    out_faces = new_id[faces[alive_f]]
    landmarks = np.array([new_id[root(int(k))] for k in surface.landmarks], dtype=np.int64)
    out = LabeledSurface(v[alive_v], out_faces, region[alive_v], landmarks)
    return SimplifyResult(out, reached)


def _add_boundary_quadrics(q, v, faces):
    """Penalise motion away from open boundaries with planes perpendicular to them."""
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    face_of = np.tile(np.arange(len(faces)), 3)
    key = np.sort(directed, axis=1)
    _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    border = cnt[inv.ravel()] == 1
    if not border.any():
        return
    a, b = v[directed[border, 0]], v[directed[border, 1]]
    f = faces[face_of[border]]
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    nrm = np.cross(b - a, fn)
    length = np.linalg.norm(nrm, axis=1)
    ok = length > 0
    nrm = nrm[ok] / length[ok, None]
    plane = np.concatenate([nrm, -(nrm * a[ok]).sum(1, keepdims=True)], axis=1)
    kq = plane[:, :, None] * plane[:, None, :]
    for col in (0, 1):
        np.add.at(q, directed[border][ok][:, col], kq)


def _flips(v, faces, face_ids, pair, pos) -> bool:
    i, j = pair
    for fi in face_ids:
        f = faces[fi]
        p = v[f].copy()
        before = np.cross(p[1] - p[0], p[2] - p[0])
        p[(f == i) | (f == j)] = pos
        after = np.cross(p[1] - p[0], p[2] - p[0])
        if np.dot(before, after) <= 0:
            return True
    return False


# ------------------------------------------------------------ closest points


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on triangle ``(a, b, c)`` to ``p``, row-wise for (Q, 3) arrays."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = (ab * ap).sum(1), (ac * ap).sum(1)
    bp = p - b
    d3, d4 = (ab * bp).sum(1), (ac * bp).sum(1)
    cp = p - c
    d5, d6 = (ab * cp).sum(1), (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        t_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        t_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t_bc[:, None] * (c - b))
        denom = va + vb + vc
        s, t = vb / denom, vc / denom
        inside = a + s[:, None] * ab + t[:, None] * ac
    rest = ~done
    if rest.any():
        ok = rest & np.isfinite(inside).all(1)
        out[ok] = inside[ok]
        bad = rest & ~ok  # zero-area triangle: fall back to its vertices
        if bad.any():
            cand = np.stack([a[bad], b[bad], c[bad]], axis=1)
            k = ((cand - p[bad][:, None]) ** 2).sum(-1).argmin(1)
            out[bad] = cand[np.arange(len(k)), k]
    return out


def closest_points_on_surface(points, surface: LabeledSurface):
    """Exact closest point on the triangle mesh for each query; returns (points, face ids)."""
    q = np.asarray(points, dtype=np.float64)
    verts, faces = surface.vertices, surface.faces
    if len(faces) == 0:
        raise ValueError("target surface has no triangles")
    tri = verts[faces]
    centroid = tri.mean(axis=1)
    reach = np.sqrt(((tri - centroid[:, None]) ** 2).sum(-1).max())
    used = np.unique(faces)
    bound, _ = cKDTree(verts[used]).query(q)  # a surface point is never further than the nearest vertex
    tree = cKDTree(centroid)
    best = np.empty_like(q)
    best_face = np.empty(len(q), dtype=np.int64)
    for qi in range(len(q)):
        cand = np.array(sorted(tree.query_ball_point(q[qi], bound[qi] + reach + 1e-12)), dtype=np.int64)
        pts = closest_point_on_triangles(np.repeat(q[qi][None], len(cand), 0), *np.moveaxis(tri[cand], 1, 0))
        d2 = ((pts - q[qi]) ** 2).sum(1)
        k = int(np.argmin(d2))  # first minimum = smallest face id among ties
        best[qi], best_face[qi] = pts[k], cand[k]
    return best, best_face


def correspondence_remesh(reference: LabeledSurface, target) -> LabeledSurface:
    """Move each reference vertex to its closest point on ``target``.

    ``target`` is a LabeledSurface (point-to-triangle projection) or an (M, 3)
    point cloud (nearest point). Reference topology, labels and landmarks stay.
    """
    if isinstance(target, LabeledSurface):
        if len(target.faces) == 0:
            raise ValueError("target surface has no triangles")
        pts, _ = closest_points_on_surface(reference.vertices, target)
    else:
        cloud = np.asarray(target, dtype=np.float64).reshape(-1, 3)
        if len(cloud) == 0:
            raise ValueError("target point cloud is empty")
        _, idx = cKDTree(cloud).query(reference.vertices)
        pts = cloud[idx]
    return reference.with_vertices(pts)


# --------------------------------------------------------------- batch driver


@dataclass(frozen=True)
class PreprocessResult:
    template_index: int
    outputs: list  # written .corr.ply paths, None where registration failed
    unconverged: list
    failures: dict  # source path -> error message


def _warp_one(template, aligned, cpd):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CpdConvergenceWarning)
        return cpd_nonrigid(template, aligned.vertices, cpd)


def manifest_surfaces(manifest_path) -> list[Path]:
    """Surface files listed under ``surfaces`` or ``normals``/``patients``."""
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    entries = [e["file"] if isinstance(e, dict) else e for e in m.get("surfaces", [])]
    if not entries:
        entries = [e["file"] for key in ("normals", "patients") for e in m.get(key, [])]
    return [manifest_path.parent / e for e in entries]


def register_manifest(
    manifest_path, cpd: CpdConfig = CpdConfig(), simplify_to: int | None = None, jobs: int = 1
) -> PreprocessResult:
    """Bring every surface listed in a manifest into template correspondence.

    Surfaces are aligned to the first one by their landmarks, the template is
    the surface nearest the mean landmark set, it is optionally simplified and
    then warped onto every surface. Each warped template is written next to its
    source with the suffix ``.corr.ply``, mapped back into that source's frame.
    """
    paths = manifest_surfaces(manifest_path)
    if not paths:
        raise ValueError(f"manifest {manifest_path} lists no surfaces")
    surfaces = [load_surface(p) for p in paths]
    ref_lm = surfaces[0].vertices[surfaces[0].landmarks]
    aligns = [procrustes_align(s.vertices[s.landmarks], ref_lm) for s in surfaces]
    aligned = [t.apply_surface(s) for t, s in zip(aligns, surfaces)]
    k = select_template([s.vertices[s.landmarks] for s in aligned])
    template = aligned[k]
    if simplify_to is not None:
        template = qem_simplify(template, simplify_to).surface
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_warp_one, template, s, cpd) for s in aligned]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:  # reported per file below
                    results.append(exc)
    else:
        results = []
        for s in aligned:
            try:
                results.append(_warp_one(template, s, cpd))
            except Exception as exc:
                results.append(exc)
    outputs, unconverged, failures = [], [], {}
    for path, t, res in zip(paths, aligns, results):
        if isinstance(res, Exception):
            failures[str(path)] = f"{type(res).__name__}: {res}"
            outputs.append(None)
            continue
        if not res.converged:
            unconverged.append(str(path))
        back = (res.surface.vertices - t.translation) @ t.rotation / t.scale
        out = path.with_suffix(".corr.ply")
        save_surface(res.surface.with_vertices(back), out)
        outputs.append(str(out))
    return PreprocessResult(k, outputs, unconverged, failures)
