"""Deterministic skull-like labeled surfaces with known ground truth.

Every generated surface is a warp of one template mesh, so all of them share
vertex count, faces, region labels and landmark ids.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .sampling import fps_batch
from .surface import JAW, MIDFACE, LabeledSurface, diameter, save_surface

FAMILIES = ("PROTRUSION", "RETRUSION", "ASYMMETRY")

# ellipsoid semi-axes in model millimetres: x lateral, y anterior, z superior
_RADII = (70.0, 85.0, 80.0)
_RAMP = 0.15  # jaw blending width, fraction of diameter
_ROTATION_PER_MAGNITUDE = 0.5  # radians of jaw rotation per unit magnitude


@dataclass(frozen=True)
class AnatomyParams:
    seed: int = 0
    n_vertices: int = 1024
    n_landmarks: int = 12
    jaw_fraction: float = 0.4
    normal_amplitude: float = 0.03  # fraction of diameter
    family: str = "PROTRUSION"
    magnitude: float = 0.08  # fraction of diameter

    def __post_init__(self):
        if self.n_vertices < 16:
            raise ValueError("vertex budget must be at least 16")
        if self.n_landmarks < 0:
            raise ValueError("landmark count must be non-negative")
        if not 0 < self.jaw_fraction < 1:
            raise ValueError("jaw fraction must lie in (0, 1)")
        if self.normal_amplitude < 0 or self.magnitude < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown deformity family {self.family!r}; expected one of {FAMILIES}")


# ------------------------------------------------------------------- template


def _sphere_grid(budget: int):
    """Latitude/longitude sphere with at least ``budget`` vertices."""
    n_lon = max(3, int(round(math.sqrt(budget))))
    n_lat = max(1, math.ceil((budget - 2) / n_lon))
    theta = np.pi * np.arange(1, n_lat + 1) / (n_lat + 1)
    rings = []
    for k, t in enumerate(theta):
        phi = 2 * np.pi * (np.arange(n_lon) + 0.5 * (k % 2)) / n_lon
        rings.append(np.stack([np.full(n_lon, t), phi], axis=1))
    tp = np.concatenate([[[0.0, 0.0]], *rings, [[np.pi, 0.0]]])
    faces = []
    top, bottom = 0, 1 + n_lat * n_lon
    ring = lambda k, j: 1 + k * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append((top, ring(0, j), ring(0, j + 1)))
    for k in range(n_lat - 1):
        shift = k % 2  # odd rings are rotated half a step
        for j in range(n_lon):
            a, b = ring(k, j), ring(k, j + 1)
            c = ring(k + 1, j - 1 + shift)
            d = ring(k + 1, j + shift)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(n_lon):
        faces.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return tp, np.array(faces, dtype=np.int64)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def make_template(params: AnatomyParams) -> LabeledSurface:
    """Ellipsoidal vault fused with a protruding lower lobe (the jaw)."""
    tp, faces = _sphere_grid(params.n_vertices)
    theta, phi = tp[:, 0], tp[:, 1]
    ax, ay, az = _RADII
    x = ax * np.sin(theta) * np.cos(phi)
    y = ay * np.sin(theta) * np.sin(phi)
    z = az * np.cos(theta)
    low = _smoothstep((-np.cos(theta) - 0.1) / 0.9)
    front = np.maximum(0.0, np.sin(theta) * np.sin(phi))
    y = y + 30.0 * low * front
    z = z - 15.0 * low
    x = x * (1.0 - 0.25 * low)
    vertices = np.stack([x, y, z], axis=1)

    score = -z / az + 0.2 * y / ay
    order = np.argsort(-score, kind="stable")
    region = np.full(len(vertices), MIDFACE, dtype=np.int8)
    region[order[: int(round(params.jaw_fraction * len(vertices)))]] = JAW
    landmarks = _place_landmarks(vertices, region, score, params.n_landmarks)
    return LabeledSurface(vertices, faces, region, landmarks)


def _place_landmarks(vertices, region, score, k):
    """Spread landmarks by FPS inside each region, seeded at its extremal vertex."""
    k_jaw = k // 2
    picks = []
    for label, count, seed_fn in ((JAW, k_jaw, np.argmax), (MIDFACE, k - k_jaw, np.argmin)):
        if count == 0:
            continue
        ids = np.flatnonzero(region == label)
        start = int(seed_fn(score[ids]))
        local = np.concatenate([ids[start:], ids[:start]])  # extremal vertex first
        sel = fps_batch(vertices[local][None], min(count, len(local)))[0]
        picks.extend(local[sel].tolist())
    return np.array(picks, dtype=np.int64)


# ---------------------------------------------------------------- variations


def _subject_rng(params: AnatomyParams, subject_seed: int, stream: int):
    return np.random.default_rng([params.seed, subject_seed, stream])


def sample_normal(params: AnatomyParams, subject_seed: int, template: LabeledSurface | None = None) -> LabeledSurface:
    """Template warped by a smooth, band-limited random displacement field.

    The field is a partition-of-unity blend of a few random vectors anchored at
    random template vertices, so its magnitude never exceeds the amplitude.
    """
    template = make_template(params) if template is None else template
    if params.normal_amplitude == 0:
        return template
    rng = _subject_rng(params, subject_seed, 0)
    v = template.vertices
    diam = diameter(template)
    n_centers = 6
    centers = v[rng.choice(len(v), size=n_centers, replace=False)]
    dirs = rng.normal(size=(n_centers, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs *= rng.uniform(0.0, 1.0, size=(n_centers, 1)) ** (1.0 / 3.0)
    sigma = 0.35 * diam
    d2 = ((v[:, None, :] - centers[None]) ** 2).sum(-1)
    w = np.exp(-d2 / (2 * sigma * sigma))
    w /= w.sum(axis=1, keepdims=True)
    disp = params.normal_amplitude * diam * (w @ dirs)
    return template.with_vertices(v + disp)


def _rotation(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def jaw_blend(surface: LabeledSurface) -> np.ndarray:
    """Per-vertex deformity weight: 0 on the midface, ramping to 1 inside the jaw."""
    v = surface.vertices
    mid = surface.midface_index
    jaw = surface.jaw_index
    w = np.zeros(len(v))
    dist, _ = cKDTree(v[mid]).query(v[jaw])
    w[jaw] = _smoothstep(dist / (_RAMP * diameter(surface)))
    return w


def apply_deformity(normal: LabeledSurface, params: AnatomyParams) -> LabeledSurface:
    """Displace jaw vertices by the family's rigid-ish motion, blended to the midface."""
    if params.family not in FAMILIES:
        raise ValueError(f"unknown deformity family {params.family!r}")
    if params.magnitude == 0:
        return normal
    v = normal.vertices
    diam = diameter(normal)
    m = params.magnitude
    jaw = normal.jaw_index
    blend = jaw_blend(normal)[jaw]
    boundary = normal.vertices[jaw][blend < 0.05]
    pivot = boundary.mean(axis=0) if len(boundary) else v[jaw].mean(axis=0)
    if params.family == "PROTRUSION":
        shift, rot = np.array([0.0, 1.0, 0.0]), _rotation("x", m * _ROTATION_PER_MAGNITUDE)
    elif params.family == "RETRUSION":
        shift, rot = np.array([0.0, -1.0, 0.0]), _rotation("x", -m * _ROTATION_PER_MAGNITUDE)
    else:
        shift, rot = np.array([1.0, 0.0, 0.0]), _rotation("z", m * _ROTATION_PER_MAGNITUDE)
    p = v[jaw]
    moved = (p - pivot) @ rot.T + pivot + m * diam * shift
    out = v.copy()
    out[jaw] = p + blend[:, None] * (moved - p)
    return normal.with_vertices(out)


# ------------------------------------------------------------------- dataset


def _magnitude_jitter(params: AnatomyParams, subject_seed: int) -> float:
    return float(params.magnitude * _subject_rng(params, subject_seed, 1).uniform(0.75, 1.25))


def make_patient(params: AnatomyParams, subject_seed: int, template: LabeledSurface | None = None):
    """A held-out normal and its deformed version; returns ``(patient, truth, magnitude)``."""
    truth = sample_normal(params, subject_seed, template)
    magnitude = _magnitude_jitter(params, subject_seed)
    patient = apply_deformity(truth, dataclasses.replace(params, magnitude=magnitude))
    return patient, truth, magnitude


def save_truth(truth: LabeledSurface, path) -> None:
    """Positions rounded like the PLY writer, so untouched rows equal the patient file's."""
    rounded = np.array([float(f"{x:.9g}") for x in truth.vertices.ravel()]).reshape(truth.vertices.shape)
    np.savez(path, vertices=rounded)


def load_truth(patient: LabeledSurface, path) -> LabeledSurface:
    """Ground truth shares the patient's topology; only positions are stored."""
    with np.load(path) as data:
        return patient.with_vertices(data["vertices"])


def generate_dataset(params: AnatomyParams, n_normals: int, n_patients: int, out_dir, patient_offset: int = 0) -> dict:
    """Write normals, patients, ground truths and ``manifest.json`` under ``out_dir``.

    Normal subjects use subject seeds ``0..n_normals-1``; patients are built on
    held-out subjects numbered from ``n_normals + patient_offset``.
    """
    if n_normals < 1 or n_patients < 1:
        raise ValueError("need at least one normal and one patient")
    out = Path(out_dir)
    (out / "normals").mkdir(parents=True, exist_ok=True)
    (out / "patients").mkdir(parents=True, exist_ok=True)
    template = make_template(params)
    normals = []
    for i in range(n_normals):
        rel = f"normals/normal_{i:03d}.ply"
        save_surface(sample_normal(params, i, template), out / rel)
        normals.append({"file": rel, "seed": i})
    patients = []
    for j in range(n_patients):
        subject = n_normals + patient_offset + j
        patient, truth, magnitude = make_patient(params, subject, template)
        rel = f"patients/patient_{j:03d}.ply"
        truth_rel = f"patients/patient_{j:03d}.truth.npz"
        save_surface(patient, out / rel)
        save_truth(truth, out / truth_rel)
        patients.append(
            {"file": rel, "ground_truth": truth_rel, "family": params.family, "magnitude": magnitude, "seed": subject}
        )
    manifest = {
        "seed": params.seed,
        "params": dataclasses.asdict(params),
        "template": {
            "n_vertices": template.n_vertices,
            "n_landmarks": len(template.landmarks),
            "diameter": diameter(template),
        },
        "normals": normals,
        "patients": patients,
        "pairs": [[p, n] for p in range(n_patients) for n in range(n_normals)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
