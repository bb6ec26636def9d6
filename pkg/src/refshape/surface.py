"""Labeled triangle surfaces: data model, PLY I/O, neighborhoods, normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIDFACE = 0
JAW = 1


class SurfaceError(ValueError):
    pass


class PlyParseError(SurfaceError):
    pass


class SurfaceValidationError(SurfaceError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledSurface:
    """Triangle mesh with a MIDFACE/JAW label per vertex and landmark vertex ids.

    Arrays are copied and made read-only on construction. Validation runs
    eagerly, so any instance in circulation satisfies the mesh invariants.
    """

    vertices: np.ndarray
    faces: np.ndarray
    region: np.ndarray
    landmarks: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        r = np.array(self.region, dtype=np.int8).reshape(-1)
        lm = np.array(self.landmarks, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "region", _frozen(r))
        object.__setattr__(self, "landmarks", _frozen(lm))
        self._validate()

    def _validate(self):
        n = len(self.vertices)
        if n == 0:
            raise SurfaceValidationError("surface has no vertices")
        if not np.all(np.isfinite(self.vertices)):
            raise SurfaceValidationError("non-finite vertex coordinates")
        if len(self.region) != n:
            raise SurfaceValidationError(f"region has {len(self.region)} entries, expected {n}")
        if not np.all((self.region == MIDFACE) | (self.region == JAW)):
            raise SurfaceValidationError("region labels must be 0 (midface) or 1 (jaw)")
        if not (np.any(self.region == MIDFACE) and np.any(self.region == JAW)):
            raise SurfaceValidationError("both midface and jaw vertices are required")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise SurfaceValidationError("face index out of range")
        if self.landmarks.size and (self.landmarks.min() < 0 or self.landmarks.max() >= n):
            raise SurfaceValidationError("landmark index out of range")
        f = self.faces
        if len(f):
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise SurfaceValidationError("degenerate face with repeated vertex")
            e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
            _, counts = np.unique(e, axis=0, return_counts=True)
            if counts.max() > 2:
                raise SurfaceValidationError("non-manifold edge shared by more than two faces")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def jaw_index(self) -> np.ndarray:
        return np.flatnonzero(self.region == JAW)

    @property
    def midface_index(self) -> np.ndarray:
        return np.flatnonzero(self.region == MIDFACE)

    def with_vertices(self, vertices) -> "LabeledSurface":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise SurfaceValidationError(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}"
            )
        return LabeledSurface(vertices, self.faces, self.region, self.landmarks)

    def permuted(self, perm: Sequence[int]) -> "LabeledSurface":
        """Reorder vertices so that new vertex ``k`` is old vertex ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return LabeledSurface(self.vertices[perm], inv[self.faces], self.region[perm], inv[self.landmarks])

    def same_layout(self, other: "LabeledSurface") -> bool:
        """True when both surfaces share vertex count, labels and landmark ids."""
        return (
            self.n_vertices == other.n_vertices
            and np.array_equal(self.region, other.region)
            and np.array_equal(self.landmarks, other.landmarks)
        )

    def __eq__(self, other):
        if not isinstance(other, LabeledSurface):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and np.array_equal(self.region, other.region)
            and np.array_equal(self.landmarks, other.landmarks)
        )

    __hash__ = None


@dataclass(frozen=True)
class DisplacementField:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise SurfaceValidationError("displacement field has non-finite entries")
        object.__setattr__(self, "vectors", _frozen(v))

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True)
class NormalizationBox:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box needs 3 minima and 3 maxima")
        if any(h < l for l, h in zip(lo, hi)):
            raise ValueError("box maximum below minimum")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationBox":
        return cls(d["lo"], d["hi"])


# --------------------------------------------------------------------------- PLY


def _landmark_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_surface(surface: LabeledSurface, path) -> None:
    """Write ``surface`` as canonical ASCII labeled-PLY plus landmark sidecar."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {surface.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar region",
        f"element face {len(surface.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for (x, y, z), r in zip(surface.vertices.tolist(), surface.region.tolist()):
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r}")
    for a, b, c in surface.faces.tolist():
        lines.append(f"3 {a} {b} {c}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(_landmark_path(path), "w", newline="\n") as fh:
        fh.write(json.dumps({"landmarks": [int(i) for i in surface.landmarks]}) + "\n")


def load_surface(path) -> LabeledSurface:
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise PlyParseError(f"{path}: not an ASCII PLY file") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(f"{path}: missing 'ply' magic")
    n_vert = n_face = None
    vprops: list[str] = []
    current = None
    i = 1
    while True:
        if i >= len(lines):
            raise PlyParseError(f"{path}: header not terminated")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise PlyParseError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError(f"{path}: bad element line {lines[i - 1]!r}")
            current = tok[1]
            try:
                count = int(tok[2])
            except ValueError as exc:
                raise PlyParseError(f"{path}: bad element count") from exc
            if current == "vertex":
                n_vert = count
            elif current == "face":
                n_face = count
            else:
                raise PlyParseError(f"{path}: unsupported element {current!r}")
        elif tok[0] == "property":
            if current == "vertex":
                vprops.append(tok[-1])
            elif current == "face":
                if tok[1] != "list":
                    raise PlyParseError(f"{path}: face property must be a list")
        elif tok[0] == "end_header":
            break
        else:
            raise PlyParseError(f"{path}: unexpected header line {lines[i - 1]!r}")
    if n_vert is None or n_face is None:
        raise PlyParseError(f"{path}: vertex and face elements are required")
    for name in ("x", "y", "z"):
        if name not in vprops:
            raise PlyParseError(f"{path}: missing vertex property {name!r}")
    if "region" not in vprops:
        raise SurfaceValidationError(f"{path}: missing vertex property 'region'")
    body = [ln for ln in lines[i:] if ln.strip()]
    if len(body) != n_vert + n_face:
        raise PlyParseError(f"{path}: expected {n_vert + n_face} data lines, found {len(body)}")
    try:
        vdata = np.array([[float(t) for t in ln.split()] for ln in body[:n_vert]], dtype=np.float64)
        fdata = [[int(t) for t in ln.split()] for ln in body[n_vert:]]
    except ValueError as exc:
        raise PlyParseError(f"{path}: malformed number") from exc
    if n_vert and vdata.shape[1:] != (len(vprops),):
        raise PlyParseError(f"{path}: vertex line width does not match header")
    for row in fdata:
        if row[0] != 3 or len(row) != 4:
            raise PlyParseError(f"{path}: only triangle faces are supported")
    cols = {name: k for k, name in enumerate(vprops)}
    vertices = vdata[:, [cols["x"], cols["y"], cols["z"]]] if n_vert else np.zeros((0, 3))
    region = vdata[:, cols["region"]] if n_vert else np.zeros(0)
    if np.any(region != np.round(region)):
        raise SurfaceValidationError(f"{path}: region must be an integer label")
    faces = np.array([row[1:] for row in fdata], dtype=np.int64).reshape(-1, 3)

    lm_path = _landmark_path(path)
    landmarks: list[int] = []
    if lm_path.exists():
        try:
            payload = json.loads(lm_path.read_text())
            landmarks = [int(x) for x in payload["landmarks"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise PlyParseError(f"{lm_path}: malformed landmark sidecar") from exc
    return LabeledSurface(vertices, faces, region.astype(np.int8), landmarks)


# ------------------------------------------------------------------ neighborhoods


def edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges ``(i, j)`` with ``i < j``, sorted lexicographically."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def one_ring(surface: LabeledSurface) -> list[set[int]]:
    rings: list[set[int]] = [set() for _ in range(surface.n_vertices)]
    for i, j in edges(surface.faces).tolist():
        rings[i].add(j)
        rings[j].add(i)
    return rings


# ------------------------------------------------------------------ normalization


def compute_box(surfaces: LabeledSurface | Iterable[LabeledSurface]) -> NormalizationBox:
    """Per-axis bounds over one surface or the union of several."""
    if isinstance(surfaces, LabeledSurface):
        surfaces = [surfaces]
    pts = np.concatenate([s.vertices for s in surfaces])
    if len(pts) == 0:
        raise ValueError("no vertices to bound")
    return NormalizationBox(pts.min(axis=0), pts.max(axis=0))


def _box_arrays(box: NormalizationBox):
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    span = hi - lo
    flat = span == 0
    return lo, np.where(flat, 1.0, span), flat


def normalize_points(points: np.ndarray, box: NormalizationBox) -> np.ndarray:
    lo, span, flat = _box_arrays(box)
    out = (np.asarray(points, dtype=np.float64) - lo) / span
    return np.where(flat, 0.5, out)


def denormalize_points(points: np.ndarray, box: NormalizationBox) -> np.ndarray:
    lo, span, flat = _box_arrays(box)
    out = np.asarray(points, dtype=np.float64) * span + lo
    return np.where(flat, lo, out)


def denormalize_vectors(vectors: np.ndarray, box: NormalizationBox) -> np.ndarray:
    """Map displacements from normalized to box units; flat axes carry none."""
    _, span, flat = _box_arrays(box)
    return np.where(flat, 0.0, np.asarray(vectors, dtype=np.float64) * span)


def normalize(surface: LabeledSurface, box: NormalizationBox) -> LabeledSurface:
    return surface.with_vertices(normalize_points(surface.vertices, box))


def denormalize(surface: LabeledSurface, box: NormalizationBox) -> LabeledSurface:
    return surface.with_vertices(denormalize_points(surface.vertices, box))


def diameter(surface: LabeledSurface) -> float:
    """Bounding-box diagonal, the scale unit used for tolerances."""
    v = surface.vertices
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
