"""Alternating simulator/corrector training, checkpoints and inference."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import LossWeights, SurfaceLayout, corrector_loss, simulator_loss
from .nets import CorrectorNet, NetworkConfig, SimulatorNet, build_geometry, corrector_forward, stack_geometry
from .surface import (
    JAW,
    DisplacementField,
    LabeledSurface,
    NormalizationBox,
    compute_box,
    denormalize_vectors,
    load_surface,
    normalize_points,
)

log = logging.getLogger(__name__)

MAGIC = b"RSHF"
VERSION = 1
_ARRAY, _JSON = 0, 1
HISTORY_COLUMNS = ("epoch", "step", "net", "loss", "L_jaw", "L_smooth", "L_reg")
NETS = ("simulator", "corrector")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    """Unreadable, truncated or corrupted checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    lr: float = 1e-4
    batch_size: int = 4
    weights: LossWeights = LossWeights()
    network: NetworkConfig = NetworkConfig()
    seed: int = 0
    checkpoint_interval: int = 0  # 0 writes only the final checkpoint
    freeze_midface: bool = True

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError("epochs must be an integer >= 1")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch size must be an integer >= 1")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint interval must be >= 0")
        T.AdamConfig(lr=self.lr)  # validates the learning rate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        return cls(**d)


# ------------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    """Complete training state: both networks, Adam moments, box and history."""

    config: TrainConfig
    box: NormalizationBox
    epoch: int
    params: dict  # name -> array
    adam_m: dict
    adam_v: dict
    adam_step: dict  # name -> int
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, len(HISTORY_COLUMNS))))

    @property
    def network(self) -> NetworkConfig:
        return self.config.network

    @classmethod
    def fresh(cls, config: TrainConfig, box: NormalizationBox, zero_head: bool = False) -> "Checkpoint":
        sim, corr = _new_networks(config)
        if zero_head:
            sim.backbone.zero_head()
            corr.backbone.zero_head()
        return cls.capture(config, box, 0, sim, corr, np.zeros((0, len(HISTORY_COLUMNS))))

    @classmethod
    def capture(cls, config, box, epoch, sim, corr, history) -> "Checkpoint":
        params = sim.parameters() + corr.parameters()
        return cls(
            config,
            box,
            epoch,
            {p.name: p.data.copy() for p in params},
            {p.name: p.m.copy() for p in params},
            {p.name: p.v.copy() for p in params},
            {p.name: int(p.step) for p in params},
            np.array(history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS)),
        )

    def networks(self) -> tuple[SimulatorNet, CorrectorNet]:
        """Fresh network objects carrying this checkpoint's weights and Adam state."""
        sim, corr = _new_networks(self.config)
        for p in sim.parameters() + corr.parameters():
            if p.name not in self.params:
                raise CheckpointError(f"checkpoint lacks parameter {p.name}")
            if self.params[p.name].shape != p.data.shape:
                raise CheckpointError(f"parameter {p.name} has shape {self.params[p.name].shape}, expected {p.data.shape}")
            p.data = self.params[p.name].copy()
            p.m = self.adam_m[p.name].copy()
            p.v = self.adam_v[p.name].copy()
            p.step = self.adam_step[p.name]
        return sim, corr

    def corrector(self) -> CorrectorNet:
        return self.networks()[1]


def _new_networks(config: TrainConfig):
    sim = SimulatorNet(config.network, seed=config.seed)
    corr = CorrectorNet(config.network, seed=config.seed + 1, freeze_midface=config.freeze_midface)
    return sim, corr


def _block(name: str, kind: int, payload: bytes, dims: Sequence[int] = ()) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", kind, len(dims))
    head += struct.pack(f"<{len(dims)}Q", *dims)
    return head + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the ``RSHF`` container: header, named blocks, trailing CRC32."""
    meta = {
        "config": ckpt.config.to_dict(),
        "box": ckpt.box.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "history_columns": list(HISTORY_COLUMNS),
    }
    blocks = [_block("meta", _JSON, json.dumps(meta, sort_keys=True).encode("utf-8"))]

    def arr(name, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        blocks.append(_block(name, _ARRAY, a.tobytes(), a.shape))

    for name in sorted(ckpt.params):
        arr(f"param/{name}", ckpt.params[name])
        arr(f"adam_m/{name}", ckpt.adam_m[name])
        arr(f"adam_v/{name}", ckpt.adam_v[name])
    arr("history", ckpt.history)
    body = MAGIC + struct.pack("<II", VERSION, len(blocks)) + b"".join(blocks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path} is corrupt or truncated (checksum mismatch)")
    r = _Reader(body)
    r.take(8)
    (count,) = r.unpack("<I")
    meta, arrays = None, {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        kind, ndim = r.unpack("<BI")
        dims = r.unpack(f"<{ndim}Q")
        (size,) = r.unpack("<Q")
        payload = r.take(size)
        if kind == _JSON:
            meta = json.loads(payload.decode("utf-8"))
        elif kind == _ARRAY:
            if size != 8 * math.prod(dims):
                raise CheckpointError(f"block {name} has {size} bytes for shape {dims}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        else:
            raise CheckpointError(f"block {name} has unknown kind {kind}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last block")
    if meta is None:
        raise CheckpointError("checkpoint has no metadata block")
    try:
        config = TrainConfig.from_dict(meta["config"])
        names = [k.split("/", 1)[1] for k in arrays if k.startswith("param/")]
        return Checkpoint(
            config,
            NormalizationBox.from_dict(meta["box"]),
            int(meta["epoch"]),
            {n: arrays[f"param/{n}"] for n in names},
            {n: arrays[f"adam_m/{n}"] for n in names},
            {n: arrays[f"adam_v/{n}"] for n in names},
            {n: int(meta["adam_step"][n]) for n in names},
            arrays["history"].reshape(-1, len(HISTORY_COLUMNS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint content is inconsistent: {exc}") from exc


def write_history_csv(history: np.ndarray, path) -> None:
    """Loss history as ``epoch,step,net,loss,L_jaw,L_smooth,L_reg``; empty cells for n/a."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in np.asarray(history):
            cells = [int(row[0]), int(row[1]), NETS[int(row[2])]]
            cells += ["" if math.isnan(x) else repr(float(x)) for x in row[3:]]
            w.writerow(cells)


def epoch_means(history: np.ndarray, net: str) -> dict[int, float]:
    h = np.asarray(history)
    h = h[h[:, 2] == NETS.index(net)]
    return {int(e): float(h[h[:, 0] == e, 3].mean()) for e in np.unique(h[:, 0])}


# --------------------------------------------------------------------- dataset


@dataclass
class TrainingSet:
    normals: list
    patients: list
    pairs: np.ndarray  # (P, 2): patient index, normal index

    def __post_init__(self):
        if not self.normals or not self.patients:
            raise ManifestError("training needs at least one normal and one patient surface")
        ref = self.normals[0]
        for s in self.normals + self.patients:
            if not ref.same_layout(s):
                raise ManifestError("training surfaces are not in template correspondence")
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(self.pairs) == 0:
            raise ManifestError("the pair grid is empty")
        if (self.pairs < 0).any() or (self.pairs[:, 0] >= len(self.patients)).any() or (
            self.pairs[:, 1] >= len(self.normals)
        ).any():
            raise ManifestError("pair grid refers to missing surfaces")

    @classmethod
    def grid(cls, normals, patients) -> "TrainingSet":
        pairs = [(p, n) for p in range(len(patients)) for n in range(len(normals))]
        return cls(list(normals), list(patients), np.array(pairs))

    @classmethod
    def from_manifest(cls, path) -> "TrainingSet":
        path = Path(path)
        try:
            m = json.loads(path.read_text())
            normals = [load_surface(path.parent / e["file"]) for e in m["normals"]]
            patients = [load_surface(path.parent / e["file"]) for e in m["patients"]]
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"invalid manifest {path}: {exc}") from exc
        pairs = m.get("pairs")
        if pairs is None:
            return cls.grid(normals, patients)
        return cls(normals, patients, np.array(pairs))

    def box(self) -> NormalizationBox:
        return compute_box(self.normals + self.patients)


# --------------------------------------------------------------------- training


class _GeometryCache:
    """Per-surface normal geometry and per-pair deformed-branch geometry."""

    def __init__(self, cfg: NetworkConfig, normals: np.ndarray, patients: np.ndarray):
        self.cfg = cfg
        self.normals = normals
        self.patients = patients
        self.normal_geo: dict = {}
        self.pair_geo: dict = {}

    def normal(self, n: int):
        if n not in self.normal_geo:
            self.normal_geo[n] = build_geometry(self.normals[n][None], self.cfg)
        return self.normal_geo[n]

    def pair(self, p: int, n: int):
        key = (p, n)
        if key not in self.pair_geo:
            samples = self.normal(n).samples
            self.pair_geo[key] = build_geometry(self.patients[p][None], self.cfg, samples=samples, decoder=False)
        return self.pair_geo[key]

    def batch(self, pairs: np.ndarray):
        geo_n = stack_geometry([self.normal(n) for _, n in pairs])
        geo_d = stack_geometry([self.pair(p, n) for p, n in pairs])
        return geo_n, geo_d


def _check_finite(values: dict, epoch: int, batch: int, net: str):
    if not all(math.isfinite(v) for v in values.values()):
        parts = ", ".join(f"{k}={v!r}" for k, v in values.items())
        raise TrainingError(f"non-finite {net} loss at epoch {epoch}, batch {batch}: {parts}")


def batch_schedule(n_pairs: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled pair indices for one epoch, cut into batches (last may be short)."""
    order = np.random.default_rng([seed, epoch]).permutation(n_pairs)
    return [order[i : i + batch_size] for i in range(0, n_pairs, batch_size)]


def train(
    data: TrainingSet,
    config: TrainConfig,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> Checkpoint:
    """Train both networks in alternation and return the final checkpoint.

    Each batch first takes one Adam step on the simulator objective, then
    re-runs the updated simulator without gradients and takes one Adam step on
    the corrector objective using those simulated bones as inputs.
    """
    if resume is not None:
        if resume.network != config.network:
            raise ValueError("checkpoint network configuration differs from the requested one")
        if resume.epoch >= config.epochs:
            raise ValueError(f"checkpoint is already at epoch {resume.epoch}; nothing left to train")
        box = resume.box
        sim, corr = resume.networks()
        history = [row for row in resume.history]
        start = resume.epoch + 1
    else:
        box = data.box()
        sim, corr = _new_networks(config)
        history = []
        start = 1

    normals = np.stack([normalize_points(s.vertices, box) for s in data.normals])
    patients = np.stack([normalize_points(s.vertices, box) for s in data.patients])
    layout = SurfaceLayout.from_surface(data.normals[0])
    jaw = layout.region == JAW
    cache = _GeometryCache(config.network, normals, patients)
    adam = T.AdamConfig(lr=config.lr)
    sim_params, corr_params = sim.parameters(), corr.parameters()
    w = config.weights

    for epoch in range(start, config.epochs + 1):
        for step, batch in enumerate(batch_schedule(len(data.pairs), config.batch_size, config.seed, epoch)):
            pairs = data.pairs[batch]
            nrm, dfm = normals[pairs[:, 1]], patients[pairs[:, 0]]
            mask = np.broadcast_to(jaw, (len(pairs), len(jaw)))
            geometry = cache.batch(pairs)

            # step A: simulator
            v = sim(nrm, dfm, mask, geometry=geometry)
            sl = simulator_loss(dfm, nrm, T.Tensor(nrm) + v, v, w, sim_params, layout)
            _check_finite(
                {"total": sl.total.item(), "jaw": sl.jaw, "midface": sl.midface, "smooth": sl.smooth, "reg": sl.reg},
                epoch,
                step,
                "simulator",
            )
            T.backward(sl.total)
            T.adam_step(sim_params, adam)
            history.append((epoch, step, 0, sl.total.item(), sl.jaw, sl.smooth, sl.reg))

            # step B: corrector on freshly simulated, detached bones
            with T.no_grad():
                simulated = nrm + sim(nrm, dfm, mask, geometry=geometry).data
            c = corr(simulated, mask)
            lc = corrector_loss(T.Tensor(simulated) + c, nrm, corr_params, w.lam)
            reg = float(sum(np.vdot(p.data, p.data) for p in corr_params if not p.is_bias))
            _check_finite({"total": lc.item(), "reg": reg}, epoch, step, "corrector")
            T.backward(lc)
            T.adam_step(corr_params, adam)
            history.append((epoch, step, 1, lc.item(), math.nan, math.nan, reg))

        means = {net: float(np.mean([h[3] for h in history if h[0] == epoch and h[2] == i])) for i, net in enumerate(NETS)}
        log.info("epoch %d: simulator %.6g corrector %.6g", epoch, means["simulator"], means["corrector"])
        if on_epoch is not None:
            on_epoch(epoch, means)
        interval = config.checkpoint_interval
        if checkpoint_dir is not None and interval and epoch % interval == 0 and epoch != config.epochs:
            ckpt = Checkpoint.capture(config, box, epoch, sim, corr, history)
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"epoch_{epoch:04d}.rshf")

    final = Checkpoint.capture(config, box, config.epochs, sim, corr, history)
    if checkpoint_dir is not None:
        save_checkpoint(final, Path(checkpoint_dir) / "final.rshf")
    return final


# -------------------------------------------------------------------- inference


def infer(checkpoint: Checkpoint | CorrectorNet, patient: LabeledSurface, box: NormalizationBox | None = None):
    """Reference surface and correction field for one patient, in input units.

    Works on any vertex count or order: the corrector sees only coordinates and
    the jaw labels of the given surface.
    """
    if isinstance(checkpoint, Checkpoint):
        net, box = checkpoint.corrector(), checkpoint.box
    else:
        net = checkpoint
        if box is None:
            raise ValueError("a normalization box is required with a bare network")
    normalized = patient.with_vertices(normalize_points(patient.vertices, box))
    correction, _ = corrector_forward(net, normalized)
    # applied as a displacement so frozen rows come back bit-identical
    delta = denormalize_vectors(correction.vectors, box)
    return patient.with_vertices(patient.vertices + delta), DisplacementField(delta)
