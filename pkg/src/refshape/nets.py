"""PointConv building block, the twin-encoder simulator and the corrector.

Both networks share one geometric skeleton. Four encoding levels each sample a
subset of the previous level by furthest point sampling, group neighbors inside
a ball and apply PointConv. Four decoding levels each interpolate features back
onto the next finer level, concatenate that level's skip features, regroup and
apply PointConv. A two-layer head maps the full-resolution features to one
displacement vector per vertex.

Geometry such as sampling and grouping is computed with numpy on
plain coordinates and never differentiated; only features carry gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .sampling import ball_query, fps_batch, interpolation_weights
from .surface import JAW, DisplacementField, LabeledSurface
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    """Layer schedules shared by both networks.

    Encoder level ``l`` keeps ``N // sub_divisors[l]`` points; the decoder walks
    the same levels back up to all ``N`` points. The defaults are the full-size
    settings; :meth:`desk` gives a narrow variant sized for a single CPU core.
    """

    n_points: int = 4724
    sub_divisors: tuple = (4, 16, 64, 128)
    enc_radii: tuple = (0.1, 0.2, 0.4, 0.8)
    dec_radii: tuple = (0.8, 0.4, 0.2, 0.1)
    enc_channels: tuple = (64, 128, 256, 512)
    dec_channels: tuple = (512, 256, 128, 128)
    head_hidden: int = 64
    weight_hidden: int = 16
    max_k: int = 32
    n_landmarks: int = 51

    def __post_init__(self):
        for name in ("sub_divisors", "enc_radii", "dec_radii", "enc_channels", "dec_channels"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 4:
                raise ValueError(f"{name} must have 4 entries, got {len(value)}")
        if any(r <= 0 for r in self.enc_radii + self.dec_radii):
            raise ValueError("radii must be positive")
        if list(self.sub_divisors) != sorted(self.sub_divisors) or self.sub_divisors[0] < 1:
            raise ValueError("sub_divisors must be increasing and >= 1")
        if self.max_k < 1 or self.head_hidden < 1 or self.weight_hidden < 1:
            raise ValueError("max_k, head_hidden and weight_hidden must be >= 1")

    @classmethod
    def desk(cls, n_points: int = 1024, n_landmarks: int = 12, **overrides) -> "NetworkConfig":
        base = dict(
            n_points=n_points,
            enc_channels=(16, 32, 48, 64),
            dec_channels=(64, 48, 32, 16),
            head_hidden=16,
            weight_hidden=8,
            max_k=16,
            n_landmarks=n_landmarks,
        )
        base.update(overrides)
        return cls(**base)

    def level_sizes(self, n: int) -> list[int]:
        """Point counts of levels 0..4 for an ``n``-vertex input."""
        sizes = [n] + [n // d for d in self.sub_divisors]
        if sizes[-1] < 3:
            raise ValueError(
                f"{n} vertices is too few: the deepest level needs >= 3 points "
                f"(n >= {3 * self.sub_divisors[-1]})"
            )
        return sizes

    def n_sub_schedule(self, n: int | None = None) -> list[int]:
        """The 4 + 4 encoder/decoder point counts."""
        sizes = self.level_sizes(self.n_points if n is None else n)
        return sizes[1:] + sizes[3::-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------------- layers


class _Seeder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> int:
        return int(self.rng.integers(0, 2**62))


class Linear:
    def __init__(self, n_in: int, n_out: int, seeder: _Seeder, name: str):
        self.weight = T.seeded_init((n_in, n_out), seeder(), name=f"{name}.weight")
        self.bias = T.seeded_init((n_out,), None, bias=True, name=f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class PointConvLayer:
    """Feature s-MLP modulated by an offset-driven weight s-MLP, max-pooled.

    For center ``i`` with neighbors ``j``:
    ``out_i = max_j relu(F f_j) * W((p_j - c_i) / r)`` where ``W`` is a
    two-layer MLP on the radius-scaled offset. ``F f_j`` depends only on the
    neighbor, so it is evaluated once per source point and then gathered.
    """

    def __init__(self, n_in: int, n_out: int, weight_hidden: int, seeder: _Seeder, name: str):
        self.n_in = n_in
        self.n_out = n_out
        self.feat = Linear(n_in, n_out, seeder, f"{name}.feat")
        self.w1 = Linear(3, weight_hidden, seeder, f"{name}.w1")
        self.w2 = Linear(weight_hidden, n_out, seeder, f"{name}.w2")

    def parameters(self) -> list[Parameter]:
        return self.feat.parameters() + self.w1.parameters() + self.w2.parameters()

    def __call__(self, features, groups: np.ndarray, offsets: np.ndarray) -> Tensor:
        features = T.as_tensor(features)
        if features.shape[-1] != self.n_in:
            raise ValueError(f"PointConv expects {self.n_in} input channels, got {features.shape[-1]}")
        f = T.relu(self.feat(features))
        w = self.w2(T.relu(self.w1(offsets)))
        if f.ndim == 2:
            out = T.modulated_group_max(T.reshape(f, (1,) + f.shape), groups[None], T.reshape(w, (1,) + w.shape))
            return T.reshape(out, out.shape[1:])
        return T.modulated_group_max(f, groups, w)


def pointconv_forward(layer: PointConvLayer, centers, points, features, groups, radius: float = 1.0) -> Tensor:
    """Single-cloud wrapper: ``groups`` is a BallGroups built at ``radius``."""
    centers = np.asarray(centers, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    idx = groups.index
    offsets = (points[idx] - centers[:, None, :]) / radius
    return layer(features, idx, offsets)


# -------------------------------------------------------------------- geometry


@dataclass
class Geometry:
    """Precomputed sampling/grouping for a stack of clouds of equal size."""

    levels: list  # level point arrays, (B, n_l, 3), l = 0..4
    samples: list  # (B, n_l) indices into level l-1, l = 1..4
    enc_groups: list  # (B, n_l, k) indices into level l-1
    enc_offsets: list
    dec_interp: list = field(default_factory=list)  # per decoder step: (index, weight)
    dec_groups: list = field(default_factory=list)
    dec_offsets: list = field(default_factory=list)


def _take(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b = np.arange(len(points)).reshape((-1,) + (1,) * (idx.ndim - 1))
    return points[b, idx]


def build_geometry(points: np.ndarray, cfg: NetworkConfig, samples=None, decoder: bool = True) -> Geometry:
    """Sampling, grouping and interpolation tables for ``(B, N, 3)`` clouds.

    ``samples`` lets a caller reuse the sample indices of another stack of
    clouds in vertex correspondence, so level ``l`` of both refers to the same
    vertex ids.
    """
    points = np.asarray(points, dtype=np.float64)
    b, n, _ = points.shape
    sizes = cfg.level_sizes(n)
    levels = [points]
    if samples is None:
        samples = []
        for size in sizes[1:]:
            samples.append(fps_batch(levels[-1], size))
            levels.append(_take(levels[-1], samples[-1]))
    else:
        samples = [np.asarray(s) for s in samples]
        for s in samples:
            levels.append(_take(levels[-1], s))
    trees = [[cKDTree(lv[i]) for lv in levels] for i in range(b)]

    def group(centers_lvl, data_lvl, r):
        idx = np.stack(
            [
                ball_query(levels[centers_lvl][i], levels[data_lvl][i], r, cfg.max_k, tree=trees[i][data_lvl]).index
                for i in range(b)
            ]
        )
        off = (_take(levels[data_lvl], idx) - levels[centers_lvl][:, :, None, :]) / r
        return idx, off

    geo = Geometry(levels, samples, [], [])
    for lvl in range(1, 5):
        idx, off = group(lvl, lvl - 1, cfg.enc_radii[lvl - 1])
        geo.enc_groups.append(idx)
        geo.enc_offsets.append(off)
    if decoder:
        for step in range(4):
            fine, coarse = 3 - step, 4 - step
            iw = [interpolation_weights(levels[fine][i], levels[coarse][i], tree=trees[i][coarse]) for i in range(b)]
            geo.dec_interp.append((np.stack([w.index for w in iw]), np.stack([w.weight for w in iw])))
            idx, off = group(fine, fine, cfg.dec_radii[step])
            geo.dec_groups.append(idx)
            geo.dec_offsets.append(off)
    return geo


def _batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    full = x.shape

    def bw(g):
        out = np.zeros(full)
        out[start:stop] = g
        return (out,)

    return T._make(x.data[start:stop], (x,), bw)


def stack_geometry(parts) -> Geometry:
    """Concatenate geometries of equally sized clouds along the batch axis."""
    parts = list(parts)
    cat = lambda name: [np.concatenate(xs) for xs in zip(*(getattr(g, name) for g in parts))]  # noqa: E731
    interp = [
        (np.concatenate([g.dec_interp[s][0] for g in parts]), np.concatenate([g.dec_interp[s][1] for g in parts]))
        for s in range(min(len(g.dec_interp) for g in parts))
    ]
    return Geometry(
        cat("levels"), cat("samples"), cat("enc_groups"), cat("enc_offsets"), interp, cat("dec_groups"), cat("dec_offsets")
    )


# --------------------------------------------------------------------- networks


class _Backbone:
    """Encoder stack, decoder stack and displacement head."""

    def __init__(self, cfg: NetworkConfig, seeder: _Seeder, prefix: str, skip_widths: list[int]):
        self.cfg = cfg
        ch = cfg.enc_channels
        self.encoders = [
            PointConvLayer(3 if l == 0 else ch[l - 1], ch[l], cfg.weight_hidden, seeder, f"{prefix}.enc{l}")
            for l in range(4)
        ]
        self.decoders = []
        coarse = ch[3]
        for step in range(4):
            out = cfg.dec_channels[step]
            self.decoders.append(
                PointConvLayer(coarse + skip_widths[3 - step], out, cfg.weight_hidden, seeder, f"{prefix}.dec{step}")
            )
            coarse = out
        self.head1 = Linear(cfg.dec_channels[3], cfg.head_hidden, seeder, f"{prefix}.head1")
        self.head2 = Linear(cfg.head_hidden, 3, seeder, f"{prefix}.head2")

    def encoder_parameters(self) -> list[Parameter]:
        return [p for layer in self.encoders for p in layer.parameters()]

    def head_parameters(self) -> list[Parameter]:
        return self.head1.parameters() + self.head2.parameters()

    def encode(self, x0, geo: Geometry) -> list[Tensor]:
        feats = []
        x = x0
        for l, layer in enumerate(self.encoders):
            x = layer(x, geo.enc_groups[l], geo.enc_offsets[l])
            feats.append(x)
        return feats

    def decode(self, deepest: Tensor, skips: list, geo: Geometry) -> Tensor:
        """``skips[l]`` holds the level-``l`` skip features, l = 0..3."""
        x = deepest
        for step, layer in enumerate(self.decoders):
            fine = 3 - step
            idx, w = geo.dec_interp[step]
            up = T.weighted_rows(x, idx, w)
            x = layer(T.concat([up, skips[fine]]), geo.dec_groups[step], geo.dec_offsets[step])
        return self.head2(T.relu(self.head1(x)))

    def zero_head(self):
        for p in self.head2.parameters():
            p.data[...] = 0.0


def _keep_mask(region: np.ndarray) -> np.ndarray:
    return np.asarray(region) == JAW


class SimulatorNet:
    """Maps a (normal, deformed) pair to jaw displacements of the normal surface."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        seeder = _Seeder(seed)
        ch = cfg.enc_channels
        self.backbone = _Backbone(cfg, seeder, "simulator", [6, ch[0], ch[1], ch[2]])
        self.fusion = [Linear(2 * ch[l], ch[l], seeder, f"simulator.fuse{l}") for l in range(4)]

    @property
    def encoders(self):
        return self.backbone.encoders

    def parameters(self) -> list[Parameter]:
        b = self.backbone
        params = b.encoder_parameters()
        for f in self.fusion:
            params += f.parameters()
        for d in b.decoders:
            params += d.parameters()
        return params + b.head_parameters()

    def head_parameters(self) -> list[Parameter]:
        return self.backbone.head_parameters()

    def prepare(self, normal_xyz: np.ndarray, deformed_xyz: np.ndarray) -> tuple[Geometry, Geometry]:
        """Geometry for both branches; the deformed branch reuses the normal's samples."""
        geo_n = build_geometry(normal_xyz, self.cfg)
        geo_d = build_geometry(deformed_xyz, self.cfg, samples=geo_n.samples, decoder=False)
        return geo_n, geo_d

    def __call__(self, normal_xyz, deformed_xyz, jaw_mask, geometry=None) -> Tensor:
        """Displacements ``(B, N, 3)``; rows where ``jaw_mask`` is False are exactly 0."""
        normal_xyz = np.asarray(normal_xyz, dtype=np.float64)
        deformed_xyz = np.asarray(deformed_xyz, dtype=np.float64)
        if normal_xyz.shape != deformed_xyz.shape:
            raise ValueError("normal and deformed clouds must be in vertex correspondence")
        geo_n, geo_d = geometry if geometry is not None else self.prepare(normal_xyz, deformed_xyz)
        b = normal_xyz.shape[0]
        both = stack_geometry([geo_n, geo_d])
        feats = self.backbone.encode(Tensor(np.concatenate([normal_xyz, deformed_xyz])), both)
        fused = []
        for l, f in enumerate(feats):
            pair = T.concat([_batch_slice(f, 0, b), _batch_slice(f, b, 2 * b)])
            fused.append(T.relu(self.fusion[l](pair)))
        skips = [Tensor(np.concatenate([normal_xyz, deformed_xyz], axis=-1))] + fused[:3]
        out = self.backbone.decode(fused[3], skips, geo_n)
        return T.mask_rows(out, np.broadcast_to(jaw_mask, out.shape[:-1]))


class CorrectorNet:
    """Encoder-decoder with concatenated skips; predicts corrective displacements.

    Vertices are visited in a canonical (lexicographic coordinate) order, which
    makes the output independent of the input vertex order. Midface rows of the
    correction are held at zero when ``freeze_midface`` is set.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 1, freeze_midface: bool = True):
        self.cfg = cfg
        self.freeze_midface = freeze_midface
        seeder = _Seeder(seed)
        ch = cfg.enc_channels
        self.backbone = _Backbone(cfg, seeder, "corrector", [3, ch[0], ch[1], ch[2]])

    def parameters(self) -> list[Parameter]:
        b = self.backbone
        params = b.encoder_parameters()
        for d in b.decoders:
            params += d.parameters()
        return params + b.head_parameters()

    def head_parameters(self) -> list[Parameter]:
        return self.backbone.head_parameters()

    def __call__(self, xyz, jaw_mask=None) -> Tensor:
        xyz = np.asarray(xyz, dtype=np.float64)
        squeeze = xyz.ndim == 2
        if squeeze:
            xyz = xyz[None]
        b, n, _ = xyz.shape
        self.cfg.level_sizes(n)
        order = np.stack([np.lexsort((p[:, 2], p[:, 1], p[:, 0])) for p in xyz])
        inverse = np.argsort(order, axis=1)
        canon = _take(xyz, order)
        geo = build_geometry(canon, self.cfg)
        feats = self.backbone.encode(Tensor(canon), geo)
        out = self.backbone.decode(feats[3], [Tensor(canon)] + feats[:3], geo)
        out = T.gather_rows(out, inverse)
        if self.freeze_midface:
            if jaw_mask is None:
                raise ValueError("a jaw mask is required when the midface is frozen")
            out = T.mask_rows(out, np.broadcast_to(np.asarray(jaw_mask, dtype=bool), (b, n)))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out


# ------------------------------------------------------------ surface wrappers


def simulator_forward(net: SimulatorNet, normal: LabeledSurface, deformed: LabeledSurface):
    """Run the simulator on one pair; returns ``(V_simulator, simulated surface)``."""
    if not normal.same_layout(deformed):
        raise ValueError("simulator inputs are not in template correspondence")
    with T.no_grad():
        v = net(normal.vertices[None], deformed.vertices[None], _keep_mask(normal.region)[None]).data[0]
    return DisplacementField(v), normal.with_vertices(normal.vertices + v)


def corrector_forward(net: CorrectorNet, surface: LabeledSurface):
    """Run the corrector on one surface; returns ``(correction, corrected surface)``."""
    if surface.n_vertices < 3 * net.cfg.sub_divisors[-1]:
        raise ValueError(f"corrector needs at least {3 * net.cfg.sub_divisors[-1]} vertices")
    with T.no_grad():
        v = net(surface.vertices, _keep_mask(surface.region)).data
    return DisplacementField(v), surface.with_vertices(surface.vertices + v)
