"""Forward-only numpy backbone: residual stem, DAM-L stages, pooling and losses.

Feature maps are float64 arrays shaped ``(T, C, H, W)``.  Nothing here
mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected a (T, C, H, W) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("tensor has non-finite values")
    return x


@dataclass(frozen=True, eq=False)
class ConvSpec:
    weight: np.ndarray   # (out, in, kh, kw)
    bias: np.ndarray     # (out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 4 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"conv weight {w.shape} / bias {b.shape} mismatch")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @classmethod
    def zeros(cls, c_in, c_out, k, stride=1, padding=None):
        return cls(np.zeros((c_out, c_in, k, k)), np.zeros(c_out), stride, k // 2 if padding is None else padding)

    @classmethod
    def identity(cls, c):
        w = np.zeros((c, c, 1, 1))
        w[np.arange(c), np.arange(c), 0, 0] = 1.0
        return cls(w, np.zeros(c))


@dataclass(frozen=True, eq=False)
class TemporalSpec:
    """Depthwise temporal convolution, zero-padded in T."""
    weight: np.ndarray   # (C, kt)
    bias: np.ndarray     # (C,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[1] % 2 != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"temporal weight {w.shape} / bias {b.shape} invalid (odd kt required)")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, c, kt=3):
        w = np.zeros((c, kt))
        w[:, kt // 2] = 1.0
        return cls(w, np.zeros(c))


# ---------------------------------------------------------------- primitives

def conv2d(x, spec: ConvSpec) -> np.ndarray:
    """Per-frame 2D cross-correlation."""
    x = as_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {x.shape[1]}")
    kh, kw = spec.kernel
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]   # (T, C, H', W', kh, kw)
    out = np.tensordot(win, spec.weight, axes=([1, 4, 5], [1, 2, 3]))      # (T, H', W', O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + spec.bias[None, :, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mean_over_frames(x) -> np.ndarray:
    """Frame mean, shape (1, C, H, W).

    Values are sorted along T and reduced as ``s[0] + mean(s - s[0])``: the
    result does not depend on frame order, and a time-constant input gives
    its frame back exactly.
    """
    x = as_tensor(x)
    if x.shape[0] < 1:
        raise ShapeError("need at least one frame")
    s = np.sort(x, axis=0)
    return s[:1] + (s - s[:1]).mean(axis=0, keepdims=True)


def subtract_frame_mean(x) -> np.ndarray:
    x = as_tensor(x)
    return x - mean_over_frames(x)


def temporal_conv(x, spec: TemporalSpec) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != spec.channels:
        raise ShapeError(f"temporal conv expects {spec.channels} channels, got {x.shape[1]}")
    kt = spec.weight.shape[1]
    half = kt // 2
    xp = np.pad(x, ((half, half), (0, 0), (0, 0), (0, 0)))
    out = np.zeros_like(x)
    for k in range(kt):
        out += spec.weight[None, :, k, None, None] * xp[k:k + x.shape[0]]
    return out + spec.bias[None, :, None, None]


def temporal_pool(x) -> np.ndarray:
    """Elementwise max over frames, shape (1, C, H, W)."""
    x = as_tensor(x)
    return x.max(axis=0, keepdims=True)


# ---------------------------------------------------------------- blocks

@dataclass(frozen=True, eq=False)
class DAMLParams:
    conv_a: ConvSpec        # 3x3, raw map
    conv_b: ConvSpec        # 1x1, raw map
    conv_c: ConvSpec        # 3x3, frame-mean-subtracted map
    conv_s: ConvSpec        # 3x3, static branch
    temporal: TemporalSpec  # kt=3 depthwise, applied after the residual sum
    layers: int = 1
    # "raw": conv_a, conv_b see x and conv_c sees x - mean(x);
    # "centered": conv_a, conv_b see x - mean(x) and conv_c sees x
    dynamic_parse: str = "raw"

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise ShapeError(f"layers must be 1 or 2, got {self.layers}")
        if self.dynamic_parse not in ("raw", "centered"):
            raise ShapeError(f"unknown dynamic_parse {self.dynamic_parse!r}")
        c = self.channels
        for name in ("conv_a", "conv_b", "conv_c", "conv_s"):
            spec = getattr(self, name)
            if spec.in_channels != c or spec.out_channels != c or spec.stride != 1:
                raise ShapeError(f"DAM-L {name} must map {c}->{c} channels at stride 1")
        if self.temporal.channels != c:
            raise ShapeError(f"DAM-L temporal conv has {self.temporal.channels} channels, expected {c}")

    @property
    def channels(self) -> int:
        return self.conv_a.in_channels


def dynamic_paths(x, p: DAMLParams) -> dict[str, np.ndarray]:
    """The three dynamic-branch terms and the static term of one DAM-L pass."""
    x = as_tensor(x)
    centered = subtract_frame_mean(x)
    a_in, c_in = (x, centered) if p.dynamic_parse == "raw" else (centered, x)
    out = {}
    for name, spec, inp in (("conv_a", p.conv_a, a_in), ("conv_b", p.conv_b, a_in),
                            ("conv_c", p.conv_c, c_in), ("conv_s", p.conv_s, x)):
        try:
            out[name] = conv2d(inp, spec)
        except ShapeError as e:
            raise ShapeError(f"DAM-L {name}: {e}") from e
    out["centered"] = centered
    return out


def _daml_once(x, p: DAMLParams) -> np.ndarray:
    t = dynamic_paths(x, p)
    dyn = t["conv_a"] + t["conv_b"] + t["conv_c"]
    try:
        pre = x + dyn + t["conv_s"]
    except ValueError as e:
        raise ShapeError(f"DAM-L residual sum: {e}") from e
    try:
        return temporal_conv(pre, p.temporal)
    except ShapeError as e:
        raise ShapeError(f"DAM-L temporal: {e}") from e


def daml_forward(x, p: DAMLParams) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"DAM-L expects {p.channels} channels, got {x.shape[1]}")
    for _ in range(p.layers):
        x = _daml_once(x, p)
    return x


@dataclass(frozen=True, eq=False)
class ResidualParams:
    conv1: ConvSpec     # 3x3 stride 2, lifts channels
    conv2: ConvSpec     # 3x3 stride 1
    shortcut: ConvSpec  # 1x1 stride 2


def residual_forward(x, p: ResidualParams) -> np.ndarray:
    return conv2d(relu(conv2d(x, p.conv1)), p.conv2) + conv2d(x, p.shortcut)


# ---------------------------------------------------------------- backbone

@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 1)    # stage 1 stem, then each transition
    strips: int = 8
    embed_dim: int = 32
    num_classes: int = 4
    margin: float = 0.2
    layers: int = 1
    dynamic_parse: str = "raw"
    temporal_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != 4 or len(self.strides) != 4:
            raise ShapeError("exactly four stages are required")

    def stage_shapes(self, T: int) -> list[tuple[int, int, int, int]]:
        size = self.input_size
        shapes = []
        for c, s in zip(self.channels, self.strides):
            size = (size - 1) // s + 1   # 3x3, padding 1
            shapes.append((T, c, size, size))
        return shapes

    def to_dict(self) -> dict:
        from dataclasses import asdict
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class NetParams:
    config: NetConfig
    stem: ResidualParams
    transitions: tuple[ConvSpec, ...]    # 3x3, lifts channels into stages 2-4
    blocks: tuple[DAMLParams, ...]
    strip_weight: np.ndarray             # (S, E, C4)
    strip_bias: np.ndarray               # (S, E)
    cls_weight: np.ndarray               # (S, K, E)
    cls_bias: np.ndarray                 # (S, K)

    def with_identity_temporal(self) -> "NetParams":
        blocks = tuple(replace(b, temporal=TemporalSpec.identity(b.channels, b.temporal.weight.shape[1]))
                       for b in self.blocks)
        return replace(self, blocks=blocks)

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping (the weight-file layout)."""
        out = {}

        def conv(prefix, spec):
            out[prefix + ".weight"] = spec.weight
            out[prefix + ".bias"] = spec.bias

        conv("stem.conv1", self.stem.conv1)
        conv("stem.conv2", self.stem.conv2)
        conv("stem.shortcut", self.stem.shortcut)
        for i, (tr, blk) in enumerate(zip(self.transitions, self.blocks), start=2):
            conv(f"stage{i}.transition", tr)
            for name in ("conv_a", "conv_b", "conv_c", "conv_s"):
                conv(f"stage{i}.{name}", getattr(blk, name))
            out[f"stage{i}.temporal.weight"] = blk.temporal.weight
            out[f"stage{i}.temporal.bias"] = blk.temporal.bias
        out["head.strip.weight"] = self.strip_weight
        out["head.strip.bias"] = self.strip_bias
        out["head.cls.weight"] = self.cls_weight
        out["head.cls.bias"] = self.cls_bias
        return out


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c = cfg.channels
    kt = cfg.temporal_kernel
    shapes["stem.conv1.weight"] = (c[0], cfg.in_channels, 3, 3)
    shapes["stem.conv2.weight"] = (c[0], c[0], 3, 3)
    shapes["stem.shortcut.weight"] = (c[0], cfg.in_channels, 1, 1)
    for i in range(1, 4):
        shapes[f"stage{i + 1}.transition.weight"] = (c[i], c[i - 1], 3, 3)
        for name, k in (("conv_a", 3), ("conv_b", 1), ("conv_c", 3), ("conv_s", 3)):
            shapes[f"stage{i + 1}.{name}.weight"] = (c[i], c[i], k, k)
        shapes[f"stage{i + 1}.temporal.weight"] = (c[i], kt)
    for name in list(shapes):
        shapes[name.replace(".weight", ".bias")] = (shapes[name][0],)
    S, E, K = cfg.strips, cfg.embed_dim, cfg.num_classes
    shapes["head.strip.weight"] = (S, E, c[3])
    shapes["head.strip.bias"] = (S, E)
    shapes["head.cls.weight"] = (S, K, E)
    shapes["head.cls.bias"] = (S, K)
    return dict(sorted(shapes.items()))


def params_from_arrays(cfg: NetConfig, arrays: dict[str, np.ndarray]) -> NetParams:
    expected = param_shapes(cfg)
    missing = set(expected) - set(arrays)
    if missing:
        raise ShapeError(f"missing parameters: {sorted(missing)}")
    for name, shp in expected.items():
        if tuple(np.shape(arrays[name])) != shp:
            raise ShapeError(f"{name}: expected shape {shp}, got {np.shape(arrays[name])}")
    a = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def conv(prefix, stride=1, padding=None):
        w = a[prefix + ".weight"]
        return ConvSpec(w, a[prefix + ".bias"], stride, w.shape[2] // 2 if padding is None else padding)

    s = cfg.strides
    stem = ResidualParams(conv("stem.conv1", s[0]), conv("stem.conv2"), conv("stem.shortcut", s[0], 0))
    transitions, blocks = [], []
    for i in range(2, 5):
        transitions.append(conv(f"stage{i}.transition", s[i - 1]))
        blocks.append(DAMLParams(
            conv(f"stage{i}.conv_a"), conv(f"stage{i}.conv_b"), conv(f"stage{i}.conv_c"),
            conv(f"stage{i}.conv_s"),
            TemporalSpec(a[f"stage{i}.temporal.weight"], a[f"stage{i}.temporal.bias"]),
            layers=cfg.layers, dynamic_parse=cfg.dynamic_parse))
    return NetParams(cfg, stem, tuple(transitions), tuple(blocks),
                     a["head.strip.weight"], a["head.strip.bias"], a["head.cls.weight"], a["head.cls.bias"])


def init_params(cfg: NetConfig, seed: int | None = 0, kind: str = "random") -> NetParams:
    """``random``: He-scaled normals (float32-representable); ``zero``: all zeros."""
    shapes = param_shapes(cfg)
    if kind == "zero":
        return params_from_arrays(cfg, {k: np.zeros(v) for k, v in shapes.items()})
    if kind != "random":
        raise ValueError(f"unknown init kind {kind!r}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shp in shapes.items():
        if name.endswith(".bias"):
            v = rng.normal(0.0, 0.01, shp)
        elif ".temporal." in name:
            v = rng.normal(0.0, 0.1, shp)
            v[:, shp[1] // 2] += 1.0
        else:
            fan_in = int(np.prod(shp[1:]))
            v = rng.normal(0.0, np.sqrt(2.0 / fan_in), shp)
            if name.startswith("stage") and ("conv_" in name):
                v *= 0.25   # keep the residual sum from blowing up across stages
        # round through float32 so saved and in-memory weights agree exactly
        arrays[name] = v.astype(np.float32).astype(np.float64)
    return params_from_arrays(cfg, arrays)


def backbone_forward(x, params: NetParams, return_stages: bool = False):
    x = as_tensor(x)
    cfg = params.config
    if x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeError(f"backbone expects (T, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), "
                         f"got {x.shape}")
    stages = [residual_forward(x, params.stem)]
    for tr, blk in zip(params.transitions, params.blocks):
        h = relu(conv2d(stages[-1], tr))
        stages.append(daml_forward(h, blk))
    return stages if return_stages else stages[-1]


# ---------------------------------------------------------------- head

def strip_pool(x, strips: int) -> np.ndarray:
    """(1, C, H, W) -> (S, C): max + mean over each horizontal strip."""
    x = as_tensor(x)
    if x.shape[0] != 1:
        raise ShapeError(f"strip pooling expects a pooled (1, C, H, W) map, got T={x.shape[0]}")
    _, C, H, W = x.shape
    if strips < 1 or H % strips:
        raise ValueError(f"height {H} is not divisible into {strips} strips")
    parts = x[0].reshape(C, strips, (H // strips) * W)
    return (parts.max(axis=2) + parts.mean(axis=2)).T


def horizontal_pool(x, strips: int, weight=None, bias=None) -> np.ndarray:
    """Per-strip pooled vectors mapped through per-strip affine maps; (S, E)."""
    pooled = strip_pool(x, strips)
    if weight is None:
        return pooled
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[:2]) if bias is None else np.asarray(bias, dtype=np.float64)
    if weight.shape[0] != strips or weight.shape[2] != pooled.shape[1]:
        raise ShapeError(f"strip affine weight {weight.shape} does not fit {pooled.shape}")
    return np.einsum("sec,sc->se", weight, pooled) + bias


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray          # (N, S, E)
    labels: np.ndarray              # (N,) integer class ids
    logits: np.ndarray              # (N, S, K)
    identities: list[str] = field(default_factory=list)


def embed(x, params: NetParams) -> tuple[np.ndarray, np.ndarray]:
    """One sequence -> ((S, E) strip embeddings, (S, K) logits)."""
    cfg = params.config
    pooled = temporal_pool(backbone_forward(x, params))
    e = horizontal_pool(pooled, cfg.strips, params.strip_weight, params.strip_bias)
    logits = np.einsum("ske,se->sk", params.cls_weight, e) + params.cls_bias
    return e, logits


def embed_batch(samples, labels, params: NetParams, identities=None) -> EmbeddingSet:
    es, ls = zip(*(embed(x, params) for x in samples))
    return EmbeddingSet(np.stack(es), np.asarray(labels, dtype=np.int64), np.stack(ls), list(identities or []))


# ---------------------------------------------------------------- losses

def pairwise_distances(e: np.ndarray) -> np.ndarray:
    """(..., N, E) -> (..., N, N) Euclidean distances; exact zeros for equal rows."""
    diff = e[..., :, None, :] - e[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def triplet_loss(embeddings, labels, margin: float = 0.2) -> float:
    """Batch-all triplet hinge averaged over valid triplets, then over strips.

    ``embeddings`` is (N, E) or (N, S, E).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 2:
        e = e[:, None, :]
    labels = np.asarray(labels).reshape(-1)
    if e.shape[0] != labels.shape[0]:
        raise ShapeError(f"{e.shape[0]} embeddings but {labels.shape[0]} labels")
    N = e.shape[0]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(N, dtype=bool)
    neg = ~same
    valid = pos[:, :, None] & neg[:, None, :]          # (a, p, n)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid (anchor, positive, negative) triplet in batch")
    d = pairwise_distances(e.transpose(1, 0, 2))        # (S, N, N)
    hinge = np.maximum(d[:, :, :, None] - d[:, :, None, :] + margin, 0.0)
    # averaged as offsets from the margin so all-identical embeddings give exactly the margin
    per_strip = [math.fsum(h[valid] - margin) / n_valid for h in hinge]
    return margin + math.fsum(per_strip) / len(per_strip)


def cross_entropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {z.shape} do not match {labels.shape[0]} labels")
    K = z.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def strip_cross_entropy(logits, labels) -> float:
    """Cross-entropy averaged over strips for (N, S, K) logits."""
    z = np.asarray(logits, dtype=np.float64)
    return float(np.mean([cross_entropy(z[:, s], labels) for s in range(z.shape[1])]))
