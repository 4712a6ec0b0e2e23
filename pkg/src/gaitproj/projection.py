"""Planar and spherical range-view projection, rasterization and normalization."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .pointcloud import Frame, Sequence, SequenceStats, compute_stats


class ProjectionError(ValueError):
    pass


class SphereDomainError(ProjectionError):
    pass


class EmptyFrameError(ProjectionError):
    pass


class AllPointsDroppedError(ProjectionError):
    def __init__(self, dropped: int, msg: str | None = None):
        super().__init__(msg or f"all {dropped} points fell outside the image or the sphere domain")
        self.dropped = dropped


class Mode(str, enum.Enum):
    PLANAR = "Planar"
    SPHERICAL = "Spherical"


class Scope(str, enum.Enum):
    PER_FRAME = "PerFrame"
    PER_SEQUENCE = "PerSequence"


# a 1.7 m subject seen from 6 m subtends ~0.28 rad; 0.3 rad spread over 64 pixels
DEFAULT_ANGULAR_STEP = 0.3 / 64


def sphere_steps(stats: SequenceStats) -> tuple[float, float]:
    """Default grid steps (l, d) for the sphere centre height and radius."""
    return 0.1 * (stats.z_max - stats.z_min), 0.1 * stats.r


@dataclass(frozen=True)
class ProjectionConfig:
    mode: Mode = Mode.SPHERICAL
    delta_theta: float = DEFAULT_ANGULAR_STEP
    delta_phi: float = DEFAULT_ANGULAR_STEP
    R: float | None = None      # None: r + r_step * d   (d = 0.1 r)
    z_r: float | None = None    # None: c + z_step * l   (l = 0.1 (z_max - z_min))
    z_step: int = 0
    r_step: int = 0
    width: int = 64
    height: int = 64
    h_center: int | None = None  # None: width // 2
    v_center: int | None = None  # None: height // 2
    collision_policy: str = "NearestWins"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not (self.delta_theta > 0 and self.delta_phi > 0):
            raise ProjectionError("delta_theta and delta_phi must be positive")
        if self.width < 2 or self.height < 2:
            raise ProjectionError("image must be at least 2x2")
        if self.mode is Mode.SPHERICAL and self.R is not None and not self.R > 0:
            raise ProjectionError(f"sphere radius R must be positive, got {self.R}")
        if self.collision_policy != "NearestWins":
            raise ProjectionError(f"unknown collision policy {self.collision_policy!r}")

    @property
    def hc(self) -> int:
        return self.width // 2 if self.h_center is None else self.h_center

    @property
    def vc(self) -> int:
        return self.height // 2 if self.v_center is None else self.v_center

    def resolved(self, stats: SequenceStats) -> "ProjectionConfig":
        """Fill unset sphere parameters from sequence statistics."""
        if self.mode is not Mode.SPHERICAL:
            return self
        l, d = sphere_steps(stats)
        return replace(self,
                       R=stats.r + self.r_step * d if self.R is None else self.R,
                       z_r=stats.c + self.z_step * l if self.z_r is None else self.z_r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ProjectionError(f"unknown projection config keys: {sorted(unknown)}")
        return cls(**known)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProjectionConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class DepthImage:
    depth: np.ndarray   # (H, W) meters, 0 where invalid
    valid: np.ndarray   # (H, W) bool
    label: np.ndarray   # (H, W) uint8 body label of the winning point, 0 where invalid
    dropped_points: int = 0

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return (self.dropped_points == other.dropped_points
                and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.label, other.label))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    gray: np.ndarray                # (H, W) uint8
    rgb: np.ndarray | None = None   # (H, W, 3) uint8

    def __eq__(self, other):
        if not isinstance(other, NormalizedImage):
            return NotImplemented
        if (self.rgb is None) != (other.rgb is None):
            return False
        return np.array_equal(self.gray, other.gray) and (
            self.rgb is None or np.array_equal(self.rgb, other.rgb))


# ---------------------------------------------------------------- pointwise maps

def planar_project(p) -> tuple[float, float]:
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    n = math.sqrt(x * x + y * y + z * z)
    if n == 0:
        raise ProjectionError("direction undefined for a point at the origin")
    return math.atan2(x, y), math.asin(max(-1.0, min(1.0, z / n)))


def spherical_project(p, R: float, z_r: float) -> tuple[float, float]:
    y, z = float(p[1]), float(p[2])
    if abs(y) > R:
        raise SphereDomainError(f"|y|={abs(y)} exceeds sphere radius R={R}")
    return math.acos(y / R), math.atan2(z - z_r, R)


def project_angles(xyz: np.ndarray, cfg: ProjectionConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised angles for an (N, 3) array; returns (h_ang, v_ang, in_domain)."""
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    if cfg.mode is Mode.PLANAR:
        n = np.sqrt(x * x + y * y + z * z)
        ok = n > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.arcsin(np.clip(z / n, -1.0, 1.0))
        return np.arctan2(x, y), np.where(ok, v, 0.0), ok
    if cfg.R is None or cfg.z_r is None:
        raise ProjectionError("spherical mode needs R and z_r resolved (see ProjectionConfig.resolved)")
    ok = np.abs(y) <= cfg.R
    h = np.arccos(np.clip(y / cfg.R, -1.0, 1.0))
    v = np.arctan2(z - cfg.z_r, cfg.R)
    return h, v, ok


def angular_center(frames, cfg: ProjectionConfig) -> tuple[float, float]:
    """Midpoint of the angular bounding box over all in-domain points of ``frames``."""
    lo_h = lo_v = math.inf
    hi_h = hi_v = -math.inf
    for fr in frames:
        if len(fr) == 0:
            continue
        h, v, ok = project_angles(fr.xyz, cfg)
        if not ok.any():
            continue
        lo_h, hi_h = min(lo_h, h[ok].min()), max(hi_h, h[ok].max())
        lo_v, hi_v = min(lo_v, v[ok].min()), max(hi_v, v[ok].max())
    if math.isinf(lo_h):
        return 0.0, 0.0
    return float((lo_h + hi_h) / 2), float((lo_v + hi_v) / 2)


def rasterize(frame: Frame, cfg: ProjectionConfig, center: tuple[float, float] | None = None) -> DepthImage:
    """Range-view depth image with nearest-point-wins collisions.

    ``center`` is the angular point placed at (h_center, v_center); by default
    the frame's own angular bounding-box midpoint.
    """
    if len(frame) == 0:
        raise EmptyFrameError(f"frame {frame.frame_index} is empty")
    if center is None:
        center = angular_center([frame], cfg)
    h_ang, v_ang, ok = project_angles(frame.xyz, cfg)
    h0 = center[0] / cfg.delta_theta
    v0 = center[1] / cfg.delta_phi
    hp = np.floor(h_ang / cfg.delta_theta - h0).astype(np.int64) + cfg.hc
    vp = np.floor(v_ang / cfg.delta_phi - v0).astype(np.int64) + cfg.vc
    ok &= (hp >= 0) & (hp < cfg.width) & (vp >= 0) & (vp < cfg.height)
    dropped = int((~ok).sum())
    if not ok.any():
        raise AllPointsDroppedError(dropped)

    x, y = frame.xyz[ok, 0], frame.xyz[ok, 1]
    D = np.sqrt(x * x + y * y)
    lab = frame.labels[ok]
    pix = vp[ok] * cfg.width + hp[ok]
    # sort by pixel, then depth, then label: the first entry per pixel wins
    order = np.lexsort((lab, D, pix))
    pix_s = pix[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]

    depth = np.zeros(cfg.height * cfg.width)
    valid = np.zeros(cfg.height * cfg.width, dtype=bool)
    label = np.zeros(cfg.height * cfg.width, dtype=np.uint8)
    depth[pix[win]] = D[win]
    valid[pix[win]] = True
    label[pix[win]] = lab[win]
    shp = (cfg.height, cfg.width)
    return DepthImage(depth.reshape(shp), valid.reshape(shp), label.reshape(shp), dropped)


# ---------------------------------------------------------------- normalization

def _depth_range(stack) -> tuple[float, float]:
    vals = [im.depth[im.valid] for im in stack if im.valid.any()]
    if not vals:
        raise ProjectionError("no valid pixels to normalize")
    lo = min(float(v.min()) for v in vals)
    hi = max(float(v.max()) for v in vals)
    return lo, hi


def _to_gray(im: DepthImage, lo: float, hi: float) -> np.ndarray:
    gray = np.zeros(im.depth.shape, dtype=np.uint8)
    d = im.depth[im.valid]
    if hi == lo:
        g = np.full(d.shape, 255.0)
    else:
        g = np.floor((d - lo) * 255.0 / (hi - lo) + 0.5)
    gray[im.valid] = np.clip(g, 0, 255).astype(np.uint8)
    return gray


def normalize(stack, scope: Scope | str = Scope.PER_SEQUENCE) -> list[NormalizedImage]:
    """Min-max map valid depths to 0..255 (round half up); invalid pixels are 0."""
    scope = Scope(scope)
    stack = list(stack)
    if scope is Scope.PER_SEQUENCE:
        lo, hi = _depth_range(stack)
        return [NormalizedImage(_to_gray(im, lo, hi)) for im in stack]
    out = []
    for i, im in enumerate(stack):
        if not im.valid.any():
            raise ProjectionError(f"frame {i}: no valid pixels to normalize")
        lo, hi = _depth_range([im])
        out.append(NormalizedImage(_to_gray(im, lo, hi)))
    return out


def normalized_depth(stack) -> list[np.ndarray]:
    """Continuous sequence-scope min-max depth in [0, 1] (NaN where invalid)."""
    stack = list(stack)
    lo, hi = _depth_range(stack)
    span = hi - lo
    out = []
    for im in stack:
        a = np.full(im.depth.shape, np.nan)
        a[im.valid] = 1.0 if span == 0 else (im.depth[im.valid] - lo) / span
        out.append(a)
    return out


def to_rgb(img: NormalizedImage) -> NormalizedImage:
    return NormalizedImage(img.gray, np.repeat(img.gray[:, :, None], 3, axis=2))


# ---------------------------------------------------------------- sequences

def prepare_config(seq: Sequence, cfg: ProjectionConfig, stats: SequenceStats | None = None) -> ProjectionConfig:
    """Resolve sphere parameters and check the sphere encloses every |y|."""
    if cfg.mode is Mode.PLANAR:
        return cfg
    stats = stats or compute_stats(seq)
    cfg = cfg.resolved(stats)
    if not cfg.R > 0:
        raise SphereDomainError(f"sphere radius R={cfg.R:.6g} must be positive")
    if cfg.R < stats.max_abs_y:
        raise SphereDomainError(
            f"sphere radius R={cfg.R:.6g} is smaller than max |y|={stats.max_abs_y:.6g} of the sequence")
    return cfg


def rasterize_sequence(seq: Sequence, cfg: ProjectionConfig, stats: SequenceStats | None = None,
                       validate: bool = True) -> list[DepthImage]:
    """Rasterize every frame around one sequence-wide angular centre."""
    if validate:
        cfg = prepare_config(seq, cfg, stats)
    center = angular_center(seq.frames, cfg)
    out = []
    for fr in seq.frames:
        try:
            out.append(rasterize(fr, cfg, center))
        except AllPointsDroppedError as e:
            raise AllPointsDroppedError(e.dropped, f"frame {fr.frame_index}: {e}") from e
        except ProjectionError as e:
            raise type(e)(f"frame {fr.frame_index}: {e}") from e
    return out


def project_sequence(seq: Sequence, cfg: ProjectionConfig, stats: SequenceStats | None = None) -> list[NormalizedImage]:
    depth = rasterize_sequence(seq, cfg, stats)
    return [to_rgb(im) for im in normalize(depth, Scope.PER_SEQUENCE)]


# ---------------------------------------------------------------- PNG I/O

def write_png_stack(images, out_dir: str | Path, seq_id: str, rgb: bool = True) -> list[Path]:
    """Write ``<out_dir>/<seq_id>/<index:04d>.png``; image row 0 is the top (highest elevation)."""
    from PIL import Image

    d = Path(out_dir) / seq_id
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        if rgb:
            arr = (im.rgb if im.rgb is not None else to_rgb(im).rgb)
            pil = Image.fromarray(np.ascontiguousarray(arr[::-1]), mode="RGB")
        else:
            pil = Image.fromarray(np.ascontiguousarray(im.gray[::-1]), mode="L")
        p = d / f"{i:04d}.png"
        pil.save(p, format="PNG")
        paths.append(p)
    return paths


def read_png_stack(directory: str | Path) -> list[NormalizedImage]:
    from PIL import Image

    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise ProjectionError(f"no PNG frames in {directory}")
    out = []
    for p in files:
        with Image.open(p) as pil:
            if pil.mode == "L":
                gray = np.asarray(pil)[::-1].copy()
                out.append(NormalizedImage(gray))
            else:
                rgb = np.asarray(pil.convert("RGB"))[::-1].copy()
                out.append(NormalizedImage(rgb[:, :, 0].copy(), rgb))
    return out
