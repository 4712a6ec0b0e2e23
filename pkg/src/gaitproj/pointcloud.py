"""Point-cloud containers, frame-file readers and the synthetic walker.

Frames hold their points as an ``(N, 3)`` float64 array plus a per-point
body-label array; both are frozen after construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np


class ParseError(ValueError):
    pass


class UnsupportedFormatError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class DegenerateSequenceError(ValueError):
    pass


class BodyLabel(enum.IntEnum):
    UNLABELED = 0
    TORSO = 1
    HEAD = 2
    LEFT_ARM = 3
    RIGHT_ARM = 4
    LEFT_LEG = 5
    RIGHT_LEG = 6


LIMB_LABELS = (BodyLabel.LEFT_ARM, BodyLabel.RIGHT_ARM, BodyLabel.LEFT_LEG, BodyLabel.RIGHT_LEG)


class Point3(NamedTuple):
    x: float
    y: float
    z: float
    body_label: BodyLabel = BodyLabel.UNLABELED


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    xyz: np.ndarray
    labels: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if labels.shape[0] != xyz.shape[0]:
            raise ValueError(f"{xyz.shape[0]} points but {labels.shape[0]} labels")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("frame contains non-finite coordinates")
        if self.frame_index < 0:
            raise ValueError("frame_index must be nonnegative")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "labels", _frozen(labels))

    @classmethod
    def from_points(cls, points: Iterable, frame_index: int = 0) -> "Frame":
        pts = [Point3(*p) for p in points]
        xyz = np.array([[p.x, p.y, p.z] for p in pts], dtype=np.float64).reshape(-1, 3)
        labels = np.array([int(p.body_label) for p in pts], dtype=np.uint8)
        return cls(xyz, labels, frame_index)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def points(self) -> list[Point3]:
        return [Point3(float(x), float(y), float(z), BodyLabel(int(lab)))
                for (x, y, z), lab in zip(self.xyz, self.labels)]

    def with_index(self, frame_index: int) -> "Frame":
        return Frame(self.xyz, self.labels, frame_index)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class Sequence:
    identity_id: str
    sequence_id: str
    frames: tuple[Frame, ...]
    condition: str | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise EmptySequenceError("a sequence needs at least one frame")
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"frame indices must strictly increase, got {idx}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def all_points(self) -> np.ndarray:
        return np.concatenate([f.xyz for f in self.frames], axis=0)

    def all_labels(self) -> np.ndarray:
        return np.concatenate([f.labels for f in self.frames], axis=0)


@dataclass(frozen=True)
class SequenceStats:
    z_min: float
    z_max: float
    c: float
    r: float
    max_abs_y: float
    n_points: int


# ---------------------------------------------------------------- file formats

def _parse_float(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"line {lineno}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"line {lineno}: non-finite value {tok!r}")
    return v


def parse_xyz(text: str, frame_index: int = 0) -> Frame:
    """Parse ``x y z`` lines; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 3:
            raise ParseError(f"line {lineno}: expected 3 values, got {len(toks)}")
        rows.append([_parse_float(t, lineno) for t in toks])
    xyz = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return Frame(xyz, np.zeros(len(rows), dtype=np.uint8), frame_index)


def format_xyz(frame: Frame, with_labels: bool = False) -> str:
    # repr() is the shortest string that round-trips a float64 exactly
    lines = []
    for (x, y, z), lab in zip(frame.xyz.tolist(), frame.labels.tolist()):
        s = f"{x!r} {y!r} {z!r}"
        if with_labels:
            s += f"  # {BodyLabel(lab).name}"
        lines.append(s)
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_label_comments(text: str) -> np.ndarray | None:
    """Recover body labels written by ``format_xyz(..., with_labels=True)``."""
    labels = []
    for line in text.splitlines():
        body, _, comment = line.partition("#")
        if not body.strip():
            continue
        name = comment.strip()
        if name not in BodyLabel.__members__:
            return None
        labels.append(BodyLabel[name])
    return np.array(labels, dtype=np.uint8)


def parse_ply_ascii(text: str, frame_index: int = 0) -> Frame:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("line 1: missing 'ply' magic")
    elements: list[list] = []  # [name, count, [property names]]
    fmt = None
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        toks = raw.split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        if toks[0] == "format":
            fmt = toks[1] if len(toks) > 1 else ""
            if fmt != "ascii":
                raise UnsupportedFormatError(f"PLY format {fmt!r} is not supported (ascii only)")
        elif toks[0] == "element":
            if len(toks) != 3:
                raise ParseError(f"line {i}: malformed element declaration")
            try:
                count = int(toks[2])
            except ValueError:
                raise ParseError(f"line {i}: bad element count {toks[2]!r}") from None
            elements.append([toks[1], count, []])
        elif toks[0] == "property":
            if not elements:
                raise ParseError(f"line {i}: property before any element")
            elements[-1][2].append(toks[-1] if toks[1] != "list" else ("list", toks[-1]))
        elif toks[0] == "end_header":
            body_start = i
            break
        else:
            raise ParseError(f"line {i}: unexpected header keyword {toks[0]!r}")
    if body_start is None:
        raise ParseError("missing end_header")
    if fmt is None:
        raise ParseError("missing format line")

    body = [(n, ln) for n, ln in enumerate(lines[body_start:], start=body_start + 1) if ln.strip()]
    pos = 0
    xyz = None
    for name, count, props in elements:
        chunk = body[pos:pos + count]
        if len(chunk) != count:
            raise ParseError(f"element {name!r}: header declares {count} rows, body has {len(chunk)}")
        pos += count
        if name != "vertex":
            continue
        try:
            ix = [props.index(a) for a in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x/y/z properties") from None
        rows = []
        for lineno, ln in chunk:
            toks = ln.split()
            if len(toks) < len(props):
                raise ParseError(f"line {lineno}: expected {len(props)} values, got {len(toks)}")
            rows.append([_parse_float(toks[k], lineno) for k in ix])
        xyz = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if pos != len(body):
        raise ParseError(f"body has {len(body) - pos} rows beyond those declared in the header")
    if xyz is None:
        raise ParseError("no vertex element")
    return Frame(xyz, np.zeros(len(xyz), dtype=np.uint8), frame_index)


def format_ply_ascii(frame: Frame) -> str:
    head = ["ply", "format ascii 1.0", f"element vertex {len(frame)}",
            "property double x", "property double y", "property double z", "end_header"]
    rows = [f"{x!r} {y!r} {z!r}" for x, y, z in frame.xyz.tolist()]
    return "\n".join(head + rows) + "\n"


def read_frame(path: str | Path, frame_index: int = 0) -> Frame:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".ply":
        return parse_ply_ascii(text, frame_index)
    frame = parse_xyz(text, frame_index)
    labels = _parse_label_comments(text)
    if labels is not None and len(labels) == len(frame):
        frame = Frame(frame.xyz, labels, frame_index)
    return frame


def load_sequence(directory: str | Path, pattern: str = "*.xyz",
                  identity_id: str | None = None, sequence_id: str | None = None) -> Sequence:
    """Load one frame per matching file, ordered by filename."""
    directory = Path(directory)
    files = sorted((p for p in directory.glob(pattern) if p.is_file()), key=lambda p: p.name)
    if not files:
        raise EmptySequenceError(f"no files matching {pattern!r} in {directory}")
    frames = []
    for i, p in enumerate(files):
        try:
            frames.append(read_frame(p, i))
        except (ParseError, UnsupportedFormatError) as e:
            raise type(e)(f"{p.name}: {e}") from e
    meta = {}
    manifest = directory / "manifest.json"
    if manifest.is_file():
        import json
        meta = json.loads(manifest.read_text())
    return Sequence(
        identity_id=identity_id or meta.get("identity_id") or directory.name,
        sequence_id=sequence_id or meta.get("sequence_id") or directory.name,
        frames=tuple(frames),
        condition=meta.get("condition"),
    )


# ---------------------------------------------------------------- statistics

def compute_stats(seq: Sequence) -> SequenceStats:
    pts = seq.all_points()
    if pts.shape[0] == 0:
        raise EmptySequenceError("sequence has no points")
    z_min = float(pts[:, 2].min())
    z_max = float(pts[:, 2].max())
    c = (z_min + z_max) / 2
    dist = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + (pts[:, 2] - c) ** 2)
    # math.fsum keeps r independent of point order
    r = math.fsum(dist.tolist()) / len(dist)
    if r <= 0:
        raise DegenerateSequenceError("average distance r is zero (all points at the sphere centre)")
    return SequenceStats(z_min=z_min, z_max=z_max, c=c, r=r,
                         max_abs_y=float(np.abs(pts[:, 1]).max()), n_points=int(pts.shape[0]))


# ---------------------------------------------------------------- synthetic walker

@dataclass(frozen=True)
class WalkerGeometry:
    """Stick-figure proportions as fractions of subject height.

    Only the relative planar-vs-spherical comparison depends on these.
    """
    hip_height: float = 0.50
    shoulder_height: float = 0.82
    head_center: float = 0.93
    head_radius: float = 0.065
    torso_radius: float = 0.08
    shoulder_half_width: float = 0.11
    hip_half_width: float = 0.06
    arm_length: float = 0.36
    arm_swing_ratio: float = 0.8
    share_torso: float = 0.30
    share_head: float = 0.10
    share_arms: float = 0.25
    ground_z: float = -1.0
    heading_deg: float = 90.0
    frame_rate: float = 10.0


@dataclass(frozen=True)
class WalkerParams:
    n_frames: int = 30
    points_per_frame: int = 2048
    stride_frequency: float = 1.0
    limb_swing_amplitude: float = 0.45
    subject_height: float = 1.70
    distance_from_sensor: float = 6.0
    seed: int = 0
    geometry: WalkerGeometry = field(default_factory=WalkerGeometry)

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.points_per_frame < 100:
            raise ValueError(f"points_per_frame must be >= 100, got {self.points_per_frame}")
        for name in ("subject_height", "distance_from_sensor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.stride_frequency < 0 or self.limb_swing_amplitude < 0:
            raise ValueError("stride_frequency and limb_swing_amplitude must be nonnegative")
        if self.geometry.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")


def _split_counts(total: int, shares: list[float]) -> list[int]:
    raw = [total * s for s in shares]
    counts = [int(math.floor(v)) for v in raw]
    counts[-1] += total - sum(counts)
    return counts


def synth_walker(params: WalkerParams = WalkerParams()) -> Sequence:
    """Articulated stick figure walking in place in front of the sensor.

    Body-surface samples are drawn once per sequence and re-posed every
    frame, so a zero stride frequency yields identical frames.  Only the
    sensor-facing halves of the torso cylinder and the head are sampled.
    """
    params.validate()
    g = params.geometry
    H = params.subject_height
    rng = np.random.default_rng(params.seed)

    n_torso, n_head, n_arms, n_legs = _split_counts(
        params.points_per_frame,
        [g.share_torso, g.share_head, g.share_arms, 1 - g.share_torso - g.share_head - g.share_arms])
    n_la = n_arms // 2
    n_ll = n_legs // 2

    # body frame: forward f, lateral s (left), up; subject base at (0, d, ground)
    heading = math.radians(g.heading_deg)
    f = np.array([math.cos(heading), math.sin(heading), 0.0])
    s = np.array([-math.sin(heading), math.cos(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    base = np.array([0.0, params.distance_from_sensor, g.ground_z])
    # direction from the subject towards the sensor, horizontal
    to_sensor = -base.copy()
    to_sensor[2] = 0.0
    to_sensor /= np.linalg.norm(to_sensor)
    side = np.cross(up, to_sensor)

    # torso: sensor-facing half cylinder
    t_ang = rng.uniform(-math.pi / 2, math.pi / 2, n_torso)
    t_z = rng.uniform(g.hip_height * H, g.shoulder_height * H, n_torso)
    torso = (base + g.torso_radius * H * (np.cos(t_ang)[:, None] * to_sensor + np.sin(t_ang)[:, None] * side)
             + t_z[:, None] * up)
    # head: sensor-facing hemisphere cap
    u = rng.normal(size=(n_head, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    facing = u @ to_sensor
    u[facing < 0] -= 2 * facing[facing < 0, None] * to_sensor
    head = base + g.head_center * H * up + g.head_radius * H * u

    static = np.concatenate([torso, head])
    static_labels = np.concatenate([np.full(n_torso, BodyLabel.TORSO), np.full(n_head, BodyLabel.HEAD)])

    limbs = []  # (label, joint offset, length, swing scale, phase sign, t samples)
    for label, side_sign, n in ((BodyLabel.LEFT_ARM, 1, n_la), (BodyLabel.RIGHT_ARM, -1, n_arms - n_la)):
        joint = base + g.shoulder_height * H * up + side_sign * g.shoulder_half_width * H * s
        limbs.append((label, joint, g.arm_length * H, g.arm_swing_ratio, side_sign, rng.uniform(0, 1, n)))
    for label, side_sign, n in ((BodyLabel.LEFT_LEG, 1, n_ll), (BodyLabel.RIGHT_LEG, -1, n_legs - n_ll)):
        joint = base + g.hip_height * H * up + side_sign * g.hip_half_width * H * s
        # legs swing opposite to the arm on the same side
        limbs.append((label, joint, g.hip_height * H, 1.0, -side_sign, rng.uniform(0, 1, n)))

    frames = []
    for k in range(params.n_frames):
        t = k / g.frame_rate
        phase = math.sin(2 * math.pi * params.stride_frequency * t)
        parts = [static]
        labels = [static_labels]
        for label, joint, length, scale, sign, ts in limbs:
            ang = sign * scale * params.limb_swing_amplitude * phase
            direction = math.sin(ang) * f - math.cos(ang) * up
            parts.append(joint + (ts * length)[:, None] * direction)
            labels.append(np.full(len(ts), label))
        frames.append(Frame(np.concatenate(parts), np.concatenate(labels).astype(np.uint8), k))
    return Sequence(identity_id=f"walker-{params.seed}", sequence_id=f"walker-{params.seed}-seq",
                    frames=tuple(frames), condition="synthetic")


def limb_point_fraction(seq: Sequence) -> float:
    labels = seq.all_labels()
    return float(np.isin(labels, [int(v) for v in LIMB_LABELS]).mean())
