"""Limb-emphasis metrics and the reference-sphere (z_r, R) sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pointcloud import LIMB_LABELS, BodyLabel, Sequence, SequenceStats, compute_stats
from .projection import (
    Mode,
    ProjectionConfig,
    ProjectionError,
    SphereDomainError,
    normalized_depth,
    rasterize_sequence,
    sphere_steps,
)


class AnalyticsError(ValueError):
    pass


_LIMBS = np.array([int(v) for v in LIMB_LABELS], dtype=np.uint8)

# named (z step, radius step) presets relative to (c, r)
PRESETS = {
    "limb-optimum": (1, -1),    # slightly above centre height, slightly below average radius
    "convnet": (0, 0),          # z_r = c
    "transformer": (1, 0),      # z_r = c + l
}


def limb_pixel_fraction(stack) -> float:
    """Fraction of valid pixels whose winning point is an arm or leg."""
    valid = limb = labelled = 0
    for im in stack:
        valid += int(im.valid.sum())
        labelled += int((im.valid & (im.label != BodyLabel.UNLABELED)).sum())
        limb += int((im.valid & np.isin(im.label, _LIMBS)).sum())
    if valid == 0:
        raise AnalyticsError("no valid pixels in stack")
    if labelled == 0:
        raise AnalyticsError("limb_pixel_fraction needs body-labelled points (synthetic walker input)")
    return limb / valid


def dynamic_score(stack) -> float:
    """Mean per-pixel temporal variance of sequence-normalized depth.

    Only pixels valid in at least two frames contribute; frames where a pixel
    is invalid are left out of that pixel's variance.
    """
    stack = list(stack)
    if len(stack) < 2:
        raise AnalyticsError(f"dynamic_score needs at least 2 frames, got {len(stack)}")
    if len({im.shape for im in stack}) != 1:
        raise AnalyticsError("all frames must share one image geometry")
    a = np.stack(normalized_depth(stack))          # (T, H, W), NaN where invalid
    mask = ~np.isnan(a)
    n = mask.sum(axis=0)
    keep = n >= 2
    if not keep.any():
        return 0.0
    # shift by each pixel's first valid value so identical samples give exactly zero variance
    first = np.take_along_axis(a, mask.argmax(axis=0)[None], axis=0)[0]
    dev = np.where(mask, a - first, 0.0)
    mean = dev.sum(axis=0) / np.maximum(n, 1)
    var = np.where(mask, (dev - mean) ** 2, 0.0).sum(axis=0) / np.maximum(n, 1)
    return float(var[keep].mean())


@dataclass(frozen=True)
class SweepConfig:
    z_steps: tuple[int, ...] = (-2, -1, 0, 1, 2)
    r_steps: tuple[int, ...] = (-2, -1, 0, 1, 2)
    l: float | None = None     # None: 0.1 * (z_max - z_min)
    d: float | None = None     # None: 0.1 * r
    base: ProjectionConfig = field(default_factory=ProjectionConfig)

    def __post_init__(self):
        object.__setattr__(self, "z_steps", tuple(int(k) for k in self.z_steps))
        object.__setattr__(self, "r_steps", tuple(int(k) for k in self.r_steps))
        if not self.z_steps or not self.r_steps:
            raise AnalyticsError("z_steps and r_steps must be nonempty")

    def steps(self, stats: SequenceStats) -> tuple[float, float]:
        l0, d0 = sphere_steps(stats)
        return (l0 if self.l is None else self.l), (d0 if self.d is None else self.d)

    def to_dict(self) -> dict:
        return {"z_steps": list(self.z_steps), "r_steps": list(self.r_steps),
                "l": self.l, "d": self.d, "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        if "base" in d:
            d["base"] = ProjectionConfig.from_dict(d["base"])
        return cls(**d)


@dataclass(frozen=True)
class SweepRecord:
    mode: str
    z_r: float | None
    R: float | None
    limb_fraction: float | None
    dynamic_score: float | None
    valid_pixels: int
    dropped: int
    z_step: int | None = None
    r_step: int | None = None
    invalid_reason: str | None = None

    @property
    def valid(self) -> bool:
        return self.invalid_reason is None


@dataclass(frozen=True)
class SweepReport:
    cells: tuple[SweepRecord, ...]
    planar: SweepRecord
    stats: SequenceStats
    l: float
    d: float

    def valid_cells(self) -> list[SweepRecord]:
        return [c for c in self.cells if c.valid]

    def best(self) -> SweepRecord:
        cells = self.valid_cells()
        if not cells:
            raise AnalyticsError("no valid cells")
        # ties go to the first cell in (z, R) order
        return max(cells, key=lambda c: (c.limb_fraction, -self.cells.index(c)))


def evaluate(seq: Sequence, cfg: ProjectionConfig, stats: SequenceStats) -> SweepRecord:
    """Project ``seq`` under one resolved config and score the stack."""
    stack = rasterize_sequence(seq, cfg, stats)
    valid = sum(int(im.valid.sum()) for im in stack)
    dropped = sum(im.dropped_points for im in stack)
    dyn = dynamic_score(stack) if len(stack) >= 2 else 0.0
    spherical = cfg.mode is Mode.SPHERICAL
    return SweepRecord(mode=cfg.mode.value,
                       z_r=cfg.z_r if spherical else None,
                       R=cfg.R if spherical else None,
                       limb_fraction=limb_pixel_fraction(stack),
                       dynamic_score=dyn, valid_pixels=valid, dropped=dropped)


def sphere_config(stats: SequenceStats, base: ProjectionConfig, z_step: int, r_step: int,
                  l: float, d: float) -> ProjectionConfig:
    return replace(base, mode=Mode.SPHERICAL, z_r=stats.c + z_step * l, R=stats.r + r_step * d,
                   z_step=z_step, r_step=r_step)


def run_sweep(seq: Sequence, cfg: SweepConfig = SweepConfig()) -> SweepReport:
    stats = compute_stats(seq)
    l, d = cfg.steps(stats)
    cells = []
    for kz in cfg.z_steps:
        for kr in cfg.r_steps:
            z_r, R = stats.c + kz * l, stats.r + kr * d
            if not R > 0:
                cells.append(SweepRecord("Spherical", z_r, R, None, None, 0, 0, kz, kr,
                                         f"nonpositive radius R={R:.6g}"))
                continue
            try:
                rec = evaluate(seq, sphere_config(stats, cfg.base, kz, kr, l, d), stats)
            except (ProjectionError, AnalyticsError) as e:
                rec = SweepRecord("Spherical", z_r, R, None, None, 0, 0, kz, kr, str(e))
            else:
                rec = replace(rec, z_step=kz, r_step=kr)
            cells.append(rec)
    if not any(c.valid for c in cells):
        raise AnalyticsError("every sweep cell is invalid: " + "; ".join(
            sorted({c.invalid_reason for c in cells})))
    planar = evaluate(seq, replace(cfg.base, mode=Mode.PLANAR), stats)
    return SweepReport(tuple(cells), planar, stats, l, d)


CSV_HEADER = ["mode", "z_r", "R", "limb_fraction", "dynamic_score", "valid_pixels", "dropped"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def report_csv(report: SweepReport) -> str:
    """CSV text: one row per (z_r, R) cell in z-then-R order, planar baseline last.

    Invalid cells keep their row with empty metric fields.
    """
    rows = sorted(report.cells, key=lambda c: (c.z_r, c.R))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in rows + [report.planar]:
        w.writerow([c.mode, _fmt(c.z_r), _fmt(c.R), _fmt(c.limb_fraction), _fmt(c.dynamic_score),
                    c.valid_pixels if c.valid else "", c.dropped if c.valid else ""])
    return buf.getvalue()


def emit_report(report: SweepReport, path: str | Path) -> Path:
    path = Path(path)
    if not report.cells:
        raise AnalyticsError("empty report")
    with open(path, "w", newline="") as fh:
        fh.write(report_csv(report))
    return path
