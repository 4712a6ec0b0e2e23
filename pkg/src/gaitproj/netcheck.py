"""Toy-batch forward pass over projected PNG stacks, with invariant checks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net
from .projection import read_png_stack


@dataclass
class Sample:
    identity: str
    tensor: np.ndarray   # (T, 3, H, W) in [0, 1]
    source: str


def stack_tensor(images, channels: int = 3) -> np.ndarray:
    """Gray channel scaled to [0, 1], replicated to ``channels``."""
    g = np.stack([im.gray for im in images]).astype(np.float64) / 255.0
    return np.repeat(g[:, None], channels, axis=1)


def find_stacks(root: str | Path) -> list[tuple[str, Path]]:
    """(identity, directory) for every PNG stack under a projection output dir."""
    root = Path(root)
    summary = root / "summary.json"
    ident = None
    if summary.is_file():
        ident = json.loads(summary.read_text()).get("identity_id")
    dirs = sorted({p.parent for p in root.rglob("*.png")})
    return [(ident or d.name, d) for d in dirs]


def build_batch(stacks, clips: int = 2, channels: int = 3) -> list[Sample]:
    """Split each stack into ``clips`` contiguous clips.

    With a single identity, horizontally mirrored clips are added as a
    second pseudo-identity so the triplet loss has negatives.
    """
    samples = []
    for ident, d in stacks:
        x = stack_tensor(read_png_stack(d), channels)
        n = max(1, min(clips, x.shape[0]))
        for i, part in enumerate(np.array_split(np.arange(x.shape[0]), n)):
            samples.append(Sample(ident, x[part], f"{d.name}[{part[0]}:{part[-1] + 1}]"))
    if len({s.identity for s in samples}) < 2:
        samples += [Sample(s.identity + "~mirror", s.tensor[..., ::-1].copy(), s.source + ":mirror")
                    for s in list(samples)]
    return samples


def _check(name, passed, detail=""):
    return {"name": name, "passed": bool(passed), "detail": detail}


def run_checks(samples: list[Sample], params: net.NetParams) -> dict:
    cfg = params.config
    identities = sorted({s.identity for s in samples})
    if len(identities) > cfg.num_classes:
        raise ValueError(f"{len(identities)} identities exceed num_classes={cfg.num_classes}")
    labels = np.array([identities.index(s.identity) for s in samples])
    checks = []

    # shape table
    x0 = samples[0].tensor
    stages = net.backbone_forward(x0, params, return_stages=True)
    expected = cfg.stage_shapes(x0.shape[0])
    table = [{"stage": i + 1, "shape": list(s.shape), "expected": list(e)}
             for i, (s, e) in enumerate(zip(stages, expected))]
    checks.append(_check("stage_shapes", all(tuple(s.shape) == e for s, e in zip(stages, expected)),
                         "; ".join(f"stage{r['stage']}={tuple(r['shape'])}" for r in table)))
    checks.append(_check("finite_features", all(np.all(np.isfinite(s)) for s in stages)))

    # zero dynamics: a time-constant input gives an exactly-zero centred map in every block
    ok = True
    for i, (tr, blk) in enumerate(zip(params.transitions, params.blocks)):
        h = net.relu(net.conv2d(stages[i][:1], tr))
        const = np.repeat(h, 3, axis=0)
        paths = net.dynamic_paths(const, blk)
        centered_path = paths["conv_c"] if blk.dynamic_parse == "raw" else paths["conv_a"]
        bias = (blk.conv_c if blk.dynamic_parse == "raw" else blk.conv_a).bias
        ok &= bool(np.all(paths["centered"] == 0.0))
        ok &= bool(np.array_equal(centered_path, np.broadcast_to(bias[None, :, None, None], centered_path.shape)))
    checks.append(_check("zero_dynamics", ok))

    # frame permutation with identity temporal convs
    ident = params.with_identity_temporal()
    perm = np.random.default_rng(0).permutation(x0.shape[0])
    a = net.backbone_forward(x0, ident)
    b = net.backbone_forward(x0[perm], ident)
    checks.append(_check("frame_permutation_equivariance", np.array_equal(a[perm], b)))
    checks.append(_check("temporal_pool_permutation_invariance",
                         np.array_equal(net.temporal_pool(a), net.temporal_pool(b))))

    es = net.embed_batch([s.tensor for s in samples], labels, params, identities)
    tri = net.triplet_loss(es.embeddings, es.labels, cfg.margin)
    ce = net.strip_cross_entropy(es.logits, es.labels)
    ce_shift = net.strip_cross_entropy(es.logits + 3.25, es.labels)
    checks.append(_check("triplet_nonnegative", tri >= 0.0, repr(tri)))
    checks.append(_check("cross_entropy_nonnegative", ce >= 0.0, repr(ce)))
    checks.append(_check("cross_entropy_shift_invariance",
                         abs(ce_shift - ce) <= 1e-12 * max(1.0, abs(ce)), repr(ce_shift - ce)))

    return {
        "config": cfg.to_dict(),
        "batch": [{"identity": s.identity, "label": int(lab), "frames": int(s.tensor.shape[0]), "source": s.source}
                  for s, lab in zip(samples, labels)],
        "shape_table": table,
        "checks": checks,
        "losses": {"triplet": tri, "cross_entropy": ce},
        "passed": all(c["passed"] for c in checks),
    }
