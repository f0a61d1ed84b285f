"""Image-guided pseudo ground truth in BEV.

LiDAR points are painted with per-pixel class distributions, aggregated over a
window of sweeps into per-cell class evidence, smoothed with a Dirichlet prior,
and turned into labels, normalized-entropy uncertainties and training weights.
Unobserved cells near observed ones can then be filled in (densified).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import (
    CameraModel,
    PointCloud,
    RigidTransform,
    compose,
    invert,
    pixel_index,
    project_points,
    transform_points,
)
from .grid import GridSpec, world_to_cells

VOID = 255
PROB_TOL = 1e-4


@dataclass(frozen=True)
class PseudoLabelParams:
    alpha0: float = 0.5
    z_ceiling: float = 2.5
    window: int = 4
    densify_radius: float = 1.0
    densify_lambda: float = 1.0


@dataclass(frozen=True, eq=False)
class SemanticImage:
    """Per-pixel class distributions, shaped (K, height, width)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] < 2:
            raise ValueError(f"expected (K>=2, H, W) probability planes, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("probabilities must be finite and within [0, 1]")
        if p.size and np.max(np.abs(p.sum(axis=0) - 1.0)) > PROB_TOL:
            raise ValueError("per-pixel probabilities do not sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "SemanticImage":
        """Promote a hard-label image to one-hot planes."""
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"label {int(labels.max())} out of range for {num_classes} classes")
        return cls(np.eye(num_classes)[labels].transpose(2, 0, 1))


@dataclass(frozen=True, eq=False)
class PaintedCloud:
    cloud: PointCloud
    probs: np.ndarray  # (N, K); zero rows where invalid
    valid: np.ndarray  # (N,) bool

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class PseudoLabelGrid:
    spec: GridSpec
    evidence: np.ndarray  # (K, H, W)
    posterior: np.ndarray  # (K, H, W)
    label: np.ndarray  # (H, W) uint8, VOID where unlabeled
    uncertainty: np.ndarray  # (H, W)
    weight: np.ndarray  # (H, W)
    observed: np.ndarray  # (H, W) bool

    @property
    def num_classes(self) -> int:
        return self.evidence.shape[0]

    @classmethod
    def from_labels(cls, spec: GridSpec, labels: np.ndarray, num_classes: int) -> "PseudoLabelGrid":
        """Wrap a hard label map (e.g. ground truth) as full-weight targets."""
        labels = np.asarray(labels).astype(np.uint8)
        known = labels != VOID
        onehot = np.zeros((num_classes,) + labels.shape)
        r, c = np.nonzero(known)
        onehot[labels[known], r, c] = 1.0
        post = np.where(known, onehot, 1.0 / num_classes)
        return cls(
            spec,
            onehot,
            post,
            labels,
            np.where(known, 0.0, 1.0),
            known.astype(np.float64),
            known,
        )


def paint_points(pc: PointCloud, cam: CameraModel, img: SemanticImage) -> PaintedCloud:
    """Attach the nearest pixel's class distribution to every point in the camera frustum."""
    if (img.width, img.height) != (cam.width, cam.height):
        raise ValueError(
            f"semantic image is {img.width}x{img.height} but camera is {cam.width}x{cam.height}"
        )
    # The camera is rigidly mounted, so its extrinsic applies to whichever ego frame the sweep uses.
    cam_from_sweep = cam.cam_from_ego.relabel(from_frame=pc.frame)
    proj = project_points(cam, transform_points(cam_from_sweep, pc))
    K = img.num_classes
    probs = np.zeros((len(pc), K))
    valid = np.zeros(len(pc), dtype=bool)
    if len(proj):
        cols = pixel_index(proj.u, cam.width)
        rows = pixel_index(proj.v, cam.height)
        probs[proj.index] = img.probs[:, rows, cols].T
        valid[proj.index] = True
    return PaintedCloud(pc, probs, valid)


def accumulate_evidence(
    painted: Sequence[PaintedCloud],
    poses: Sequence[RigidTransform],
    spec: GridSpec,
    num_classes: int,
    z_ceiling: float = 2.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Sum painted class distributions per BEV cell in the keyframe ego frame.

    ``poses[i]`` maps the ego frame of ``painted[i]`` into the keyframe ego frame.
    Returns ``(evidence (K, H, W), observed (H, W))``.
    """
    if len(painted) != len(poses):
        raise ValueError(f"{len(painted)} painted clouds but {len(poses)} poses")
    K = num_classes
    ncell = spec.height * spec.width
    evidence = np.zeros(K * ncell)
    for pcl, pose in zip(painted, poses):
        if pcl.num_classes != K:
            raise ValueError(f"painted cloud has {pcl.num_classes} classes, expected {K}")
        pts = transform_points(pose, pcl.cloud).points
        row, col, inside = world_to_cells(spec, pts[:, :2])
        keep = pcl.valid & inside & (pts[:, 2] <= z_ceiling)
        if not keep.any():
            continue
        cell = row[keep] * spec.width + col[keep]
        # one bincount per class keeps the reduction order fixed (point order)
        for k in range(K):
            evidence[k * ncell : (k + 1) * ncell] += np.bincount(
                cell, weights=pcl.probs[keep, k], minlength=ncell
            )
    evidence = evidence.reshape(K, spec.height, spec.width)
    return evidence, evidence.sum(axis=0) > 0


def posterior(evidence: np.ndarray, alpha0: float, observed: np.ndarray | None = None) -> np.ndarray:
    """Dirichlet-smoothed class posterior; uniform where nothing was observed."""
    if alpha0 < 0:
        raise ValueError(f"alpha0 must be non-negative, got {alpha0}")
    evidence = np.asarray(evidence, dtype=np.float64)
    K = evidence.shape[0]
    total = evidence.sum(axis=0)
    if observed is None:
        observed = total > 0
    denom = total + K * alpha0
    safe = np.where(observed & (denom > 0), denom, 1.0)
    post = (evidence + alpha0) / safe
    return np.where(observed, post, 1.0 / K)


def cell_uncertainty(post: np.ndarray) -> np.ndarray:
    """Shannon entropy of each cell's distribution divided by ln K."""
    post = np.asarray(post, dtype=np.float64)
    K = post.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(post > 0, post * np.log(np.where(post > 0, post, 1.0)), 0.0)
    h = -plogp.sum(axis=0) / math.log(K)
    return np.clip(h, 0.0, 1.0)


def argmax_label(post: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(post, axis=0).astype(np.uint8)


def _sorted_offsets(max_r: int, max_c: int, radius_cells: float) -> np.ndarray:
    dr, dc = np.meshgrid(np.arange(-max_r, max_r + 1), np.arange(-max_c, max_c + 1), indexing="ij")
    dr, dc = dr.ravel(), dc.ravel()
    d2 = dr * dr + dc * dc
    keep = (d2 > 0) & (d2 <= radius_cells * radius_cells * (1 + 1e-12))
    dr, dc, d2 = dr[keep], dc[keep], d2[keep]
    # distance first, then the source cell with the lowest (row, col)
    order = np.lexsort((dc, dr, d2))
    return np.stack([dr[order], dc[order], d2[order]], axis=1)


def densify(grid: PseudoLabelGrid, radius: float, lam: float = 1.0) -> PseudoLabelGrid:
    """Fill unobserved cells from their nearest observed cell within ``radius`` meters.

    Filled cells copy the source's posterior, label and uncertainty; their weight
    is the source weight times exp(-d / lam).  Distance ties go to the source
    with the lowest (row, col).  Observed cells are never modified.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    H, W = grid.spec.shape
    observed = grid.observed
    if radius == 0 or not observed.any() or observed.all():
        return grid
    if lam <= 0:
        raise ValueError(f"decay length must be positive, got {lam}")
    res = grid.spec.resolution
    rc = radius / res
    offsets = _sorted_offsets(min(int(np.floor(rc)), H - 1), min(int(np.floor(rc)), W - 1), rc)

    src_r = np.full((H, W), -1, dtype=np.int64)
    src_c = np.full((H, W), -1, dtype=np.int64)
    dist2 = np.zeros((H, W), dtype=np.int64)
    todo = ~observed
    for dr, dc, d2 in offsets:
        # target (r, c) reads source (r + dr, c + dc)
        t_r0, t_r1 = max(0, -dr), min(H, H - dr)
        t_c0, t_c1 = max(0, -dc), min(W, W - dc)
        if t_r0 >= t_r1 or t_c0 >= t_c1:
            continue
        tgt = todo[t_r0:t_r1, t_c0:t_c1]
        hit = tgt & observed[t_r0 + dr : t_r1 + dr, t_c0 + dc : t_c1 + dc]
        if not hit.any():
            continue
        rr, cc = np.nonzero(hit)
        rr += t_r0
        cc += t_c0
        src_r[rr, cc] = rr + dr
        src_c[rr, cc] = cc + dc
        dist2[rr, cc] = d2
        todo[rr, cc] = False
        if not todo.any():
            break

    filled = src_r >= 0
    tr, tc = np.nonzero(filled)
    sr, sc = src_r[filled], src_c[filled]
    post = grid.posterior.copy()
    label = grid.label.copy()
    unc = grid.uncertainty.copy()
    weight = grid.weight.copy()
    post[:, tr, tc] = grid.posterior[:, sr, sc]
    label[tr, tc] = grid.label[sr, sc]
    unc[tr, tc] = grid.uncertainty[sr, sc]
    d = np.sqrt(dist2[filled].astype(np.float64)) * res
    weight[tr, tc] = grid.weight[sr, sc] * np.exp(-d / lam)
    return replace(grid, posterior=post, label=label, uncertainty=unc, weight=weight)


def label_grid(spec: GridSpec, evidence: np.ndarray, observed: np.ndarray, alpha0: float) -> PseudoLabelGrid:
    """Posterior, label, uncertainty and weight from accumulated evidence (no densification)."""
    post = posterior(evidence, alpha0, observed)
    unc = cell_uncertainty(post)
    label = np.where(observed, argmax_label(post), VOID).astype(np.uint8)
    unc = np.where(observed, unc, 1.0)
    weight = np.where(observed, 1.0 - unc, 0.0)
    return PseudoLabelGrid(spec, evidence, post, label, unc, weight, observed)


def generate(
    sweeps: Sequence[PointCloud],
    images: Sequence[SemanticImage],
    cams: Sequence[CameraModel] | CameraModel,
    poses: Sequence[RigidTransform],
    spec: GridSpec,
    params: PseudoLabelParams = PseudoLabelParams(),
    keyframe: int = 0,
) -> PseudoLabelGrid:
    """Full pseudo-label pipeline for one keyframe.

    ``poses`` are world-from-ego transforms, one per sweep; the output grid lives
    in the ego frame of ``sweeps[keyframe]``.
    """
    n = len(sweeps)
    if isinstance(cams, CameraModel):
        cams = [cams] * n
    if not (len(images) == len(cams) == len(poses) == n):
        raise ValueError(
            f"inconsistent inputs: {n} sweeps, {len(images)} images, {len(cams)} cameras, {len(poses)} poses"
        )
    if not 0 <= keyframe < n:
        raise IndexError(f"keyframe {keyframe} outside {n} sweeps")
    K = images[keyframe].num_classes
    key_from_world = invert(poses[keyframe].relabel(from_frame="keyframe", to_frame="world"))
    painted, rel = [], []
    for pc, img, cam, pose in zip(sweeps, images, cams, poses):
        painted.append(paint_points(pc, cam, img))
        rel.append(compose(key_from_world, pose.relabel(from_frame=pc.frame, to_frame="world")))
    evidence, observed = accumulate_evidence(painted, rel, spec, K, params.z_ceiling)
    grid = label_grid(spec, evidence, observed, params.alpha0)
    return densify(grid, params.densify_radius, params.densify_lambda)
