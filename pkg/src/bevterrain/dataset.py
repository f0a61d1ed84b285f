"""Frame sequences on disk and in memory, plus the per-frame pipeline steps.

On-disk layout::

    ROOT/dataset.cfg           optional key=value settings (num_classes, grid geometry, ...)
    ROOT/calib.txt             camera intrinsics and T_cam_ego
    ROOT/poses.txt             one world-from-ego line per frame
    ROOT/lidar/NNNNNN.bin      float32 x, y, z, intensity
    ROOT/images/NNNNNN.semf    class probabilities (or NNNNNN.pgm class ids)
    ROOT/labels/NNNNNN.bevg    optional ground-truth label grids
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .features import FeatureGrid, lidar_features, multiscale_stack, semantic_features
from .geometry import CameraModel, PointCloud, RigidTransform
from .grid import DEFAULT_LEVELS, BevGrid, GridSpec
from .pseudo_label import PseudoLabelGrid, PseudoLabelParams, SemanticImage, generate, paint_points

log = logging.getLogger(__name__)

CONFIG_NAME = "dataset.cfg"


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    cloud: PointCloud
    image: SemanticImage
    pose: RigidTransform  # world-from-ego
    truth: np.ndarray | None = None  # (H, W) uint8 label grid, VOID where unknown


@dataclass(eq=False)
class SensorDataset:
    frames: list[Frame]
    camera: CameraModel
    spec: GridSpec = field(default_factory=GridSpec)
    num_classes: int = 5

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.index)
        self._by_index = {f.index: f for f in self.frames}

    def __len__(self):
        return len(self.frames)

    def frame(self, index: int) -> Frame:
        try:
            return self._by_index[index]
        except KeyError:
            raise KeyError(f"frame {index} is not in the dataset") from None

    def window(self, index: int, radius: int) -> list[Frame]:
        """Available frames within ``radius`` indices of ``index``, in index order."""
        return [f for f in self.frames if abs(f.index - index) <= radius]

    @property
    def indices(self) -> list[int]:
        return [f.index for f in self.frames]


def frame_features(ds: SensorDataset, frame: Frame, levels: Sequence[int] = DEFAULT_LEVELS) -> FeatureGrid:
    """Multi-scale fused features from a single sweep and its image."""
    painted = paint_points(frame.cloud, ds.camera, frame.image)
    return multiscale_stack(
        lidar_features(frame.cloud, ds.spec),
        semantic_features(painted, ds.spec, ds.num_classes),
        levels,
    )


def frame_pseudo_labels(ds: SensorDataset, index: int, params: PseudoLabelParams = PseudoLabelParams()) -> PseudoLabelGrid:
    frames = ds.window(index, params.window)
    key = [f.index for f in frames].index(index)
    return generate(
        [f.cloud for f in frames],
        [f.image for f in frames],
        ds.camera,
        [f.pose for f in frames],
        ds.spec,
        params,
        keyframe=key,
    )


# -- configuration ------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Plain key=value file; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    text = formats._read_text(path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise formats.FormatError(path, "expected key=value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise formats.FormatError(path, "empty key", line=lineno)
        out[key] = value
    return out


def write_config(path, values: dict) -> None:
    formats.atomic_write(path, "".join(f"{k}={v}\n" for k, v in values.items()).encode())


def spec_from_config(cfg: dict[str, str]) -> GridSpec:
    d = GridSpec()
    return GridSpec(
        float(cfg.get("resolution", d.resolution)),
        float(cfg.get("origin_x", d.origin_x)),
        float(cfg.get("origin_y", d.origin_y)),
        int(cfg.get("grid_width", d.width)),
        int(cfg.get("grid_height", d.height)),
    )


def spec_to_config(spec: GridSpec) -> dict:
    return {
        "resolution": repr(spec.resolution),
        "origin_x": repr(spec.origin_x),
        "origin_y": repr(spec.origin_y),
        "grid_width": spec.width,
        "grid_height": spec.height,
    }


# -- disk I/O -----------------------------------------------------------------


def frame_name(index: int) -> str:
    return f"{index:06d}"


def write_dataset(ds: SensorDataset, root, extra_config: dict | None = None) -> None:
    root = Path(root)
    cfg = {"num_classes": ds.num_classes, **spec_to_config(ds.spec), **(extra_config or {})}
    write_config(root / CONFIG_NAME, cfg)
    formats.write_calib(root / "calib.txt", ds.camera)
    n = max(ds.indices) + 1 if ds.frames else 0
    poses = [None] * n
    for f in ds.frames:
        poses[f.index] = f.pose
    if any(p is None for p in poses):
        raise ValueError("frame indices must be contiguous from 0 to write poses.txt")
    formats.write_poses(root / "poses.txt", poses)
    for f in ds.frames:
        name = frame_name(f.index)
        formats.write_pointcloud(root / "lidar" / f"{name}.bin", f.cloud)
        formats.write_semantic_image(root / "images" / f"{name}.semf", f.image)
        if f.truth is not None:
            formats.write_grid(root / "labels" / f"{name}.bevg", _label_grid(ds.spec, f.truth), formats.GridKind.LABELS)


def _label_grid(spec: GridSpec, labels: np.ndarray) -> BevGrid:
    return BevGrid(spec, labels.astype(np.float64)[None])


def load_dataset(root, config: dict[str, str] | None = None) -> SensorDataset:
    """Read a dataset directory; frames missing their lidar or image file are skipped."""
    root = Path(root)
    if not root.is_dir():
        raise formats.FormatError(root, "dataset directory does not exist")
    cfg = {}
    if (root / CONFIG_NAME).exists():
        cfg.update(read_config(root / CONFIG_NAME))
    cfg.update(config or {})
    try:
        num_classes = int(cfg.get("num_classes", 5))
        spec = spec_from_config(cfg)
    except ValueError as exc:
        raise formats.FormatError(root / CONFIG_NAME, f"bad setting: {exc}") from exc
    camera = formats.read_calib(root / "calib.txt")
    poses = formats.read_poses(root / "poses.txt")
    frames = []
    for index, pose in enumerate(poses):
        name = frame_name(index)
        lidar = root / "lidar" / f"{name}.bin"
        image = next((p for p in (root / "images" / f"{name}.semf", root / "images" / f"{name}.pgm") if p.exists()), None)
        if not lidar.exists() or image is None:
            missing = "lidar" if not lidar.exists() else "image"
            log.warning("frame %s: no %s file, skipping", name, missing)
            continue
        img = formats.read_semantic_image(image, num_classes)
        if (img.width, img.height) != (camera.width, camera.height):
            raise formats.FormatError(image, f"image is {img.width}x{img.height}, calibration says {camera.width}x{camera.height}")
        truth = None
        label_path = root / "labels" / f"{name}.bevg"
        if label_path.exists():
            tspec, truth = formats.read_label_map(label_path)
            if tspec.shape != spec.shape:
                raise formats.FormatError(label_path, f"label grid {tspec.shape} does not match grid {spec.shape}")
        frames.append(Frame(index, formats.read_pointcloud(lidar), img, pose.relabel(from_frame="ego"), truth))
    return SensorDataset(frames, camera, spec, num_classes)
