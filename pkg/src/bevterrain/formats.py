"""File formats: point clouds, poses, calibration, semantic images, grids, models, PPM renders.

All binary formats are little-endian.  Every reader raises :class:`FormatError`
(carrying the path and a byte offset or line number) on malformed input.
Writers replace their target atomically.

Grid file layout ("BEVG", version 1)::

    magic "BEVG" | u32 version | f32 resolution | f32 origin_x | f32 origin_y
    | u32 width | u32 height | u32 channels | u8 kind | channels x (height x width) f32

Planes are row-major with rows along y and columns along x.
"""

from __future__ import annotations

import enum
import logging
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import CameraModel, PointCloud, RigidTransform
from .grid import BevGrid, GridSpec
from .model import ModelParams
from .pseudo_label import VOID, PseudoLabelGrid, SemanticImage

log = logging.getLogger(__name__)

ORTHO_REPAIR_TOL = 1e-3
ROUNDOFF_DRIFT = 1e-12

GRID_MAGIC = b"BEVG"
GRID_VERSION = 1
GRID_HEADER = struct.Struct("<4sIfffIIIB")
MODEL_MAGIC = b"BEVM"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sIIII")
SEMF_MAGIC = b"SEMF"
SEMF_HEADER = struct.Struct("<4sIII")

# class colors for trail, grass, bush, obstacle, water; void is black
PALETTE = (
    (170, 120, 60),
    (90, 190, 70),
    (30, 110, 40),
    (200, 40, 40),
    (40, 90, 220),
)
VOID_COLOR = (0, 0, 0)


class FormatError(ValueError):
    """Malformed or unreadable input file."""

    def __init__(self, path, message: str, offset: int | None = None, line: int | None = None):
        self.path = str(path)
        self.offset = offset
        self.line = line
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte {offset})"
        super().__init__(f"{self.path}{where}: {message}")


class GridKind(enum.IntEnum):
    VALUES = 1
    PSEUDO_LABEL = 2
    PREDICTION = 3  # channels: label, confidence, K class probabilities
    LABELS = 4  # single label channel, VOID where unknown


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc.strerror or exc}") from exc


def _read_text(path) -> str:
    data = _read_bytes(path)
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, "file is not valid UTF-8 text", offset=exc.start) from exc


# -- point clouds -----------------------------------------------------------


def read_pointcloud(path, frame: str = "ego") -> PointCloud:
    """float32 (x, y, z, intensity) records; non-finite points are dropped."""
    data = _read_bytes(path)
    if len(data) % 16:
        raise FormatError(path, f"size {len(data)} bytes is not a multiple of 16", offset=len(data))
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    finite = np.all(np.isfinite(arr[:, :3]), axis=1)
    dropped = int(len(arr) - finite.sum())
    if dropped:
        log.warning("%s: dropped %d points with non-finite coordinates", path, dropped)
    arr = arr[finite].astype(np.float64)
    inten = np.nan_to_num(arr[:, 3], nan=0.0)
    return PointCloud(arr[:, :3], np.clip(inten, 0.0, 1.0), frame)


def write_pointcloud(path, pc: PointCloud) -> None:
    arr = np.empty((len(pc), 4), dtype="<f4")
    arr[:, :3] = pc.points
    arr[:, 3] = pc.intensity
    atomic_write(path, arr.tobytes())


# -- poses and calibration --------------------------------------------------


def _rotation_from(values, path, line=None) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(values, dtype=np.float64).reshape(3, 4)
    if not np.all(np.isfinite(m)):
        raise FormatError(path, "non-finite transform entry", line=line)
    R = m[:, :3]
    drift = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if drift > ORTHO_REPAIR_TOL or np.linalg.det(R) <= 0:
        raise FormatError(path, f"rotation is not orthonormal (drift {drift:.3g})", line=line)
    if drift <= ROUNDOFF_DRIFT:
        # already orthonormal; projecting again would perturb the last bits
        return R.copy(), m[:, 3]
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt, m[:, 3]


def _format_transform(t: RigidTransform) -> str:
    m = np.hstack([t.rotation, t.translation[:, None]])
    return " ".join(repr(float(v)) for v in m.ravel())


def read_poses(path, frame_prefix: str = "ego") -> list[RigidTransform]:
    """One world-from-ego transform per line: 12 reals, row-major 3x4."""
    poses = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FormatError(path, f"expected 12 values, found {len(tokens)}", line=lineno)
        try:
            values = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise FormatError(path, f"bad number: {exc}", line=lineno) from exc
        R, t = _rotation_from(values, path, lineno)
        poses.append(RigidTransform(R, t, frame_prefix, "world"))
    return poses


def write_poses(path, poses) -> None:
    atomic_write(path, "".join(_format_transform(p) + "\n" for p in poses).encode())


CALIB_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "T_cam_ego")


def read_calib(path) -> CameraModel:
    """key=value lines (``#`` comments allowed); a repeated key keeps its last value."""
    fields: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, "expected key=value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in fields:
            log.warning("%s:%d: duplicate key %r, using the last value", path, lineno, key)
        fields[key] = (value, lineno)
    for key in CALIB_KEYS:
        if key not in fields:
            raise FormatError(path, f"missing key {key!r}")

    def num(key, cast=float):
        value, lineno = fields[key]
        try:
            out = cast(value)
        except ValueError as exc:
            raise FormatError(path, f"bad value for {key!r}: {value!r}", line=lineno) from exc
        if cast is int:
            if not 0 < out < 2**31:
                raise FormatError(path, f"value for {key!r} out of range: {out}", line=lineno)
        elif not np.isfinite(out):
            raise FormatError(path, f"non-finite value for {key!r}", line=lineno)
        return out

    fx, fy, cx, cy = num("fx"), num("fy"), num("cx"), num("cy")
    width, height = num("width", int), num("height", int)
    if fx <= 0 or fy <= 0:
        raise FormatError(path, f"focal lengths must be positive (fx={fx}, fy={fy})")
    value, lineno = fields["T_cam_ego"]
    tokens = value.replace(",", " ").split()
    if len(tokens) != 12:
        raise FormatError(path, f"T_cam_ego needs 12 values, found {len(tokens)}", line=lineno)
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise FormatError(path, f"bad number in T_cam_ego: {exc}", line=lineno) from exc
    R, t = _rotation_from(values, path, lineno)
    return CameraModel(fx, fy, cx, cy, width, height, RigidTransform(R, t, "ego", "camera"))


def write_calib(path, cam: CameraModel) -> None:
    lines = [
        f"fx={cam.fx!r}",
        f"fy={cam.fy!r}",
        f"cx={cam.cx!r}",
        f"cy={cam.cy!r}",
        f"width={cam.width}",
        f"height={cam.height}",
        f"T_cam_ego={_format_transform(cam.cam_from_ego)}",
    ]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# -- semantic images --------------------------------------------------------

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm_header(data: bytes, path, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise FormatError(path, f"not a {magic.decode()} file", offset=0)
    pos = len(magic)
    values = []
    for _ in range(3):
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise FormatError(path, "truncated header", offset=pos)
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise FormatError(path, f"bad header field {m.group(1)[:16]!r}", offset=m.start(1)) from None
        pos = m.end()
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError(path, "missing whitespace after header", offset=pos)
    w, h, maxval = values
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(path, f"unsupported header {w}x{h} maxval {maxval}")
    return w, h, maxval, pos + 1


def read_pgm_labels(path) -> np.ndarray:
    data = _read_bytes(path)
    w, h, _, start = _parse_pnm_header(data, path, b"P5")
    expected = w * h
    actual = len(data) - start
    if actual < expected:
        raise FormatError(path, f"pixel data truncated: expected {expected} bytes, got {actual}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=start).reshape(h, w)


def read_semantic_image(path, num_classes: int | None = None) -> SemanticImage:
    """Either a P5 PGM of class ids (needs ``num_classes``) or a SEMF probability file."""
    data = _read_bytes(path)
    if data.startswith(b"P5"):
        if num_classes is None:
            raise FormatError(path, "class count is required to read a label PGM")
        labels = read_pgm_labels(path)
        if labels.size and int(labels.max()) >= num_classes:
            raise FormatError(path, f"label {int(labels.max())} out of range for {num_classes} classes")
        return SemanticImage.from_labels(labels, num_classes)
    if len(data) < SEMF_HEADER.size:
        raise FormatError(path, f"file too short ({len(data)} bytes)", offset=len(data))
    magic, K, W, H = SEMF_HEADER.unpack_from(data)
    if magic != SEMF_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if K < 2 or W < 1 or H < 1:
        raise FormatError(path, f"bad dimensions K={K} {W}x{H}", offset=4)
    if num_classes is not None and K != num_classes:
        raise FormatError(path, f"file has {K} classes, expected {num_classes}", offset=4)
    expected = 4 * K * W * H
    actual = len(data) - SEMF_HEADER.size
    if actual != expected:
        raise FormatError(
            path, f"plane data size mismatch: expected {expected} bytes, got {actual}", offset=SEMF_HEADER.size
        )
    planes = np.frombuffer(data, dtype="<f4", offset=SEMF_HEADER.size).reshape(K, H, W)
    try:
        return SemanticImage(planes.astype(np.float64))
    except ValueError as exc:
        raise FormatError(path, str(exc), offset=SEMF_HEADER.size) from exc


def write_semantic_image(path, img: SemanticImage) -> None:
    header = SEMF_HEADER.pack(SEMF_MAGIC, img.num_classes, img.width, img.height)
    atomic_write(path, header + img.probs.astype("<f4").tobytes())


def write_pgm_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + labels.tobytes())


# -- grids --------------------------------------------------------------------


def pseudo_label_channels(grid: PseudoLabelGrid) -> np.ndarray:
    return np.concatenate([
        grid.evidence,
        grid.posterior,
        grid.label[None].astype(np.float64),
        grid.uncertainty[None],
        grid.weight[None],
        grid.observed[None].astype(np.float64),
    ])


def write_grid(path, grid, kind: GridKind | None = None) -> None:
    """Write a BevGrid (kind VALUES unless given) or a PseudoLabelGrid (kind PSEUDO_LABEL)."""
    if isinstance(grid, PseudoLabelGrid):
        spec, values, kind = grid.spec, pseudo_label_channels(grid), GridKind.PSEUDO_LABEL
    else:
        spec, values = grid.spec, grid.values
        kind = GridKind.VALUES if kind is None else GridKind(kind)
    C = values.shape[0]
    header = GRID_HEADER.pack(
        GRID_MAGIC, GRID_VERSION, spec.resolution, spec.origin_x, spec.origin_y, spec.width, spec.height, C, int(kind)
    )
    atomic_write(path, header + np.asarray(values, dtype="<f4").tobytes())


def read_grid_raw(path) -> tuple[GridKind, BevGrid]:
    data = _read_bytes(path)
    if len(data) < GRID_HEADER.size:
        raise FormatError(path, f"file too short for a grid header ({len(data)} bytes)", offset=len(data))
    magic, version, res, ox, oy, W, H, C, kind = GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != GRID_VERSION:
        raise FormatError(path, f"unsupported grid version {version}", offset=4)
    try:
        kind = GridKind(kind)
    except ValueError:
        raise FormatError(path, f"unknown grid kind {kind}", offset=GRID_HEADER.size - 1) from None
    if not (np.isfinite(res) and res > 0 and np.isfinite(ox) and np.isfinite(oy)):
        raise FormatError(path, "invalid grid geometry", offset=8)
    if W < 1 or H < 1 or C < 1:
        raise FormatError(path, f"invalid grid size {W}x{H}x{C}", offset=20)
    expected = 4 * C * H * W
    actual = len(data) - GRID_HEADER.size
    if actual != expected:
        raise FormatError(
            path, f"plane data size mismatch: expected {expected} bytes, got {actual}", offset=GRID_HEADER.size
        )
    values = np.frombuffer(data, dtype="<f4", offset=GRID_HEADER.size).reshape(C, H, W)
    spec = GridSpec(float(res), float(ox), float(oy), int(W), int(H))
    with np.errstate(invalid="ignore"):  # signaling NaNs in the payload
        values = values.astype(np.float64)
    return kind, BevGrid(spec, values)


def _decode_pseudo_label(path, grid: BevGrid) -> PseudoLabelGrid:
    C = grid.channels
    if C < 8 or (C - 4) % 2:
        raise FormatError(path, f"pseudo-label grid cannot have {C} channels")
    K = (C - 4) // 2
    v = grid.values
    label = v[2 * K]
    valid_label = (label == VOID) | ((label >= 0) & (label < K) & (label == np.round(label)))
    if not valid_label.all():
        raise FormatError(path, "label channel holds values that are not class ids")
    if not np.all(np.isfinite(v)):
        raise FormatError(path, "pseudo-label grid contains non-finite values")
    return PseudoLabelGrid(
        grid.spec,
        v[:K],
        v[K : 2 * K],
        label.astype(np.uint8),
        v[2 * K + 1],
        v[2 * K + 2],
        v[2 * K + 3] != 0,
    )


def read_grid(path):
    """Return a PseudoLabelGrid for pseudo-label files, otherwise a BevGrid."""
    kind, grid = read_grid_raw(path)
    if kind == GridKind.PSEUDO_LABEL:
        return _decode_pseudo_label(path, grid)
    return grid


def read_label_map(path) -> tuple[GridSpec, np.ndarray]:
    """Label channel of any label-bearing grid file as uint8 (VOID = 255)."""
    kind, grid = read_grid_raw(path)
    if kind == GridKind.PSEUDO_LABEL:
        return grid.spec, _decode_pseudo_label(path, grid).label
    if kind in (GridKind.PREDICTION, GridKind.LABELS):
        lab = grid.values[0]
        if not np.all((lab == np.round(lab)) & (lab >= 0) & (lab <= VOID)):
            raise FormatError(path, "label channel holds values that are not class ids")
        return grid.spec, lab.astype(np.uint8)
    raise FormatError(path, f"grid of kind {kind.name} has no label channel")


# -- model checkpoints ------------------------------------------------------


def write_model(path, params: ModelParams) -> None:
    header = MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, params.input_dim, params.num_classes, params.hidden)
    body = b"".join(
        np.asarray(a, dtype="<f8").tobytes()
        for a in (params.feature_mean, params.feature_std, params.W1, params.b1, params.W2, params.b2)
    )
    atomic_write(path, header + body)


def read_model(path) -> ModelParams:
    data = _read_bytes(path)
    if len(data) < MODEL_HEADER.size:
        raise FormatError(path, f"file too short for a model header ({len(data)} bytes)", offset=len(data))
    magic, version, D, K, hidden = MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != MODEL_VERSION:
        raise FormatError(path, f"unsupported model version {version}", offset=4)
    if D < 1 or K < 1 or hidden < 1:
        raise FormatError(path, f"invalid dimensions D={D} K={K} hidden={hidden}", offset=8)
    shapes = [(D,), (D,), (hidden, D), (hidden,), (K, hidden), (K,)]
    expected = 8 * sum(int(np.prod(s)) for s in shapes)
    actual = len(data) - MODEL_HEADER.size
    if actual != expected:
        raise FormatError(
            path, f"parameter data size mismatch: expected {expected} bytes, got {actual}", offset=MODEL_HEADER.size
        )
    arrays, pos = [], MODEL_HEADER.size
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    mean, std, W1, b1, W2, b2 = arrays
    if np.any(~np.isfinite(std)) or np.any(std < 1e-6):
        raise FormatError(path, "feature_std must be finite and at least 1e-6", offset=MODEL_HEADER.size + 8 * D)
    try:
        return ModelParams(W1, b1, W2, b2, mean, std)
    except ValueError as exc:
        raise FormatError(path, str(exc), offset=MODEL_HEADER.size) from exc


# -- renders ------------------------------------------------------------------


def palette(num_colors: int) -> np.ndarray:
    """Class colors: the fixed table first, then evenly spaced hues."""
    colors = list(PALETTE[:num_colors])
    extra = num_colors - len(colors)
    for i in range(extra):
        hue = i / max(extra, 1)
        r, g, b = (np.cos(2 * np.pi * (hue + off)) * 0.5 + 0.5 for off in (0.0, 1 / 3, 2 / 3))
        colors.append((int(40 + 200 * r), int(40 + 200 * g), int(40 + 200 * b)))
    return np.array(colors, dtype=np.uint8)


def ppm_bytes(values: np.ndarray, mode: str = "label", num_classes: int | None = None) -> bytes:
    """P6 image of a (H, W) grid; image row i is grid row i.

    ``mode="label"`` colors class ids (VOID black); ``mode="gray"`` maps [0, 1] to 0..255.
    """
    values = np.asarray(values)
    h, w = values.shape
    if mode == "label":
        lab = values.astype(np.int64)
        K = num_classes if num_classes is not None else int(lab[lab != VOID].max(initial=-1)) + 1
        colors = palette(max(K, 1))
        rgb = np.empty((h, w, 3), dtype=np.uint8)
        rgb[:] = VOID_COLOR
        known = (lab != VOID) & (lab >= 0) & (lab < len(colors))
        rgb[known] = colors[lab[known]]
    elif mode == "gray":
        g = np.round(np.clip(np.nan_to_num(values.astype(np.float64)), 0.0, 1.0) * 255).astype(np.uint8)
        rgb = np.repeat(g[:, :, None], 3, axis=2)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def render_ppm(path, values: np.ndarray, mode: str = "label", num_classes: int | None = None) -> None:
    atomic_write(path, ppm_bytes(values, mode, num_classes))


def read_ppm(path) -> np.ndarray:
    data = _read_bytes(path)
    w, h, _, start = _parse_pnm_header(data, path, b"P6")
    if len(data) - start < 3 * w * h:
        raise FormatError(path, "pixel data truncated", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=start).reshape(h, w, 3)
