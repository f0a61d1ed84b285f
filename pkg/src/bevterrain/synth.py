"""Procedural off-road scenes with simulated LiDAR and semantic camera.

Terrain is a heightfield of smooth Gaussian bumps; classes form contiguous
patches (argmax of smooth random fields) with a trail corridor along the
driven path.  Both sensors intersect rays with the heightfield by fixed-step
ray marching, refined by linear interpolation between the last two samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraModel, PointCloud, RigidTransform, invert, project_points
from .dataset import Frame, SensorDataset
from .grid import GridSpec, cell_centers, world_to_cells
from .pseudo_label import VOID, SemanticImage

CLASS_NAMES = ("trail", "grass", "bush", "obstacle", "water")
# grass and bush reflect alike, so LiDAR intensity alone cannot separate them
CLASS_INTENSITY = (0.55, 0.30, 0.30, 0.80, 0.05)
LIDAR_MOUNT = (0.0, 0.0, 1.8)
MARCH_STEP = 0.05
MAX_HEIGHT = 2.0
TRAIL_HALF_WIDTH = 1.5
PATCH_SCALE = 6.5


def class_intensity(num_classes: int) -> np.ndarray:
    if num_classes <= len(CLASS_INTENSITY):
        return np.array(CLASS_INTENSITY[:num_classes])
    return np.linspace(0.05, 0.95, num_classes)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


@dataclass(frozen=True, eq=False)
class Scene:
    spec: GridSpec  # world-frame grid covering the whole drive
    heights: np.ndarray  # (H, W) meters, sampled at cell centers
    classes: np.ndarray  # (H, W) uint8
    poses: list  # world-from-ego RigidTransforms
    num_classes: int
    seed: int

    def height_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear height between cell-center samples; NaN outside the scene."""
        s = self.spec
        fc = (np.asarray(x) - s.origin_x) / s.resolution - 0.5
        fr = (np.asarray(y) - s.origin_y) / s.resolution - 0.5
        inside = (fc >= -0.5) & (fc < s.width - 0.5) & (fr >= -0.5) & (fr < s.height - 0.5)
        fc = np.clip(fc, 0.0, s.width - 1.0)
        fr = np.clip(fr, 0.0, s.height - 1.0)
        c0 = np.minimum(np.floor(fc).astype(np.int64), s.width - 2 if s.width > 1 else 0)
        r0 = np.minimum(np.floor(fr).astype(np.int64), s.height - 2 if s.height > 1 else 0)
        c1 = np.minimum(c0 + 1, s.width - 1)
        r1 = np.minimum(r0 + 1, s.height - 1)
        ac = fc - c0
        ar = fr - r0
        h = self.heights
        top = h[r0, c0] * (1 - ac) + h[r0, c1] * ac
        bot = h[r1, c0] * (1 - ac) + h[r1, c1] * ac
        return np.where(inside, top * (1 - ar) + bot * ar, np.nan)

    def class_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """True class of the cell containing each (x, y); -1 outside the scene."""
        xy = np.stack([np.ravel(x), np.ravel(y)], axis=1)
        row, col, inside = world_to_cells(self.spec, xy)
        out = np.full(len(xy), -1, dtype=np.int64)
        out[inside] = self.classes[row[inside], col[inside]]
        return out.reshape(np.shape(x))


def scene_spec_for(frames: int, step: float = 1.0, resolution: float = 0.2) -> GridSpec:
    """World grid large enough for ``frames`` poses ``step`` meters apart plus sensor range."""
    length = 20.0 + frames * step + 70.0
    width_m = 90.0
    cols = int(np.ceil(length / resolution))
    rows = int(np.ceil(width_m / resolution))
    return GridSpec(resolution, -20.0, -width_m / 2, cols, rows)


def _blob_field(xg, yg, rng, n, sigma_range, amp_range, extent):
    (x0, x1), (y0, y1) = extent
    field = np.zeros_like(xg)
    cx = rng.uniform(x0, x1, n)
    cy = rng.uniform(y0, y1, n)
    sig = rng.uniform(*sigma_range, n)
    amp = rng.uniform(*amp_range, n)
    for i in range(n):
        field += amp[i] * np.exp(-((xg - cx[i]) ** 2 + (yg - cy[i]) ** 2) / (2 * sig[i] ** 2))
    return field


def path_y(x: np.ndarray, seed: int) -> np.ndarray:
    rng = _stream(seed, 7)
    amp, period, phase = rng.uniform(1.0, 3.0), rng.uniform(40.0, 80.0), rng.uniform(0, 2 * np.pi)
    return amp * np.sin(2 * np.pi * np.asarray(x) / period + phase)


def gen_scene(
    spec: GridSpec,
    num_classes: int = 5,
    seed: int = 0,
    frames: int = 10,
    step: float = 1.0,
    patch_scale: float = PATCH_SCALE,
) -> Scene:
    """Random terrain, class patches and a gently curving drive of ``frames`` poses.

    ``patch_scale`` (meters) is the typical radius of the smooth fields that
    decide the class patches.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = _stream(seed, 0)
    xg, yg = cell_centers(spec)
    extent = (
        (spec.origin_x, spec.origin_x + spec.width * spec.resolution),
        (spec.origin_y, spec.origin_y + spec.height * spec.resolution),
    )
    area = (extent[0][1] - extent[0][0]) * (extent[1][1] - extent[1][0])
    n_bumps = max(4, int(area / 150.0))
    heights = _blob_field(xg, yg, rng, n_bumps, (4.0, 9.0), (0.2, 0.9), extent)
    heights = np.clip(heights, 0.0, MAX_HEIGHT)

    n_blobs = max(3, int(area / (25.0 * patch_scale**2)))
    fields = np.stack([
        _blob_field(xg, yg, rng, n_blobs, (0.6 * patch_scale, 1.4 * patch_scale), (0.5, 1.5), extent)
        for _ in range(num_classes)
    ])
    classes = np.argmax(fields, axis=0).astype(np.uint8)
    classes[np.abs(yg - path_y(xg, seed)) < TRAIL_HALF_WIDTH] = 0

    poses = []
    x = np.arange(frames) * step
    y = path_y(x, seed)
    dydx = (path_y(x + 1e-3, seed) - path_y(x - 1e-3, seed)) / 2e-3
    proto = Scene(spec, heights, classes, [], num_classes, seed)
    z = proto.height_at(x, y)
    for i in range(frames):
        poses.append(
            RigidTransform.from_yaw(
                float(np.arctan(dydx[i])), (x[i], y[i], z[i]), from_frame="ego", to_frame="world"
            )
        )
    return Scene(spec, heights, classes, poses, num_classes, seed)


def march_reference(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_range: float, step: float = MARCH_STEP) -> np.ndarray:
    """Vectorized (all rays in lock-step) version of :func:`march`; slow, used as its oracle."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    t_hit = np.full(n, np.nan)
    active = np.arange(n)
    o = np.broadcast_to(origins, dirs.shape)
    d = dirs
    prev = o[:, 2] - scene.height_at(o[:, 0], o[:, 1])
    # rays starting outside the scene or under the ground are misses
    ok = np.isfinite(prev) & (prev > 0)
    active, prev = active[ok], prev[ok]
    n_step = 0
    top = float(np.max(scene.heights))
    while active.size and n_step * step < max_range:
        n_step += 1
        t = n_step * step
        p = o[active] + t * d[active]
        diff = p[:, 2] - scene.height_at(p[:, 0], p[:, 1])
        hit = diff <= 0
        if hit.any():
            frac = prev[hit] / (prev[hit] - diff[hit])
            t_hit[active[hit]] = (n_step - 1) * step + step * frac
        # escaped: off the map, or above every bump while climbing
        gone = hit | ~np.isfinite(diff) | ((d[active, 2] >= 0) & (p[:, 2] > top))
        active, prev = active[~gone], diff[~gone]
    t_hit[t_hit > max_range] = np.nan
    return t_hit


@numba.njit(cache=True)
def _height(h, ox, oy, res, x, y):
    rows, cols = h.shape
    fc = (x - ox) / res - 0.5
    fr = (y - oy) / res - 0.5
    if not (fc >= -0.5 and fc < cols - 0.5 and fr >= -0.5 and fr < rows - 0.5):
        return np.nan
    fc = min(max(fc, 0.0), cols - 1.0)
    fr = min(max(fr, 0.0), rows - 1.0)
    c0 = min(int(np.floor(fc)), cols - 2 if cols > 1 else 0)
    r0 = min(int(np.floor(fr)), rows - 2 if rows > 1 else 0)
    c1 = min(c0 + 1, cols - 1)
    r1 = min(r0 + 1, rows - 1)
    ac = fc - c0
    ar = fr - r0
    top = h[r0, c0] * (1 - ac) + h[r0, c1] * ac
    bot = h[r1, c0] * (1 - ac) + h[r1, c1] * ac
    return top * (1 - ar) + bot * ar


BOUND_BLOCK = 8


def _block_max(h: np.ndarray, block: int) -> np.ndarray:
    """Max height over each block x block tile, widened by one sample so it bounds
    every bilinear patch whose lower-left corner lies in the tile."""
    rows, cols = h.shape
    R = -(-rows // block)
    C = -(-cols // block)
    pad = np.full((R * block + 1, C * block + 1), -np.inf)
    pad[:rows, :cols] = h
    pad[rows, :cols] = h[-1]
    pad[:rows, cols] = h[:, -1]
    pad[rows, cols] = h[-1, -1]
    core = pad[: R * block, : C * block].reshape(R, block, C, block).max(axis=(1, 3))
    right = pad[: R * block, block :: block][:, :C].reshape(R, block, C).max(axis=1)
    below = pad[block :: block, : C * block][:R].reshape(R, C, block).max(axis=2)
    corner = pad[block :: block, block :: block][:R, :C]
    return np.maximum(np.maximum(core, right), np.maximum(below, corner))


@numba.njit(cache=True)
def _march_kernel(h, bound, block, ox, oy, res, top, o, d, max_range, step, out):
    rows, cols = h.shape
    for i in range(d.shape[0]):
        out[i] = np.nan
        prev = o[i, 2] - _height(h, ox, oy, res, o[i, 0], o[i, 1])
        if not (prev > 0):
            continue
        n = 0
        stale = False
        while n * step < max_range:
            n += 1
            t = n * step
            px = o[i, 0] + t * d[i, 0]
            py = o[i, 1] + t * d[i, 1]
            pz = o[i, 2] + t * d[i, 2]
            fc = (px - ox) / res - 0.5
            fr = (py - oy) / res - 0.5
            if not (fc >= -0.5 and fc < cols - 0.5 and fr >= -0.5 and fr < rows - 0.5):
                break
            bc = min(int(np.floor(min(max(fc, 0.0), cols - 1.0))), cols - 2 if cols > 1 else 0) // block
            br = min(int(np.floor(min(max(fr, 0.0), rows - 1.0))), rows - 2 if rows > 1 else 0) // block
            b = bound[br, bc]
            if pz > b:
                # strictly above every height this sample could interpolate
                stale = True
                if d[i, 2] >= 0 and pz > top:
                    break
                # skip the following samples that provably stay in this tile and above its bound
                t_lim = max_range
                dcol = d[i, 0] / res
                drow = d[i, 1] / res
                if dcol > 0:
                    t_lim = min(t_lim, t + ((bc + 1) * block - fc) / dcol)
                elif dcol < 0:
                    t_lim = min(t_lim, t + (bc * block - fc) / dcol)
                if drow > 0:
                    t_lim = min(t_lim, t + ((br + 1) * block - fr) / drow)
                elif drow < 0:
                    t_lim = min(t_lim, t + (br * block - fr) / drow)
                if d[i, 2] < 0:
                    t_lim = min(t_lim, t + (pz - b) / -d[i, 2])
                k = int(np.floor((t_lim - t) / step)) - 1
                if k > 0:
                    n += k
                continue
            diff = pz - _height(h, ox, oy, res, px, py)
            if diff <= 0:
                if stale:
                    tp = (n - 1) * step
                    prev = (o[i, 2] + tp * d[i, 2]) - _height(h, ox, oy, res, o[i, 0] + tp * d[i, 0], o[i, 1] + tp * d[i, 1])
                th = (n - 1) * step + step * (prev / (prev - diff))
                if th <= max_range:
                    out[i] = th
                break
            if d[i, 2] >= 0 and pz > top:
                break
            prev = diff
            stale = False


def march(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_range: float, step: float = MARCH_STEP) -> np.ndarray:
    """Distance along each unit ray to the terrain surface; NaN for misses.

    Rays advance in fixed steps; the hit is placed by linear interpolation of
    the height gap between the last sample above and the first at or below
    the surface.  Rays stop early once they leave the map or climb above the
    highest terrain point.
    """
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64).reshape(-1, 3), dirs.shape))
    out = np.empty(len(dirs))
    s = scene.spec
    h = np.ascontiguousarray(scene.heights, dtype=np.float64)
    bound = _block_max(h, BOUND_BLOCK)
    _march_kernel(h, bound, BOUND_BLOCK, s.origin_x, s.origin_y, s.resolution, float(h.max()), o, dirs, max_range, step, out)
    return out


def lidar_directions(rings: int = 32, beams: int = 512, elev_range=(-28.0, 3.0)) -> np.ndarray:
    """Unit ray directions in the ego frame, ring-major."""
    elev = np.deg2rad(np.linspace(elev_range[0], elev_range[1], rings))
    azim = np.arange(beams) * (2 * np.pi / beams)
    e, a = np.meshgrid(elev, azim, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class LidarHits:
    """Noise-free returns of one sweep in the ego frame, with the true class of each."""

    points: np.ndarray
    classes: np.ndarray
    ranges: np.ndarray
    dirs: np.ndarray


def cast_lidar(scene: Scene, pose: RigidTransform, rings: int = 32, beams: int = 512, max_range: float = 60.0) -> LidarHits:
    mount = np.array(LIDAR_MOUNT)
    dirs = lidar_directions(rings, beams)
    origin_w = pose.apply(mount)
    dirs_w = dirs @ pose.rotation.T
    t = march(scene, origin_w, dirs_w, max_range)
    hit = np.isfinite(t)
    pts_w = origin_w + t[hit, None] * dirs_w[hit]
    cls = scene.class_at(pts_w[:, 0], pts_w[:, 1])
    return LidarHits(mount + t[hit, None] * dirs[hit], cls, t[hit], dirs[hit])


def simulate_lidar(
    scene: Scene,
    pose: RigidTransform,
    rings: int = 32,
    beams: int = 512,
    max_range: float = 60.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    frame: str = "ego",
) -> PointCloud:
    """One sweep in the ego frame, with Gaussian range noise and class-dependent intensity."""
    hits = cast_lidar(scene, pose, rings, beams, max_range)
    return hits_to_cloud(hits, scene.num_classes, noise_sigma, _stream(scene.seed, 1, seed), frame)


def hits_to_cloud(hits: LidarHits, num_classes: int, noise_sigma: float, rng: np.random.Generator, frame: str = "ego") -> PointCloud:
    ranges = hits.ranges
    if noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, noise_sigma, len(ranges))
    pts = np.array(LIDAR_MOUNT) + ranges[:, None] * hits.dirs
    return PointCloud(pts, class_intensity(num_classes)[hits.classes], frame)


def default_camera(width: int = 640, height: int = 320, pitch_deg: float = 12.0) -> CameraModel:
    """Forward camera 1.6 m above the ego origin, pitched down, 90 degree horizontal FOV."""
    # camera x right, y down, z forward expressed in ego axes before pitching
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    th = np.deg2rad(pitch_deg)
    pitch = np.array([[np.cos(th), 0.0, np.sin(th)], [0.0, 1.0, 0.0], [-np.sin(th), 0.0, np.cos(th)]])
    ego_from_cam = RigidTransform(pitch @ base, (0.2, 0.0, 1.6), "camera", "ego")
    f = width / 2.0
    return CameraModel(f, f, width / 2.0, height / 2.0, width, height, invert(ego_from_cam))


def render_classes(scene: Scene, pose: RigidTransform, cam: CameraModel, max_range: float = 60.0) -> np.ndarray:
    """(height, width) true class seen along each pixel's ray; -1 where the ray misses."""
    uu, vv = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    ego_from_cam = invert(cam.cam_from_ego)
    origin_w = pose.apply(ego_from_cam.translation)
    d_w = d_cam @ (pose.rotation @ ego_from_cam.rotation).T
    t = march(scene, origin_w, d_w, max_range)
    hit = np.isfinite(t)
    cls = np.full(len(t), -1, dtype=np.int64)
    pts = origin_w + t[hit, None] * d_w[hit]
    cls[hit] = scene.class_at(pts[:, 0], pts[:, 1])
    return cls.reshape(cam.height, cam.width)


def semantic_from_classes(classes: np.ndarray, num_classes: int, label_noise: float, rng: np.random.Generator | None) -> SemanticImage:
    """One-hot planes from a class image; each hit pixel is relabeled with probability
    ``label_noise`` to a uniformly chosen other class.  Misses (-1) become uniform."""
    K = num_classes
    cls = classes.ravel()
    hit = cls >= 0
    if label_noise > 0:
        flip = rng.random(len(cls)) < label_noise
        shift = rng.integers(1, K, len(cls))
        cls = np.where(hit & flip, (cls + shift) % K, cls)
    probs = np.full((len(cls), K), 1.0 / K)
    probs[hit] = 0.0
    probs[np.flatnonzero(hit), cls[hit]] = 1.0
    return SemanticImage(probs.T.reshape((K,) + classes.shape))


def render_semantic(
    scene: Scene,
    pose: RigidTransform,
    cam: CameraModel,
    label_noise: float = 0.0,
    seed: int = 0,
    max_range: float = 60.0,
) -> SemanticImage:
    """Per-pixel one-hot of the true class seen along each pixel's ray.

    With probability ``label_noise`` a pixel is relabeled to a uniformly chosen
    other class.  Pixels whose ray misses the terrain get a uniform distribution.
    """
    classes = render_classes(scene, pose, cam, max_range)
    return semantic_from_classes(classes, scene.num_classes, label_noise, _stream(scene.seed, 2, seed))


def corrupt(pc: PointCloud, rate: float, seed: int = 0) -> PointCloud:
    """Drop each point independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    keep = _stream(seed, 3).random(len(pc)) >= rate
    return pc.subset(keep)


def truth_grid(scene: Scene, pose: RigidTransform, spec: GridSpec) -> np.ndarray:
    """True class of every BEV cell (cell centers mapped through the ego pose)."""
    xg, yg = cell_centers(spec)
    local = np.stack([xg.ravel(), yg.ravel(), np.zeros(xg.size)], axis=1)
    w = pose.apply(local)
    cls = scene.class_at(w[:, 0], w[:, 1]).reshape(spec.shape)
    return np.where(cls >= 0, cls, VOID).astype(np.uint8)


def visible_mask(points: np.ndarray, cam: CameraModel, spec: GridSpec) -> np.ndarray:
    """Cells holding at least one ego-frame point that also falls inside the camera image."""
    proj = project_points(cam, PointCloud(cam.cam_from_ego.apply(points), None, "camera"))
    row, col, inside = world_to_cells(spec, points[proj.index, :2])
    mask = np.zeros(spec.shape, dtype=bool)
    mask[row[inside], col[inside]] = True
    return mask


@dataclass(frozen=True, eq=False)
class CleanSim:
    """Noise-free sensor data of a whole drive; degrade it with :func:`degrade`."""

    scene: Scene
    camera: CameraModel
    spec: GridSpec
    hits: list  # LidarHits per frame
    class_images: list  # (height, width) class ids per frame, -1 for misses
    truth: list  # (H, W) label grids, VOID outside the visible footprint


def simulate_clean(
    seed: int = 0,
    frames: int = 10,
    num_classes: int = 5,
    spec: GridSpec | None = None,
    camera: CameraModel | None = None,
    step: float = 1.0,
    rings: int = 32,
    beams: int = 512,
) -> CleanSim:
    """Generate a scene and ray-cast every frame's sweep and image.

    Truth grids mark the true class of every BEV cell that holds a noise-free
    return of the keyframe sweep visible to the camera; other cells are void.
    """
    spec = GridSpec() if spec is None else spec
    camera = default_camera() if camera is None else camera
    scene = gen_scene(scene_spec_for(frames, step), num_classes, seed, frames, step)
    hits, images, truth = [], [], []
    for pose in scene.poses:
        h = cast_lidar(scene, pose, rings, beams)
        t = truth_grid(scene, pose, spec)
        t[~visible_mask(h.points, camera, spec)] = VOID
        hits.append(h)
        images.append(render_classes(scene, pose, camera))
        truth.append(t)
    return CleanSim(scene, camera, spec, hits, images, truth)


def degrade(sim: CleanSim, noise_sigma: float = 0.0, label_noise: float = 0.0, dropout: float = 0.0, noise_seed: int = 0) -> SensorDataset:
    """Apply range noise, point dropout and label noise; seeded per frame."""
    K = sim.scene.num_classes
    base = sim.scene.seed
    out = []
    for i, pose in enumerate(sim.scene.poses):
        cloud = hits_to_cloud(sim.hits[i], K, noise_sigma, _stream(base, 1, noise_seed, i))
        if dropout > 0:
            keep = _stream(base, 3, noise_seed, i).random(len(cloud)) >= dropout
            cloud = cloud.subset(keep)
        image = semantic_from_classes(sim.class_images[i], K, label_noise, _stream(base, 2, noise_seed, i))
        out.append(Frame(i, cloud, image, pose, sim.truth[i].copy()))
    return SensorDataset(out, sim.camera, sim.spec, K)


def make_dataset(
    seed: int = 0,
    frames: int = 10,
    noise_sigma: float = 0.0,
    label_noise: float = 0.0,
    dropout: float = 0.0,
    num_classes: int = 5,
    spec: GridSpec | None = None,
    camera: CameraModel | None = None,
    step: float = 1.0,
) -> tuple[SensorDataset, Scene]:
    """Simulate a drive and package it as a degraded dataset with truth label grids."""
    sim = simulate_clean(seed, frames, num_classes, spec, camera, step)
    return degrade(sim, noise_sigma, label_noise, dropout, noise_seed=seed), sim.scene
