"""
Scene loading and writing in the transforms-JSON layout, image I/O and
analytic synthetic scenes.

A scene directory holds `transforms_train.json` and optionally
`transforms_test.json`:

    {
      "camera_angle_x": 0.69,
      "frames": [{"file_path": "./train/r_000", "transform_matrix": [[...4x4...]]}, ...]
    }

Poses are camera-to-world. On load, the look-at target sphere is mapped to a
sphere of radius 0.25 centered at (0.5, 0.5, 0.5) so content lies in [0, 1]^3.
Optional keys: `scale`/`offset` (explicit normalization), `scene_radius`,
`near`/`far` (normalized units), `w`/`h` (checked against the images) and
`synthetic` (analytic shape description in world units).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import imageio.v2 as imageio
import numpy as np

from config import make_rng
from errors import SceneParseError, SceneValidationError
from lie_se3 import CameraPose
from renderer import Camera, all_pixels, generate_rays


logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
BOX_HALF_DIAGONAL = math.sqrt(3.0) / 4.0
TARGET_RADIUS = 0.25

SHAPES = ("sphere", "cube", "two-spheres")
ALBEDOS = ("constant", "hemisphere", "checker")
LIGHT_DIRECTION = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
AMBIENT = 0.3
DIFFUSE = 0.7


@dataclass
class Scene:
    """
    Posed images in normalized scene coordinates.

    Attributes:
        cameras (List[Camera]): Cameras with ground-truth poses.
        images (List[np.ndarray]): RGB images in [0, 1].
        split (List[str]): "train" or "test" per view.
        names (List[str]): Frame file paths as written in the JSON.
        near, far (float): Depth bounds.
        scale (float): World-to-normalized scale.
        offset (np.ndarray): World-to-normalized offset (x_n = scale * x_w + offset).
        background (np.ndarray): Background colour.
        depths (List[np.ndarray], optional): Ground-truth depth maps (normalized units).
        metadata (dict): Extra scene information, e.g. the analytic shape.
        source_dir (str): Directory the scene was loaded from.
    """

    cameras: List[Camera]
    images: List[np.ndarray]
    split: List[str]
    names: List[str]
    near: float
    far: float
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    depths: Optional[List[Optional[np.ndarray]]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    source_dir: str = ""

    def indices(self, split: str) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    @property
    def train_indices(self) -> List[int]:
        return self.indices("train")

    @property
    def test_indices(self) -> List[int]:
        return self.indices("test")

    def poses(self, indices: Optional[List[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked (R, t) of the requested cameras."""
        indices = range(len(self.cameras)) if indices is None else indices
        R = np.stack([self.cameras[i].pose.R for i in indices])
        t = np.stack([self.cameras[i].pose.t for i in indices])
        return R, t

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.offset) / self.scale

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.offset


# ---------------------------------------------------------------------------
# Images


def read_image(path: Union[str, Path], background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Read an 8-bit image as float RGB in [0, 1], compositing alpha over `background`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image file not found: {path}")
    data = np.asarray(imageio.imread(path))
    image = data.astype(np.float64) / 255.0
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.shape[2] == 4:
        rgb, a = image[:, :, :3], image[:, :, 3:4]
        image = rgb * a + np.asarray(background, dtype=np.float64) * (1.0 - a)
    return image[:, :, :3]


def write_image(path: Union[str, Path], image: np.ndarray):
    """Write an RGB image in [0, 1] as an 8-bit PNG (values clamped first)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    imageio.imwrite(path, data)


def write_depth(path: Union[str, Path], depth: np.ndarray):
    """Write a depth map as a normalized 8-bit PNG plus a raw float `.npy` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    finite = np.isfinite(depth)
    if np.any(finite):
        low, high = float(np.min(depth[finite])), float(np.max(depth[finite]))
    else:
        low, high = 0.0, 1.0
    span = high - low if high > low else 1.0
    normalized = np.where(finite, (depth - low) / span, 1.0)
    data = (np.clip(normalized, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    imageio.imwrite(path, data)
    np.save(path.with_suffix(".npy"), depth)


# ---------------------------------------------------------------------------
# Loading


def _resolve_image(scene_dir: Path, file_path: str) -> Path:
    candidate = scene_dir / file_path
    if candidate.suffix.lower() in IMAGE_EXTENSIONS:
        if candidate.exists():
            return candidate
        raise FileNotFoundError(f"Image file not found: {candidate}")
    for ext in IMAGE_EXTENSIONS:
        with_ext = candidate.with_name(candidate.name + ext)
        if with_ext.exists():
            return with_ext
    raise FileNotFoundError(f"Image file not found for frame path '{file_path}' in {scene_dir}")


def _parse_matrix(value, where: str) -> np.ndarray:
    try:
        matrix = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SceneParseError(f"{where}: transform_matrix is not numeric") from e
    if matrix.shape != (4, 4):
        rows = len(value) if isinstance(value, list) else "?"
        cols = len(value[0]) if isinstance(value, list) and value and isinstance(value[0], list) else "?"
        raise SceneParseError(f"{where}: transform_matrix must be 4x4, got {rows}x{cols}")
    if not np.all(np.isfinite(matrix)):
        raise SceneParseError(f"{where}: transform_matrix has non-finite entries")
    return matrix


def _read_transforms(path: Path) -> Dict[str, Any]:
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneParseError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(meta, dict):
        raise SceneParseError(f"{path}: top level must be an object")
    if "camera_angle_x" not in meta:
        raise SceneParseError(f"{path}: missing field 'camera_angle_x'")
    try:
        angle = float(meta["camera_angle_x"])
    except (TypeError, ValueError) as e:
        raise SceneParseError(f"{path}: field 'camera_angle_x' must be a number") from e
    if not 0.0 < angle < math.pi:
        raise SceneParseError(f"{path}: field 'camera_angle_x' must be in (0, pi), got {angle}")
    frames = meta.get("frames")
    if not isinstance(frames, list) or not frames:
        raise SceneParseError(f"{path}: field 'frames' must be a non-empty list")
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict):
            raise SceneParseError(f"{path}: frame {i} must be an object")
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise SceneParseError(f"{path}: frame {i} is missing field '{key}'")
    return meta


def look_at_target(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Point closest (least squares) to every camera's optical axis."""
    axes = -R[:, :, 2]
    projector = np.eye(3)[None] - axes[:, :, None] * axes[:, None, :]
    A = projector.sum(axis=0)
    b = np.einsum("nij,nj->i", projector, t)
    if np.linalg.cond(A) > 1e8:
        return t.mean(axis=0)
    return np.linalg.solve(A, b)


def normalization(R: np.ndarray, t: np.ndarray, camera_angle_x: float, scene_radius: Optional[float]) -> Tuple[float, np.ndarray]:
    """
    Scale and offset mapping the look-at target sphere to radius 0.25 around the box center.

    Without an explicit radius the sphere is the largest one centered at the
    target that every camera sees entirely: min distance * tan(fov / 2).
    """
    target = look_at_target(R, t)
    if scene_radius is None:
        distance = float(np.min(np.linalg.norm(t - target, axis=1)))
        scene_radius = distance * math.tan(camera_angle_x / 2.0)
    if scene_radius <= 0:
        raise SceneValidationError(f"Scene radius must be positive, got {scene_radius}")
    scale = TARGET_RADIUS / scene_radius
    offset = np.full(3, 0.5) - scale * target
    return scale, offset


def default_bounds(t_normalized: np.ndarray) -> Tuple[float, float]:
    """near/far enclosing the content box [0.25, 0.75]^3 from every camera."""
    distances = np.linalg.norm(t_normalized - 0.5, axis=1)
    near = max(0.02, float(np.min(distances)) - BOX_HALF_DIAGONAL)
    far = float(np.max(distances)) + BOX_HALF_DIAGONAL
    return near, far


def load_scene(scene_dir: Union[str, Path], background=(1.0, 1.0, 1.0)) -> Scene:
    """
    Load a transforms-JSON scene directory.

    Returns:
        Scene: Cameras and images in normalized coordinates.

    Raises:
        FileNotFoundError: If the directory, the train transforms or an image is missing.
        SceneParseError: On malformed JSON content; the message names the file and frame.
        SceneValidationError: If an image disagrees with the declared size.
    """
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise FileNotFoundError(f"Scene directory not found: {scene_dir}")
    train_path = scene_dir / "transforms_train.json"
    if not train_path.exists():
        raise FileNotFoundError(f"Missing {train_path}")

    metas = {}
    for split in SPLITS:
        path = scene_dir / f"transforms_{split}.json"
        if path.exists():
            metas[split] = (path, _read_transforms(path))
    if "test" not in metas:
        logger.warning(f"Scene {scene_dir} has no test split")

    background = np.asarray(background, dtype=np.float64)
    matrices, images, focals, splits, names, depths = [], [], [], [], [], []
    angle = None
    for split, (path, meta) in metas.items():
        split_angle = float(meta["camera_angle_x"])
        angle = split_angle if angle is None else angle
        for i, frame in enumerate(meta["frames"]):
            where = f"{path.name}: frame {i} ('{frame['file_path']}')"
            matrices.append(_parse_matrix(frame["transform_matrix"], where))
            image = read_image(_resolve_image(scene_dir, str(frame["file_path"])), background)
            height, width = image.shape[:2]
            if "w" in meta and int(meta["w"]) != width or "h" in meta and int(meta["h"]) != height:
                raise SceneValidationError(
                    f"{where}: image is {width}x{height} but the intrinsics declare {meta.get('w')}x{meta.get('h')}"
                )
            images.append(image)
            focals.append(0.5 * width / math.tan(0.5 * split_angle))
            splits.append(split)
            names.append(str(frame["file_path"]))
            depth_path = frame.get("depth_path")
            depths.append(np.load(scene_dir / depth_path) if depth_path else None)

    train_meta = metas["train"][1]
    matrices = np.stack(matrices)
    R, t_world = matrices[:, :3, :3], matrices[:, :3, 3]
    if "scale" in train_meta and "offset" in train_meta:
        scale = float(train_meta["scale"])
        offset = np.array(train_meta["offset"], dtype=np.float64)
    else:
        radius = train_meta.get("scene_radius")
        scale, offset = normalization(R, t_world, angle, None if radius is None else float(radius))
    t = scale * t_world + offset

    near, far = default_bounds(t)
    near = float(train_meta.get("near", near))
    far = float(train_meta.get("far", far))
    if not near < far:
        raise SceneValidationError(f"{train_path}: near ({near}) must be smaller than far ({far})")

    cameras = []
    for i, image in enumerate(images):
        height, width = image.shape[:2]
        cameras.append(Camera(focal=focals[i], width=width, height=height, pose=CameraPose(R=R[i].copy(), t=t[i].copy())))

    metadata = {"camera_angle_x": angle}
    if "synthetic" in train_meta:
        metadata["synthetic"] = normalize_shape(train_meta["synthetic"], scale, offset)
    has_depth = any(d is not None for d in depths)
    scene = Scene(
        cameras=cameras,
        images=images,
        split=splits,
        names=names,
        near=near,
        far=far,
        scale=scale,
        offset=offset,
        background=background,
        depths=[None if d is None else d * scale for d in depths] if has_depth else None,
        metadata=metadata,
        source_dir=str(scene_dir),
    )
    logger.debug(
        f"Loaded scene {scene_dir}: {len(scene.train_indices)} train / {len(scene.test_indices)} test views, "
        f"scale {scale:.6g}, near {near:.4f}, far {far:.4f}"
    )
    return scene


def write_scene(scene: Scene, out_dir: Union[str, Path]):
    """
    Write a scene in the transforms-JSON layout with explicit normalization,
    so that load_scene reproduces its normalized poses.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    angle = scene.metadata.get("camera_angle_x")
    for split in SPLITS:
        indices = scene.indices(split)
        if not indices:
            continue
        frames = []
        for i in indices:
            camera = scene.cameras[i]
            name = scene.names[i] if i < len(scene.names) else f"./{split}/r_{i:03d}"
            matrix = np.eye(4)
            matrix[:3, :3] = camera.pose.R
            matrix[:3, 3] = (camera.pose.t - scene.offset) / scene.scale
            frame = {"file_path": name, "transform_matrix": matrix.tolist()}
            write_image(out_dir / (name + ".png" if Path(name).suffix == "" else name), scene.images[i])
            if scene.depths is not None and scene.depths[i] is not None:
                depth_name = f"{name}_depth.npy".lstrip("./")
                np.save(out_dir / depth_name, scene.depths[i] / scene.scale)
                frame["depth_path"] = depth_name
            frames.append(frame)
        first = scene.cameras[indices[0]]
        camera_angle_x = angle if angle is not None else 2.0 * math.atan(0.5 * first.width / first.focal)
        meta = {
            "camera_angle_x": camera_angle_x,
            "scale": scene.scale,
            "offset": scene.offset.tolist(),
            "near": scene.near,
            "far": scene.far,
            "frames": frames,
        }
        if "synthetic_world" in scene.metadata:
            meta["synthetic"] = scene.metadata["synthetic_world"]
        path = out_dir / f"transforms_{split}.json"
        path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.debug(f"Wrote scene to {out_dir}")


# ---------------------------------------------------------------------------
# Analytic shapes


@dataclass
class SyntheticSpec:
    """
    Parameters of an analytic oracle scene.

    Attributes:
        shape (str): "sphere", "cube" or "two-spheres".
        albedo (str): "constant", "hemisphere" or "checker".
        n_views (int): Training views.
        n_test (int): Test views, interleaved on the same ring.
        size (int): Square image size in pixels.
        ring_radius (float): Camera distance from the origin (world units).
        radius (float): Shape size (sphere radius, world units).
        elevation (tuple): Camera elevation range in degrees.
        camera_angle_x (float): Horizontal field of view in radians.
        seed (int): Seed of the elevation jitter.
    """

    shape: str = "sphere"
    albedo: str = "checker"
    n_views: int = 20
    n_test: int = 4
    size: int = 64
    ring_radius: float = 4.0
    radius: float = 1.0
    elevation: Tuple[float, float] = (15.0, 45.0)
    camera_angle_x: float = 0.6911112070083618
    seed: int = 0

    def validate(self):
        if self.shape not in SHAPES:
            raise SceneValidationError(f"Unknown synthetic shape '{self.shape}'; expected one of {SHAPES}")
        if self.albedo not in ALBEDOS:
            raise SceneValidationError(f"Unknown albedo '{self.albedo}'; expected one of {ALBEDOS}")
        if self.n_views < 2:
            raise SceneValidationError(f"Synthetic scenes need at least 2 views, got {self.n_views}")
        if self.n_test < 0:
            raise SceneValidationError(f"n_test must be >= 0, got {self.n_test}")
        if self.size < 16:
            raise SceneValidationError(f"Synthetic image size must be at least 16, got {self.size}")
        if self.radius <= 0 or self.ring_radius <= 2.0 * self.radius:
            raise SceneValidationError("Synthetic ring radius must exceed twice the shape radius")


def shape_description(spec: SyntheticSpec) -> Dict[str, Any]:
    """World-unit description of the analytic shape (JSON-serializable)."""
    r = spec.radius
    if spec.shape == "sphere":
        geometry = {"spheres": [[0.0, 0.0, 0.0, r]]}
        bound = r
    elif spec.shape == "two-spheres":
        geometry = {"spheres": [[-0.45 * r, 0.0, 0.0, 0.55 * r], [0.45 * r, 0.0, 0.0, 0.55 * r]]}
        bound = r
    else:
        half = r / math.sqrt(3.0)
        geometry = {"box": [0.0, 0.0, 0.0, half]}
        bound = r
    return {"shape": spec.shape, "albedo": spec.albedo, "bound": bound, "size_ref": r, **geometry}


def normalize_shape(description: Dict[str, Any], scale: float, offset: np.ndarray) -> Dict[str, Any]:
    """Map a world-unit shape description into normalized coordinates."""
    out = dict(description)
    offset = np.asarray(offset, dtype=np.float64)
    if "spheres" in description:
        out["spheres"] = [
            list(np.asarray(s[:3]) * scale + offset) + [s[3] * scale] for s in description["spheres"]
        ]
    if "box" in description:
        b = description["box"]
        out["box"] = list(np.asarray(b[:3]) * scale + offset) + [b[3] * scale]
    out["bound"] = description["bound"] * scale
    out["size_ref"] = description["size_ref"] * scale
    out["center"] = list(offset)
    return out


def analytic_sdf(description: Dict[str, Any], points: np.ndarray) -> np.ndarray:
    """Signed distance of points to the described shape."""
    points = np.asarray(points, dtype=np.float64)
    if "spheres" in description:
        spheres = np.asarray(description["spheres"], dtype=np.float64)
        distances = np.linalg.norm(points[:, None, :] - spheres[None, :, :3], axis=2) - spheres[None, :, 3]
        return distances.min(axis=1)
    box = np.asarray(description["box"], dtype=np.float64)
    q = np.abs(points - box[:3]) - box[3]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def intersect_shape(description: Dict[str, Any], origins: np.ndarray, directions: np.ndarray):
    """
    Exact first intersection of rays with the shape.

    Returns:
        tuple: (t (N,), normals (N, 3)); t is inf for misses.
    """
    n = len(origins)
    best_t = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    if "spheres" in description:
        for cx, cy, cz, r in description["spheres"]:
            center = np.array([cx, cy, cz])
            oc = origins - center
            b = np.sum(oc * directions, axis=1)
            c = np.sum(oc * oc, axis=1) - r * r
            disc = b * b - c
            hit = disc >= 0
            root = np.sqrt(np.where(hit, disc, 0.0))
            t0 = -b - root
            t1 = -b + root
            t = np.where(t0 > 1e-9, t0, t1)
            hit &= t > 1e-9
            closer = hit & (t < best_t)
            best_t = np.where(closer, t, best_t)
            points = origins + t[:, None] * directions
            normals = np.where(closer[:, None], (points - center) / r, normals)
    else:
        cx, cy, cz, half = description["box"]
        center = np.array([cx, cy, cz])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / directions
            lo = (center - half - origins) * inv
            hi = (center + half - origins) * inv
        t_min = np.nanmax(np.minimum(lo, hi), axis=1)
        t_max = np.nanmin(np.maximum(lo, hi), axis=1)
        hit = (t_max >= t_min) & (t_max > 1e-9)
        t = np.where(t_min > 1e-9, t_min, t_max)
        best_t = np.where(hit, t, np.inf)
        points = origins + np.where(hit, t, 0.0)[:, None] * directions
        local = (points - center) / half
        axis = np.argmax(np.abs(local), axis=1)
        normals[np.arange(n), axis] = np.sign(local[np.arange(n), axis])
        normals = np.where(hit[:, None], normals, 0.0)
    return best_t, normals


def albedo_at(description: Dict[str, Any], points: np.ndarray) -> np.ndarray:
    """Surface albedo of the described shape at points."""
    kind = description.get("albedo", "checker")
    center = np.asarray(description.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
    local = (points - center) / description["size_ref"]
    if kind == "constant":
        return np.tile([0.8, 0.35, 0.2], (len(points), 1))
    if kind == "hemisphere":
        upper = local[:, 2] >= 0.0
        return np.where(upper[:, None], [0.9, 0.25, 0.2], [0.2, 0.35, 0.9])
    cells = np.floor(local * 2.5).astype(np.int64)
    parity = np.sum(cells, axis=1) % 2 == 0
    return np.where(parity[:, None], [0.95, 0.85, 0.25], [0.15, 0.45, 0.85])


def sample_shape_surface(description: Dict[str, Any], n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the shape surface."""
    if "spheres" in description:
        spheres = np.asarray(description["spheres"], dtype=np.float64)
        points = []
        count = 0
        while count < n:
            areas = spheres[:, 3] ** 2
            choice = rng.choice(len(spheres), size=2 * n, p=areas / areas.sum())
            dirs = rng.normal(size=(2 * n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            candidate = spheres[choice, :3] + dirs * spheres[choice, 3:4]
            distances = np.linalg.norm(candidate[:, None, :] - spheres[None, :, :3], axis=2) - spheres[None, :, 3]
            distances[np.arange(len(choice)), choice] = np.inf
            keep = candidate[np.all(distances > -1e-12, axis=1)]
            points.append(keep)
            count += len(keep)
        return np.concatenate(points)[:n]
    cx, cy, cz, half = description["box"]
    faces = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    points = np.zeros((n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    points[np.arange(n), axis] = sign * half
    points[np.arange(n), others[:, 0]] = uv[:, 0]
    points[np.arange(n), others[:, 1]] = uv[:, 1]
    return points + np.array([cx, cy, cz])


def render_analytic(description: Dict[str, Any], camera: Camera, background=(1.0, 1.0, 1.0), near: float = 0.0, far: float = np.inf):
    """
    Ray-traced Lambertian render of the shape through the camera's pose.

    Returns:
        tuple: RGB image (H, W, 3) and depth (H, W), inf where nothing is hit.
    """
    rays = generate_rays(camera, all_pixels(camera.width, camera.height), max(near, 0.0), max(far, near + 1.0))
    t, normals = intersect_shape(description, rays.origins, rays.directions)
    hit = np.isfinite(t)
    points = rays.origins + np.where(hit, t, 0.0)[:, None] * rays.directions
    shading = AMBIENT + DIFFUSE * np.maximum(normals @ LIGHT_DIRECTION, 0.0)
    color = albedo_at(description, points) * shading[:, None]
    color = np.where(hit[:, None], color, np.asarray(background, dtype=np.float64))
    return color.reshape(camera.height, camera.width, 3), t.reshape(camera.height, camera.width)


def ring_cameras(spec: SyntheticSpec) -> Tuple[List[Camera], List[str]]:
    """World-unit cameras on a ring around the z axis looking at the origin, with split labels."""
    rng = make_rng(spec.seed, "synthetic")
    total = spec.n_views + spec.n_test
    test_slots = set()
    if spec.n_test:
        test_slots = {int(round((k + 0.5) * total / spec.n_test)) % total for k in range(spec.n_test)}
        while len(test_slots) < spec.n_test:
            test_slots.add(max(set(range(total)) - test_slots))
    focal = 0.5 * spec.size / math.tan(0.5 * spec.camera_angle_x)
    cameras, splits = [], []
    up = np.array([0.0, 0.0, 1.0])
    for k in range(total):
        azimuth = 2.0 * math.pi * k / total
        elevation = math.radians(rng.uniform(*spec.elevation))
        center = spec.ring_radius * np.array(
            [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
        )
        z_axis = center / np.linalg.norm(center)
        x_axis = np.cross(up, z_axis)
        x_axis /= np.linalg.norm(x_axis)
        y_axis = np.cross(z_axis, x_axis)
        R = np.stack([x_axis, y_axis, z_axis], axis=1)
        cameras.append(Camera(focal=focal, width=spec.size, height=spec.size, pose=CameraPose(R=R, t=center)))
        splits.append("test" if k in test_slots else "train")
    return cameras, splits


def make_synthetic_scene(spec: SyntheticSpec, out_dir: Union[str, Path]) -> Scene:
    """
    Render an analytic Lambertian scene to disk and load it back.

    Writes transforms JSON (world-unit poses plus explicit normalization),
    8-bit PNG renders and raw depth maps, and records the analytic shape for
    chamfer oracles.
    """
    spec.validate()
    out_dir = Path(out_dir)
    description = shape_description(spec)
    cameras, splits = ring_cameras(spec)
    R = np.stack([c.pose.R for c in cameras])
    t = np.stack([c.pose.t for c in cameras])
    scale, offset = normalization(R, t, spec.camera_angle_x, description["bound"])
    normalized = normalize_shape(description, scale, offset)

    images, depths, names = [], [], []
    counters = {"train": 0, "test": 0}
    for camera, split in zip(cameras, splits):
        local = Camera(
            focal=camera.focal,
            width=camera.width,
            height=camera.height,
            pose=CameraPose(R=camera.pose.R, t=camera.pose.t * scale + offset),
        )
        image, depth = render_analytic(normalized, local)
        images.append(image)
        depths.append(depth)
        names.append(f"./{split}/r_{counters[split]:03d}")
        counters[split] += 1
        camera.pose = local.pose

    t_normalized = np.stack([c.pose.t for c in cameras])
    near, far = default_bounds(t_normalized)
    scene = Scene(
        cameras=cameras,
        images=images,
        split=splits,
        names=names,
        near=near,
        far=far,
        scale=scale,
        offset=offset,
        depths=depths,
        metadata={"camera_angle_x": spec.camera_angle_x, "synthetic_world": description},
    )
    write_scene(scene, out_dir)
    logger.info(f"Wrote synthetic '{spec.shape}' scene with {spec.n_views} train / {spec.n_test} test views to {out_dir}")
    return load_scene(out_dir)
