"""
Ray generation, occupancy-guided sampling and volumetric compositing.

Cameras follow the OpenGL convention: the camera looks down its local -z
axis with +y up. Pixel (i, j) is column i, row j, and rays pass through
pixel centers.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit

import autodiff as ad
from autodiff import Expr, ParamBlock
from field import FieldModel, sdf_to_alpha
from lie_se3 import CameraPose, refine_poses_expr
from optim import AdamW


logger = logging.getLogger(__name__)

COMPONENTS = ("full", "diffuse", "specular")


@dataclass
class Camera:
    """
    Pinhole camera.

    Attributes:
        focal (float): Focal length in pixels.
        width, height (int): Image size in pixels.
        cx, cy (float): Principal point; defaults to the image center.
        pose (CameraPose): Camera-to-world pose.
    """

    focal: float
    width: int
    height: int
    pose: CameraPose
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError(f"Camera focal length must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Camera size must be at least 1x1, got {self.width}x{self.height}")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Camera":
        """Same camera resampled to another image size."""
        sx = width / self.width
        return Camera(
            focal=self.focal * sx,
            width=width,
            height=height,
            pose=self.pose,
            cx=self.cx * sx,
            cy=self.cy * height / self.height,
        )


@dataclass
class RayBatch:
    """
    Rays r(t) = o + t v.

    Attributes:
        origins: (N, 3) array or expression.
        directions: (N, 3) unit vectors, array or expression.
        near, far (float): Depth bounds.
        pixel_ids (np.ndarray): Flat pixel index of each ray.
        camera_ids (np.ndarray): Camera index of each ray.
    """

    origins: Union[np.ndarray, Expr]
    directions: Union[np.ndarray, Expr]
    near: float
    far: float
    pixel_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    camera_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(np.shape(ad.value_of(self.origins))[0])


@dataclass
class SampleBatch:
    """
    Per-ray samples: depths (N, S), intervals (N, S-1) and their opacities/weights.
    """

    t: np.ndarray
    valid: np.ndarray
    t_mid: np.ndarray = None
    delta: np.ndarray = None
    alpha: Union[np.ndarray, Expr] = None
    colors: Union[np.ndarray, Expr] = None
    weights: Union[np.ndarray, Expr] = None

    def __post_init__(self):
        if self.t_mid is None:
            self.t_mid = 0.5 * (self.t[:, 1:] + self.t[:, :-1])
        if self.delta is None:
            self.delta = self.t[:, 1:] - self.t[:, :-1]


def pixel_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions through pixel centers; pixels are (N, 2) as (column, row)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[:, 0] + 0.5 - camera.cx) / camera.focal
    y = -(pixels[:, 1] + 0.5 - camera.cy) / camera.focal
    dirs = np.stack([x, y, -np.ones_like(x)], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def all_pixels(width: int, height: int) -> np.ndarray:
    """Every (column, row) pair in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)


def generate_rays(
    camera: Camera,
    pixels: np.ndarray,
    near: float,
    far: float,
    correction: Optional[Union[Expr, ParamBlock, np.ndarray]] = None,
) -> RayBatch:
    """
    Rays through the refined pose of one camera.

    Parameters:
        camera (Camera): Camera with base pose.
        pixels (np.ndarray): (N, 2) pixel coordinates.
        near, far (float): Depth bounds.
        correction: se(3) 6-vector as ParamBlock or expression for differentiable
            rays; defaults to the pose's stored numeric correction.

    Returns:
        RayBatch: Rays whose origins/directions are expressions when a
        differentiable correction is given.
    """
    pixels = np.asarray(pixels)
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= camera.width) or np.any(pixels[:, 1] < 0) or np.any(
        pixels[:, 1] >= camera.height
    ):
        raise ValueError("Pixel coordinates out of image bounds")
    dirs_cam = pixel_directions(camera, pixels)
    pixel_ids = pixels[:, 1].astype(np.int64) * camera.width + pixels[:, 0].astype(np.int64)

    if correction is None:
        correction = camera.pose.correction
    xi = ad.reshape(ad.as_expr(correction), (1, 6))
    refined_R, refined_t = refine_poses_expr(xi, camera.pose.R[None], camera.pose.t[None])
    rotation = ad.reshape(refined_R, (3, 3))
    directions = ad.matmul(dirs_cam, ad.transpose(rotation, (1, 0)))
    origins = ad.reshape(refined_t, (1, 3)) * np.ones((len(pixels), 1))
    symbolic = origins.requires_grad
    return RayBatch(
        origins=origins if symbolic else origins.value,
        directions=directions if symbolic else directions.value,
        near=near,
        far=far,
        pixel_ids=pixel_ids,
        camera_ids=np.zeros(len(pixels), dtype=np.int64),
    )


def generate_ray_batch(
    cameras, corrections: ParamBlock, camera_ids: np.ndarray, pixels: np.ndarray, near: float, far: float
) -> RayBatch:
    """
    Differentiable rays for pixels spread over many cameras.

    Parameters:
        cameras (list): Cameras sharing the (N_cam, 6) `corrections` block.
        corrections (ParamBlock): Per-camera se(3) corrections.
        camera_ids (np.ndarray): Camera of each ray.
        pixels (np.ndarray): (N, 2) pixel coordinates.
    """
    R = np.stack([c.pose.R for c in cameras])
    t = np.stack([c.pose.t for c in cameras])
    refined_R, refined_t = refine_poses_expr(ad.param(corrections), R, t)

    dirs_cam = np.empty((len(pixels), 3))
    pixel_ids = np.empty(len(pixels), dtype=np.int64)
    for cam_id in np.unique(camera_ids):
        rows = camera_ids == cam_id
        camera = cameras[int(cam_id)]
        dirs_cam[rows] = pixel_directions(camera, pixels[rows])
        pixel_ids[rows] = pixels[rows, 1] * camera.width + pixels[rows, 0]

    directions = ad.einsum("nij,nj->ni", refined_R[camera_ids], dirs_cam)
    origins = refined_t[camera_ids]
    return RayBatch(origins, directions, near, far, pixel_ids, np.asarray(camera_ids, dtype=np.int64))


class OccupancyGrid:
    """
    Coarse occupancy grid over [0, 1]^3.

    `pred` holds trainable logits; `sigma` holds the running opacity proxy from
    which the targets are derived.

    Parameters:
        resolution (int): Cells per axis G.
        threshold (float): Occupancy probability below which a cell is skipped.
        decay (float): Per-update decay of the running proxy.
        init_logit (float): Initial logit of every cell.
        lr (float): Learning rate of the logit optimizer.
        steps (int): Optimizer steps per update.
        batch (int): Cells sampled per update.
    """

    def __init__(
        self,
        resolution: int = 64,
        threshold: float = 0.01,
        decay: float = 0.95,
        init_logit: float = 5.0,
        lr: float = 0.5,
        steps: int = 4,
        batch: int = 32768,
    ):
        if resolution < 1:
            raise ValueError(f"Occupancy grid resolution must be positive, got {resolution}")
        self.resolution = resolution
        self.threshold = threshold
        self.decay = decay
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.delta_ref = math.sqrt(3.0) / resolution
        cells = resolution ** 3
        self.pred = ParamBlock(np.full(cells, init_logit), name="occupancy.pred")
        # Warm start: every cell begins with target ~0.999 and decays unless observed.
        self.sigma = np.full(cells, -math.log(1e-3) / self.delta_ref)
        self.optimizer = AdamW([self.pred], name="occupancy")

    @property
    def target(self) -> np.ndarray:
        return 1.0 - np.exp(-self.sigma * self.delta_ref)

    @property
    def probabilities(self) -> np.ndarray:
        return expit(self.pred.values)

    def cell_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Flat cell index of each point and whether the point lies in the box."""
        points = np.asarray(points, dtype=np.float64)
        inside = np.all((points >= 0.0) & (points <= 1.0), axis=-1)
        ijk = np.clip(np.floor(points * self.resolution), 0, self.resolution - 1).astype(np.int64)
        index = ijk[..., 0] + self.resolution * (ijk[..., 1] + self.resolution * ijk[..., 2])
        return index, inside

    def cell_centers(self, cells: np.ndarray) -> np.ndarray:
        res = self.resolution
        i = cells % res
        j = (cells // res) % res
        k = cells // (res * res)
        return (np.stack([i, j, k], axis=-1) + 0.5) / res

    def occupied(self, points: np.ndarray) -> np.ndarray:
        index, inside = self.cell_index(points)
        return inside & (self.probabilities[index] >= self.threshold)

    def all_occupied(self) -> bool:
        return bool(np.all(self.probabilities >= self.threshold))

    def set_all(self, logit: float):
        """Overwrite every predicted logit."""
        self.pred.assign(np.full(self.pred.shape, logit))


def opacity_proxy(sdf: np.ndarray, s: float) -> np.ndarray:
    """Logistic density s * psi(s f) * (1 - psi(s f)) of an SDF value."""
    p = expit(s * sdf)
    return s * p * (1.0 - p)


def occupancy_targets(grid: OccupancyGrid, model, sampled_locations: np.ndarray) -> np.ndarray:
    """
    Fold new observations into the running proxy and return the targets.

    Every cell decays by `grid.decay`; each sampled location raises its cell's
    proxy to at least the opacity proxy observed there.

    Parameters:
        grid (OccupancyGrid): Grid to update.
        model: Object exposing `sdf(points)` and `sharpness`.
        sampled_locations (np.ndarray): (M, 3) points in [0, 1]^3.

    Returns:
        np.ndarray: Updated targets for every cell.
    """
    grid.sigma *= grid.decay
    sdf = model.sdf(sampled_locations)
    proxy = opacity_proxy(sdf, model.sharpness)
    index, inside = grid.cell_index(sampled_locations)
    np.maximum.at(grid.sigma, index[inside], proxy[inside])
    return grid.target


def grid_loss_expr(grid: OccupancyGrid, cells: np.ndarray) -> Expr:
    """Mean squared error between predicted occupancy and targets over cells M."""
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) == 0:
        return ad.constant(0.0)
    pred = ad.sigmoid(ad.param(grid.pred)[cells])
    diff = pred - grid.target[cells]
    return ad.reduce_mean(diff * diff)


def grid_loss(grid: OccupancyGrid, cells: np.ndarray) -> float:
    return float(grid_loss_expr(grid, cells).value)


def update_occupancy(grid: OccupancyGrid, model, rng: np.random.Generator, alpha: Optional[float] = None) -> float:
    """
    One occupancy round: sample cells, refresh targets, fit the logits.

    Returns:
        float: Grid loss after the logit updates.
    """
    cells_total = grid.resolution ** 3
    if grid.batch >= cells_total:
        cells = np.arange(cells_total)
    else:
        cells = rng.choice(cells_total, size=grid.batch, replace=False)
    jitter = rng.uniform(-0.5, 0.5, size=(len(cells), 3)) / grid.resolution
    locations = np.clip(grid.cell_centers(cells) + jitter, 0.0, 1.0)

    model_view = _AlphaBound(model, alpha)
    occupancy_targets(grid, model_view, locations)
    for _ in range(grid.steps):
        grid.optimizer.zero_grad()
        loss = grid_loss_expr(grid, cells)
        ad.backward(loss)
        grid.optimizer.step(grid.lr)
    final = grid_loss(grid, cells)
    occupied = float(np.mean(grid.probabilities >= grid.threshold))
    logger.debug(f"Occupancy update: loss {final:.3e}, occupied fraction {occupied:.3f}")
    return final


class _AlphaBound:
    """Adapter exposing sdf(points) at a fixed window progress."""

    def __init__(self, model, alpha):
        self.model = model
        self.alpha = alpha

    def sdf(self, points):
        if isinstance(self.model, FieldModel):
            return self.model.sdf(points, self.alpha)
        return self.model.sdf(points)

    @property
    def sharpness(self) -> float:
        return self.model.sharpness


# ---------------------------------------------------------------------------
# Sampling


def stratified_depths(
    n_rays: int, near: float, far: float, n_samples: int, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """t_i = near + (i + u_i) (far - near) / n, u_i uniform in [0, 1) or 0 without rng."""
    delta = (far - near) / n_samples
    offsets = np.zeros((n_rays, n_samples)) if rng is None else rng.uniform(0.0, 1.0, size=(n_rays, n_samples))
    return near + (np.arange(n_samples)[None, :] + offsets) * delta


def sample_rays(
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    n_samples: int,
    grid: Optional[OccupancyGrid] = None,
    rng: Optional[np.random.Generator] = None,
) -> SampleBatch:
    """
    Stratified sample depths restricted to occupied space.

    Each ray is marched in 2G steps; steps whose midpoint falls in an
    unoccupied cell are skipped and the n samples are spread stratified over
    the occupied length. Rays crossing no occupied cell are marked invalid.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}")
    if not near < far:
        raise ValueError(f"near ({near}) must be smaller than far ({far})")
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n_rays = origins.shape[0]

    t = stratified_depths(n_rays, near, far, n_samples, rng)
    valid = np.ones(n_rays, dtype=bool)
    if grid is None or grid.all_occupied():
        return SampleBatch(t=t, valid=valid)

    steps = 2 * grid.resolution
    step = (far - near) / steps
    centers = near + (np.arange(steps) + 0.5) * step
    points = origins[:, None, :] + centers[None, :, None] * directions[:, None, :]
    occupied = grid.occupied(points.reshape(-1, 3)).reshape(n_rays, steps)
    full = np.all(occupied, axis=1)
    partial = ~full
    valid = np.any(occupied, axis=1)

    if np.any(partial):
        occ = occupied[partial].astype(np.float64)
        cumulative = np.cumsum(occ, axis=1) * step
        total = cumulative[:, -1:]
        q = (t[partial] - near) / (far - near) * total
        k = np.sum(cumulative[:, None, :] <= q[:, :, None], axis=2)
        k = np.minimum(k, steps - 1)
        prior = np.where(k > 0, np.take_along_axis(cumulative, np.maximum(k - 1, 0), axis=1), 0.0)
        t_partial = near + k * step + (q - prior)
        empty = ~valid[partial]
        if np.any(empty):
            t_partial[empty] = stratified_depths(int(np.sum(empty)), near, far, n_samples, None)
        t[partial] = t_partial
    return SampleBatch(t=t, valid=valid)


# ---------------------------------------------------------------------------
# Compositing


def transmittance_weights(alpha: np.ndarray) -> np.ndarray:
    """w_i = T_i alpha_i with T_i the running product of (1 - alpha_j), j < i."""
    survive = np.cumprod(1.0 - alpha, axis=-1)
    transmittance = np.concatenate([np.ones(alpha.shape[:-1] + (1,)), survive[..., :-1]], axis=-1)
    return transmittance * alpha


class TransmittanceOp(ad.Op):
    """(N, I) opacities -> (N, I) rendering weights."""

    kind = "composite"

    def forward(self, alpha):
        return transmittance_weights(alpha)

    def backward(self, grad, out, alpha):
        survive = np.cumprod(1.0 - alpha, axis=-1)
        transmittance = np.concatenate([np.ones(alpha.shape[:-1] + (1,)), survive[..., :-1]], axis=-1)
        later = np.zeros_like(alpha)
        for k in range(alpha.shape[-1] - 2, -1, -1):
            later[..., k] = grad[..., k + 1] * alpha[..., k + 1] + (1.0 - alpha[..., k + 1]) * later[..., k + 1]
        return (transmittance * (grad - later),)


@dataclass
class CompositeResult:
    color: Union[np.ndarray, Expr]
    depth: Union[np.ndarray, Expr]
    weights: Union[np.ndarray, Expr]
    opacity: Union[np.ndarray, Expr]


def composite(alpha, colors, t_mid) -> CompositeResult:
    """
    Front-to-back compositing of per-interval opacities and colours.

    Parameters:
        alpha: (N, I) opacities in [0, 1].
        colors: (N, I, 3) colours.
        t_mid: (N, I) interval depths.

    Returns:
        CompositeResult: colour (N, 3), depth (N,), weights (N, I) and
        accumulated opacity (N,). Expressions when an input is one.
    """
    symbolic = isinstance(alpha, Expr) or isinstance(colors, Expr)
    weights = ad.apply(TransmittanceOp(), alpha)
    color = ad.einsum("ni,nic->nc", weights, colors)
    opacity = ad.reduce_sum(weights, axis=1)
    depth = ad.reduce_sum(weights * np.asarray(t_mid, dtype=np.float64), axis=1) / ad.clip(opacity, 1e-8, np.inf)
    if symbolic:
        return CompositeResult(color, depth, weights, opacity)
    return CompositeResult(color.value, depth.value, weights.value, opacity.value)


@dataclass
class RenderOutput:
    """Differentiable per-ray render results."""

    color: Expr
    depth: Expr
    weights: Expr
    opacity: Expr
    specular: Expr
    samples: SampleBatch
    positions: np.ndarray


def _broadcast_rows(values, count: int):
    """(N, 3) -> (N * count, 3) repeating each row; works on arrays and expressions."""
    n = np.shape(ad.value_of(values))[0]
    tiled = ad.reshape(values, (n, 1, 3)) * np.ones((1, count, 1))
    return ad.reshape(tiled, (n * count, 3))


def render_rays_expr(
    model: FieldModel,
    rays: RayBatch,
    samples: SampleBatch,
    alpha: Optional[float],
    background: np.ndarray,
) -> RenderOutput:
    """
    Differentiable render of a ray batch, composited over `background`.

    Positions depend on the (possibly differentiable) ray origins and
    directions, so gradients reach the pose corrections.
    """
    n_rays, n_samples = samples.t.shape
    intervals = n_samples - 1
    origins = _broadcast_rows(rays.origins, n_samples)
    directions = _broadcast_rows(rays.directions, n_samples)
    depths = samples.t.reshape(-1, 1)
    positions = origins + directions * depths
    sdf = ad.reshape(model.sdf_expr(positions, alpha), (n_rays, n_samples))

    opacity_alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], model.sharpness_expr(), model.config.eps)
    valid = np.repeat(samples.valid[:, None], intervals, axis=1)
    opacity_alpha = ad.where(valid, opacity_alpha, 0.0)

    mid_origins = _broadcast_rows(rays.origins, intervals)
    mid_directions = _broadcast_rows(rays.directions, intervals)
    mid_positions = mid_origins + mid_directions * samples.t_mid.reshape(-1, 1)
    appearance = model.appearance_expr(mid_positions, mid_directions, alpha)
    colors = ad.reshape(appearance.c, (n_rays, intervals, 3))
    specular = ad.reshape(appearance.c_s, (n_rays, intervals, 3))

    result = composite(opacity_alpha, colors, samples.t_mid)
    color = result.color + ad.reshape(1.0 - result.opacity, (n_rays, 1)) * np.asarray(background, dtype=np.float64)
    specular_color = ad.einsum("ni,nic->nc", result.weights, specular)
    samples.alpha = opacity_alpha
    samples.weights = result.weights
    return RenderOutput(
        color=color,
        depth=result.depth,
        weights=result.weights,
        opacity=result.opacity,
        specular=specular_color,
        samples=samples,
        positions=positions.value.reshape(n_rays, n_samples, 3),
    )


def render_rays(
    model: FieldModel,
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    alpha: Optional[float] = None,
    background=(1.0, 1.0, 1.0),
    grid: Optional[OccupancyGrid] = None,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    component: str = "full",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Numeric render of rays without recording a graph.

    Returns:
        tuple: (colour (N, 3), depth (N,), accumulated opacity (N,)).
    """
    if component not in COMPONENTS:
        raise ValueError(f"Unknown render component '{component}'; expected one of {COMPONENTS}")
    samples = sample_rays(origins, directions, near, far, n_samples, grid, rng)
    n_rays, count = samples.t.shape
    positions = origins[:, None, :] + samples.t[:, :, None] * directions[:, None, :]
    sdf = model.sdf(positions.reshape(-1, 3), alpha).reshape(n_rays, count)
    opacity_alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], model.sharpness, model.config.eps)
    opacity_alpha = np.where(samples.valid[:, None], opacity_alpha, 0.0)

    mid = origins[:, None, :] + samples.t_mid[:, :, None] * directions[:, None, :]
    view = np.repeat(directions[:, None, :], count - 1, axis=1).reshape(-1, 3)
    appearance = model.appearance(mid.reshape(-1, 3), view, alpha)
    chosen = {"full": appearance.c, "diffuse": appearance.c_d, "specular": appearance.c_s}[component]
    result = composite(opacity_alpha, chosen.reshape(n_rays, count - 1, 3), samples.t_mid)
    color = result.color + (1.0 - result.opacity)[:, None] * np.asarray(background, dtype=np.float64)
    return color, result.depth, result.opacity


def render_image(
    model: FieldModel,
    camera: Camera,
    near: float,
    far: float,
    alpha: Optional[float] = None,
    background=(1.0, 1.0, 1.0),
    resolution: Optional[Tuple[int, int]] = None,
    grid: Optional[OccupancyGrid] = None,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    component: str = "full",
    chunk: int = 4096,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render a full image through the camera's refined pose.

    Parameters:
        resolution (tuple, optional): (width, height) to render at; defaults to the camera size.
        component (str): "full", "diffuse" or "specular".

    Returns:
        tuple: RGB image (H, W, 3) clamped to [0, 1] and depth image (H, W).
    """
    if resolution is not None and tuple(resolution) != (camera.width, camera.height):
        camera = camera.scaled(*resolution)
    rays = generate_rays(camera, all_pixels(camera.width, camera.height), near, far)
    colors, depths = [], []
    for start in range(0, len(rays), chunk):
        color, depth, _ = render_rays(
            model,
            rays.origins[start:start + chunk],
            rays.directions[start:start + chunk],
            near,
            far,
            alpha,
            background,
            grid,
            n_samples,
            rng,
            component,
        )
        colors.append(color)
        depths.append(depth)
    image = np.clip(np.concatenate(colors), 0.0, 1.0).reshape(camera.height, camera.width, 3)
    depth = np.concatenate(depths).reshape(camera.height, camera.width)
    return image, depth
