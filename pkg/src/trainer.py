"""
Stage 1: joint optimization of the SDF field and per-camera pose corrections.

Each step draws a random pixel batch from the training views, renders it
through the refined poses, and applies one AdamW step to the field and one to
the corrections. Progress is written to a CSV log, checkpoints and pose
snapshots go to the output directory.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import ParamBlock
from checkpoint import read_checkpoint, require_arrays, restore_rng, rng_state, write_checkpoint
from config import TrainConfig, config_from_dict, config_to_dict, make_rng
from errors import NumericalError, SceneValidationError
from field import FieldModel
from hashgrid import progress_to_alpha
from lie_se3 import AlignmentResult, CameraPose, align_trajectories, apply_corrections, rotation_error_deg, se3_exp
from losses import eikonal_loss, entropy_loss, photometric_loss, specular_loss, total_loss
from metrics import psnr
from optim import AdamW, lr_at
from renderer import Camera, OccupancyGrid, generate_ray_batch, render_rays_expr, sample_rays, update_occupancy
from scene_io import Scene


logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step",
    "total",
    "photo",
    "eik",
    "spec",
    "entropy",
    "lr_nerf",
    "lr_pose",
    "mean_rot_err_deg",
    "mean_trans_err",
)

TRAIN_STREAMS = ("noise", "rays", "jitter", "eikonal", "occupancy")

FAILURE_ANGLE_DEG = 15.0
EIKONAL_JITTER = 0.01


@dataclass
class TrainState:
    """
    Everything needed to continue or evaluate a Stage-1 run.

    Attributes:
        config (TrainConfig): Run settings.
        model (FieldModel): Field being optimized.
        cameras (List[Camera]): Training cameras holding the noisy starting poses.
        corrections (ParamBlock): (N, 6) se(3) corrections, one row per camera.
        gt_R, gt_t (np.ndarray): Ground-truth poses of the training cameras.
        grid (OccupancyGrid): Sampling grid.
        field_optimizer, pose_optimizer (AdamW): The two independent optimizers.
        rngs (dict): Per-purpose generators.
        near, far (float): Ray bounds.
        step (int): Completed optimization steps.
        history (list): Logged CSV rows.
        train_indices (list): Scene index of each training camera.
        scene_dir (str): Scene the run was trained on.
        scale, offset: Scene normalization, kept for exporting in scene units.
        training_time (float): Wall-clock seconds spent in the training loop.
    """

    config: TrainConfig
    model: FieldModel
    cameras: List[Camera]
    corrections: ParamBlock
    gt_R: np.ndarray
    gt_t: np.ndarray
    grid: OccupancyGrid
    field_optimizer: AdamW
    pose_optimizer: AdamW
    rngs: Dict[str, np.random.Generator]
    near: float
    far: float
    step: int = 0
    history: List[Tuple[float, ...]] = field(default_factory=list)
    train_indices: List[int] = field(default_factory=list)
    scene_dir: str = ""
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    training_time: float = 0.0

    @property
    def base_poses(self) -> Tuple[np.ndarray, np.ndarray]:
        R = np.stack([c.pose.R for c in self.cameras])
        t = np.stack([c.pose.t for c in self.cameras])
        return R, t

    def refined_poses(self) -> Tuple[np.ndarray, np.ndarray]:
        """exp(xi_i) * P_i for every training camera."""
        R, t = self.base_poses
        return apply_corrections(R, t, self.corrections.values)

    def alpha(self, step: Optional[int] = None) -> float:
        """Window progress at `step` (default: the current step)."""
        levels = self.model.geo_encoder.levels
        if not self.config.c2f_enabled:
            return float(levels)
        step = self.step if step is None else step
        return progress_to_alpha(step, self.config.iterations, self.config.c2f_interval, levels)

    def pose_errors(self) -> Tuple[float, float]:
        """Mean rotation (degrees) and translation error of the refined poses after alignment."""
        R, t = self.refined_poses()
        return pose_error_summary(R, t, self.gt_R, self.gt_t)

    def sync_cameras(self) -> List[Camera]:
        """Cameras whose stored correction equals the current one."""
        synced = []
        for camera, xi in zip(self.cameras, self.corrections.values):
            pose = CameraPose(R=camera.pose.R, t=camera.pose.t, correction=xi.copy())
            synced.append(Camera(camera.focal, camera.width, camera.height, pose, camera.cx, camera.cy))
        return synced


def pose_error_summary(R: np.ndarray, t: np.ndarray, gt_R: np.ndarray, gt_t: np.ndarray) -> Tuple[float, float]:
    """Aligned mean errors; fewer than 3 cameras fall back to unaligned errors."""
    if len(R) >= 3:
        result: AlignmentResult = align_trajectories(R, t, gt_R, gt_t)
        return result.mean_rotation_error, result.mean_translation_error
    return float(np.mean(rotation_error_deg(R, gt_R))), float(np.mean(np.linalg.norm(t - gt_t, axis=1)))


def perturb_poses(
    gt_R: np.ndarray, gt_t: np.ndarray, sigma: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Left-compose every pose with exp(xi), xi ~ N(0, sigma^2 I6).

    Parameters:
        gt_R (np.ndarray): (N, 3, 3) rotations.
        gt_t (np.ndarray): (N, 3) translations.
        sigma (float): Noise standard deviation.
        rng (np.random.Generator): Noise source.

    Returns:
        tuple: Noisy (R, t).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gt_R = np.asarray(gt_R, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    if sigma == 0:
        return gt_R.copy(), gt_t.copy()
    xi = rng.normal(0.0, sigma, size=(len(gt_R), 6))
    noise = se3_exp(xi)
    R = noise[:, :3, :3] @ gt_R
    t = np.einsum("nij,nj->ni", noise[:, :3, :3], gt_t) + noise[:, :3, 3]
    return R, t


def init_state(scene: Scene, config: TrainConfig) -> TrainState:
    """Fresh training state: initialized field, perturbed poses, zero corrections."""
    config.validate()
    indices = scene.train_indices
    if len(indices) < 2:
        raise SceneValidationError(f"Training needs at least 2 train views, got {len(indices)}")

    model = FieldModel(config.field, make_rng(config.seed, "init"))
    rngs = {name: make_rng(config.seed, name) for name in TRAIN_STREAMS}

    gt_R, gt_t = scene.poses(indices)
    noisy_R, noisy_t = perturb_poses(gt_R, gt_t, config.noise_sigma, rngs["noise"])
    cameras = []
    for k, i in enumerate(indices):
        base = scene.cameras[i]
        pose = CameraPose(R=noisy_R[k], t=noisy_t[k])
        cameras.append(Camera(base.focal, base.width, base.height, pose, base.cx, base.cy))

    corrections = ParamBlock(np.zeros((len(indices), 6)), name="pose.corrections")
    grid = OccupancyGrid(
        resolution=config.occupancy_resolution,
        threshold=config.occupancy_threshold,
        decay=config.occupancy_decay,
    )
    state = TrainState(
        config=config,
        model=model,
        cameras=cameras,
        corrections=corrections,
        gt_R=gt_R,
        gt_t=gt_t,
        grid=grid,
        field_optimizer=AdamW(model.parameters(), "field", config.betas, config.weight_decay),
        pose_optimizer=AdamW([corrections], "pose", config.betas, 0.0),
        rngs=rngs,
        near=scene.near,
        far=scene.far,
        train_indices=list(indices),
        scene_dir=scene.source_dir,
        scale=scene.scale,
        offset=np.asarray(scene.offset, dtype=np.float64).copy(),
    )

    initial = float(np.mean(rotation_error_deg(noisy_R, gt_R)))
    logger.info(f"Initial mean rotation error {initial:.3f} deg (sigma {config.noise_sigma})")
    if initial > FAILURE_ANGLE_DEG:
        logger.warning(
            f"Mean initial rotation error {initial:.1f} deg exceeds {FAILURE_ANGLE_DEG:.0f} deg; "
            "pose recovery is unreliable at this noise level"
        )
    return state


# ---------------------------------------------------------------------------
# One step


@dataclass
class StepResult:
    parts: Tuple[float, float, float, float]
    total: float
    lr_nerf: float
    lr_pose: float
    batch_psnr: float


def _sample_pixels(state: TrainState, images: List[np.ndarray], count: int):
    rng = state.rngs["rays"]
    camera_ids = rng.integers(0, len(state.cameras), size=count)
    pixels = np.empty((count, 2), dtype=np.int64)
    targets = np.empty((count, 3))
    for cam_id in np.unique(camera_ids):
        rows = np.nonzero(camera_ids == cam_id)[0]
        camera = state.cameras[int(cam_id)]
        cols = rng.integers(0, camera.width, size=len(rows))
        lines = rng.integers(0, camera.height, size=len(rows))
        pixels[rows, 0] = cols
        pixels[rows, 1] = lines
        targets[rows] = images[int(cam_id)][lines, cols]
    return camera_ids, pixels, targets


def _eikonal_points(state: TrainState, positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Half uniform in the unit box, half jittered around the current ray samples."""
    rng = state.rngs["eikonal"]
    m = state.config.eikonal_samples
    near_count = m // 2 if np.any(valid) else 0
    uniform = rng.uniform(0.0, 1.0, size=(m - near_count, 3))
    if near_count == 0:
        return uniform
    candidates = positions[valid].reshape(-1, 3)
    picked = candidates[rng.integers(0, len(candidates), size=near_count)]
    jittered = picked + rng.normal(0.0, EIKONAL_JITTER, size=picked.shape)
    return np.concatenate([uniform, np.clip(jittered, 0.0, 1.0)])


def train_step(state: TrainState, images: List[np.ndarray]) -> StepResult:
    """
    One optimization step.

    Raises:
        NumericalError: If a loss part is non-finite; parameters are left untouched.
    """
    config = state.config
    alpha = state.alpha()
    if state.step > 0 and state.step % config.occupancy_every == 0:
        update_occupancy(state.grid, state.model, state.rngs["occupancy"], alpha)

    camera_ids, pixels, targets = _sample_pixels(state, images, config.rays_per_batch)
    rays = generate_ray_batch(state.cameras, state.corrections, camera_ids, pixels, state.near, state.far)
    samples = sample_rays(
        rays.origins.value,
        rays.directions.value,
        state.near,
        state.far,
        config.n_samples,
        state.grid,
        state.rngs["jitter"],
    )
    out = render_rays_expr(state.model, rays, samples, alpha, np.asarray(config.background))

    interval_valid = np.repeat(samples.valid[:, None], config.n_samples - 1, axis=1)
    parts = [
        photometric_loss(out.color, targets),
        eikonal_loss(state.model, _eikonal_points(state, out.positions, samples.valid), alpha),
        specular_loss(out.specular),
        entropy_loss(out.weights, interval_valid),
    ]
    weights = (config.lambda_photo, config.lambda_eik, config.lambda_spec, config.lambda_entropy)
    loss = total_loss(parts, weights)

    lr_nerf = lr_at(state.step, config.iterations, *config.lr_nerf)
    lr_pose = lr_at(state.step, config.iterations, *config.lr_pose)
    state.field_optimizer.zero_grad()
    state.pose_optimizer.zero_grad()
    ad.backward(loss)
    state.field_optimizer.step(lr_nerf)
    state.pose_optimizer.step(lr_pose)
    state.step += 1

    return StepResult(
        parts=tuple(float(p.value) for p in parts),
        total=float(loss.value),
        lr_nerf=lr_nerf,
        lr_pose=lr_pose,
        batch_psnr=psnr(np.clip(out.color.value, 0.0, 1.0), targets),
    )


# ---------------------------------------------------------------------------
# Loop


def train_stage1(
    scene: Scene,
    config: Optional[TrainConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
) -> TrainState:
    """
    Run Stage-1 training until `config.iterations` (or `stop_at`) steps are done.

    Parameters:
        scene (Scene): Loaded scene; only its train split is used.
        config (TrainConfig, optional): Settings; defaults to the state's config or TrainConfig().
        out_dir (Path, optional): Where train_log.csv, checkpoints and pose_history.npz go.
        state (TrainState, optional): State to continue, e.g. from load_state.
        stop_at (int, optional): Step at which to pause early.

    Returns:
        TrainState: State after the last completed step.

    Raises:
        NumericalError: On a non-finite loss. The last good state is saved to
            `checkpoint_last_good.npz` in `out_dir` first.
    """
    if state is None:
        state = init_state(scene, config or TrainConfig())
    config = state.config
    images = [scene.images[i] for i in state.train_indices]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    snapshots = set(config.snapshot_steps())
    pose_history = load_pose_history(out_dir) if out_dir is not None and state.step > 0 else {}
    if state.step in snapshots:
        pose_history[state.step] = state.refined_poses()

    logger.info(f"Training from step {state.step} to {end} ({len(state.cameras)} cameras)")
    while state.step < end:
        started = time.perf_counter()
        try:
            result = train_step(state, images)
        except NumericalError:
            if out_dir is not None:
                save_state(state, out_dir / "checkpoint_last_good.npz")
                logger.error(f"Non-finite loss at step {state.step}; saved last good state to {out_dir}")
            raise
        state.training_time += time.perf_counter() - started

        if state.step in snapshots:
            pose_history[state.step] = state.refined_poses()
        if state.step % config.log_every == 0 or state.step == config.iterations:
            rot_err, trans_err = state.pose_errors()
            state.history.append(
                (state.step, result.total) + result.parts + (result.lr_nerf, result.lr_pose, rot_err, trans_err)
            )
            logger.info(
                f"step {state.step}/{config.iterations} loss {result.total:.5f} "
                f"psnr {result.batch_psnr:.2f} dB rot {rot_err:.4f} deg"
            )
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_state(state, out_dir / "checkpoint.npz")

    if out_dir is not None:
        write_train_log(state.history, out_dir / "train_log.csv")
        write_pose_history(pose_history, state, out_dir / "pose_history.npz")
        save_state(state, out_dir / "checkpoint.npz")
    return state


# ---------------------------------------------------------------------------
# Persistence


def write_train_log(history: List[Tuple[float, ...]], path: Union[str, Path]):
    """CSV with one row per logged step; floats use repr so identical runs give identical files."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])


def write_pose_history(history: Dict[int, Tuple[np.ndarray, np.ndarray]], state: TrainState, path: Union[str, Path]):
    """Refined poses at the snapshot steps plus the ground truth."""
    steps = sorted(history)
    np.savez(
        path,
        steps=np.array(steps, dtype=np.int64),
        R=np.stack([history[s][0] for s in steps]) if steps else np.zeros((0, len(state.cameras), 3, 3)),
        t=np.stack([history[s][1] for s in steps]) if steps else np.zeros((0, len(state.cameras), 3)),
        gt_R=state.gt_R,
        gt_t=state.gt_t,
    )


def load_pose_history(out_dir: Optional[Path]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    path = out_dir / "pose_history.npz" if out_dir is not None else None
    if path is None or not path.exists():
        return {}
    with np.load(path) as data:
        return {int(s): (data["R"][k], data["t"][k]) for k, s in enumerate(data["steps"])}


def save_state(state: TrainState, path: Union[str, Path]):
    """Write the full training state as a checkpoint."""
    arrays = {}
    for block in state.model.parameters() + [state.corrections, state.grid.pred]:
        arrays[f"param/{block.name}"] = block.values
    for optimizer in (state.field_optimizer, state.pose_optimizer, state.grid.optimizer):
        arrays.update(optimizer.state_arrays())
    base_R, base_t = state.base_poses
    arrays["cam/K"] = np.stack([c.K for c in state.cameras])
    arrays["cam/size"] = np.array([[c.width, c.height] for c in state.cameras], dtype=np.int64)
    arrays["cam/R"] = base_R
    arrays["cam/t"] = base_t
    arrays["cam/gt_R"] = state.gt_R
    arrays["cam/gt_t"] = state.gt_t
    arrays["occ/target"] = state.grid.target
    arrays["occ/sigma"] = state.grid.sigma
    arrays["history"] = np.array(state.history, dtype=np.float64).reshape(-1, len(LOG_COLUMNS))
    meta = {
        "config": config_to_dict(state.config),
        "step": state.step,
        "scene_dir": state.scene_dir,
        "train_indices": state.train_indices,
        "near": state.near,
        "far": state.far,
        "scale": state.scale,
        "offset": list(map(float, state.offset)),
        "training_time": state.training_time,
        "rng_states": {name: rng_state(rng) for name, rng in state.rngs.items()},
        "optimizer_steps": {
            opt.name: opt.step_count for opt in (state.field_optimizer, state.pose_optimizer, state.grid.optimizer)
        },
        "occupancy": {
            "resolution": state.grid.resolution,
            "threshold": state.grid.threshold,
            "decay": state.grid.decay,
            "lr": state.grid.lr,
            "steps": state.grid.steps,
            "batch": state.grid.batch,
        },
    }
    write_checkpoint(path, meta, arrays)
    logger.info(f"Saved checkpoint at step {state.step} to {path}")


def load_state(path: Union[str, Path]) -> TrainState:
    """
    Rebuild a TrainState from a checkpoint written by save_state.

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointError: On version mismatch or missing arrays.
    """
    meta, arrays = read_checkpoint(path)
    config = config_from_dict(TrainConfig, meta["config"], where=f"{path} config")
    model = FieldModel(config.field, make_rng(config.seed, "init"))

    require_arrays(arrays, ["cam/K", "cam/size", "cam/R", "cam/t", "cam/gt_R", "cam/gt_t", "occ/sigma"], str(path))
    cameras = []
    for K, size, R, t in zip(arrays["cam/K"], arrays["cam/size"], arrays["cam/R"], arrays["cam/t"]):
        pose = CameraPose(R=R.copy(), t=t.copy())
        cameras.append(Camera(float(K[0, 0]), int(size[0]), int(size[1]), pose, float(K[0, 2]), float(K[1, 2])))

    corrections = ParamBlock(np.zeros((len(cameras), 6)), name="pose.corrections")
    occupancy = meta["occupancy"]
    grid = OccupancyGrid(
        resolution=occupancy["resolution"],
        threshold=occupancy["threshold"],
        decay=occupancy["decay"],
        lr=occupancy["lr"],
        steps=occupancy["steps"],
        batch=occupancy["batch"],
    )
    blocks = model.parameters() + [corrections, grid.pred]
    require_arrays(arrays, [f"param/{b.name}" for b in blocks], str(path))
    for block in blocks:
        block.assign(arrays[f"param/{block.name}"])
    grid.sigma = np.array(arrays["occ/sigma"], dtype=np.float64)

    field_optimizer = AdamW(model.parameters(), "field", config.betas, config.weight_decay)
    pose_optimizer = AdamW([corrections], "pose", config.betas, 0.0)
    steps = meta["optimizer_steps"]
    for optimizer in (field_optimizer, pose_optimizer, grid.optimizer):
        keys = list(optimizer.state_arrays())
        require_arrays(arrays, keys, str(path))
        optimizer.load_state_arrays(arrays, steps[optimizer.name])

    history = [tuple(row) for row in arrays.get("history", np.zeros((0, len(LOG_COLUMNS)))).tolist()]
    state = TrainState(
        config=config,
        model=model,
        cameras=cameras,
        corrections=corrections,
        gt_R=np.array(arrays["cam/gt_R"]),
        gt_t=np.array(arrays["cam/gt_t"]),
        grid=grid,
        field_optimizer=field_optimizer,
        pose_optimizer=pose_optimizer,
        rngs={name: restore_rng(s) for name, s in meta["rng_states"].items()},
        near=float(meta["near"]),
        far=float(meta["far"]),
        step=int(meta["step"]),
        history=history,
        train_indices=list(meta["train_indices"]),
        scene_dir=meta["scene_dir"],
        scale=float(meta["scale"]),
        offset=np.array(meta["offset"], dtype=np.float64),
        training_time=float(meta["training_time"]),
    )
    logger.debug(f"Loaded checkpoint {path} at step {state.step}")
    return state
