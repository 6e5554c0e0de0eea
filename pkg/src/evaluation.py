"""
Evaluation of a trained state: novel-view quality on the test split, aligned
pose errors, and chamfer distance of an extracted mesh.

Reports are written as CSV (per-view and summary) plus a short text summary.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import make_rng
from lie_se3 import AlignmentResult, CameraPose, align_trajectories, rotation_error_deg
from mesh import TriangleMesh, chamfer_distance, sample_surface
from metrics import psnr, ssim
from renderer import Camera, all_pixels, generate_rays, render_image, render_rays
from scene_io import Scene, sample_shape_surface


logger = logging.getLogger(__name__)

VIEW_COLUMNS = ("view", "psnr_db", "ssim", "depth_mae")
SUMMARY_COLUMNS = ("metric", "value")
POSE_COLUMNS = ("camera", "initial_rot_err_deg", "rot_err_deg", "trans_err")
CHAMFER_POINTS = 100000
SURFACE_OPACITY = 0.5


@dataclass
class ViewMetrics:
    view: str
    psnr_db: float
    ssim: float
    depth_mae: float = float("nan")


@dataclass
class EvaluationReport:
    """
    Attributes:
        views (List[ViewMetrics]): Test-view metrics.
        alignment (AlignmentResult, optional): Refined poses aligned to ground truth.
        initial_rotation_errors (np.ndarray): Per-camera rotation error of the noisy start.
        chamfer (float, optional): Squared bidirectional chamfer distance.
        training_time (float): Wall-clock training seconds.
    """

    views: List[ViewMetrics] = field(default_factory=list)
    alignment: Optional[AlignmentResult] = None
    initial_rotation_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chamfer: Optional[float] = None
    training_time: float = 0.0

    def summary(self) -> Dict[str, float]:
        out = {}
        if self.views:
            out["mean_psnr_db"] = float(np.mean([v.psnr_db for v in self.views]))
            out["mean_ssim"] = float(np.mean([v.ssim for v in self.views]))
            depth = [v.depth_mae for v in self.views if np.isfinite(v.depth_mae)]
            if depth:
                out["mean_depth_mae"] = float(np.mean(depth))
        if self.alignment is not None:
            out["mean_rot_err_deg"] = self.alignment.mean_rotation_error
            out["mean_trans_err"] = self.alignment.mean_translation_error
        if len(self.initial_rotation_errors):
            out["initial_mean_rot_err_deg"] = float(np.mean(self.initial_rotation_errors))
        if self.chamfer is not None:
            out["chamfer_sq_bidirectional"] = self.chamfer
        out["training_time_s"] = float(self.training_time)
        return out


def align_state(state) -> Optional[AlignmentResult]:
    """Similarity alignment of the refined training poses onto ground truth."""
    R, t = state.refined_poses()
    if len(R) < 3:
        logger.warning("Fewer than 3 training cameras; pose alignment skipped")
        return None
    return align_trajectories(R, t, state.gt_R, state.gt_t)


def to_model_frame(camera: Camera, alignment: Optional[AlignmentResult]) -> Camera:
    """Map a ground-truth camera into the frame the field was reconstructed in."""
    if alignment is None:
        return camera
    rotation = alignment.rotation
    R = rotation.T @ camera.pose.R
    t = rotation.T @ (camera.pose.t - alignment.translation) / alignment.scale
    return Camera(camera.focal, camera.width, camera.height, CameraPose(R=R, t=t), camera.cx, camera.cy)


def to_scene_frame(points: np.ndarray, alignment: Optional[AlignmentResult]) -> np.ndarray:
    """Map model-frame points into the ground-truth frame."""
    if alignment is None:
        return np.asarray(points)
    return alignment.scale * np.asarray(points) @ alignment.rotation.T + alignment.translation


def surface_points_from_views(
    model,
    cameras: Sequence[Camera],
    near: float,
    far: float,
    n_samples: int = 64,
    grid=None,
    alpha: Optional[float] = None,
    background=(1.0, 1.0, 1.0),
    chunk: int = 4096,
) -> np.ndarray:
    """
    Expected ray-termination points of every pixel whose accumulated opacity
    exceeds 0.5, gathered over all given cameras.
    """
    points = []
    for camera in cameras:
        rays = generate_rays(camera, all_pixels(camera.width, camera.height), near, far)
        for start in range(0, len(rays), chunk):
            o = rays.origins[start:start + chunk]
            d = rays.directions[start:start + chunk]
            _, depth, opacity = render_rays(model, o, d, near, far, alpha, background, grid, n_samples)
            solid = opacity > SURFACE_OPACITY
            points.append(o[solid] + depth[solid, None] * d[solid])
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points)


def evaluate(
    scene: Scene,
    state,
    out_dir: Optional[Union[str, Path]] = None,
    mesh: Optional[TriangleMesh] = None,
    gt_mesh: Optional[TriangleMesh] = None,
    chamfer_points: int = CHAMFER_POINTS,
    seed: int = 0,
) -> EvaluationReport:
    """
    Evaluate a trained state against the scene.

    Parameters:
        scene (Scene): Scene the state was trained on.
        state (TrainState): Trained state.
        out_dir (Path, optional): Where eval_views.csv, eval_summary.csv and summary.txt go.
        mesh (TriangleMesh, optional): Extracted mesh; without it, surface
            points are ray-cast from the test views.
        gt_mesh (TriangleMesh, optional): Reference surface; defaults to the
            scene's analytic shape when it has one.
        chamfer_points (int): Points sampled from each surface.
        seed (int): Seed of the surface sampling.

    Returns:
        EvaluationReport: Metrics; a scene without test views yields a partial report.
    """
    report = EvaluationReport(training_time=state.training_time)
    alignment = align_state(state)
    report.alignment = alignment
    base_R, _ = state.base_poses
    report.initial_rotation_errors = rotation_error_deg(base_R, state.gt_R)

    test = scene.test_indices
    if not test:
        logger.warning("Scene has no test views; reporting pose errors only")
    alpha = state.alpha()
    test_cameras = [to_model_frame(scene.cameras[i], alignment) for i in test]
    depth_scale = alignment.scale if alignment is not None else 1.0
    for i, camera in zip(test, test_cameras):
        image, depth = render_image(
            state.model,
            camera,
            state.near,
            state.far,
            alpha,
            state.config.background,
            grid=state.grid,
            n_samples=state.config.n_samples,
        )
        target = scene.images[i]
        metrics = ViewMetrics(scene.names[i], psnr(image, target), ssim(image, target))
        if scene.depths is not None and scene.depths[i] is not None:
            gt_depth = scene.depths[i]
            finite = np.isfinite(gt_depth)
            if np.any(finite):
                metrics.depth_mae = float(np.mean(np.abs(depth[finite] * depth_scale - gt_depth[finite])))
        report.views.append(metrics)
        logger.info(f"View {metrics.view}: PSNR {metrics.psnr_db:.2f} dB, SSIM {metrics.ssim:.4f}")

    reference = _reference_points(scene, gt_mesh, chamfer_points, seed)
    if reference is not None:
        if mesh is not None and not mesh.is_empty:
            estimate = sample_surface(mesh, chamfer_points, make_rng(seed, "surface"))
        elif test_cameras:
            estimate = surface_points_from_views(
                state.model, test_cameras, state.near, state.far, state.config.n_samples, state.grid, alpha
            )
        else:
            estimate = np.zeros((0, 3))
        if len(estimate):
            report.chamfer = chamfer_distance(to_scene_frame(estimate, alignment), reference)
        else:
            logger.warning("No surface points to compare; chamfer distance skipped")

    if out_dir is not None:
        write_report(report, Path(out_dir))
    return report


def _reference_points(scene: Scene, gt_mesh: Optional[TriangleMesh], n: int, seed: int) -> Optional[np.ndarray]:
    rng = make_rng(seed, "surface")
    if gt_mesh is not None:
        return sample_surface(gt_mesh, n, rng)
    shape = scene.metadata.get("synthetic")
    if shape is not None:
        return sample_shape_surface(shape, n, rng)
    return None


def write_report(report: EvaluationReport, out_dir: Path):
    """Write eval_views.csv, eval_summary.csv and summary.txt."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_views.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(VIEW_COLUMNS)
        for v in report.views:
            writer.writerow([v.view, repr(v.psnr_db), repr(v.ssim), repr(v.depth_mae)])

    summary = report.summary()
    with open(out_dir / "eval_summary.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS)
        for name, value in summary.items():
            writer.writerow([name, repr(value)])

    lines = ["Evaluation summary", ""]
    for name, value in summary.items():
        lines.append(f"  {name}: {value:.6g}")
    if report.chamfer is not None:
        lines.append("")
        lines.append("  chamfer = 0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2)")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote evaluation report to {out_dir}")


def pose_report(state) -> List[Tuple[int, float, float, float]]:
    """Per-camera initial and refined (aligned) pose errors."""
    base_R, _ = state.base_poses
    initial = rotation_error_deg(base_R, state.gt_R)
    alignment = align_state(state)
    rows = []
    for k in range(len(state.cameras)):
        if alignment is not None:
            rows.append((k, float(initial[k]), float(alignment.rotation_errors_deg[k]), float(alignment.translation_errors[k])))
        else:
            R, t = state.refined_poses()
            rows.append((k, float(initial[k]), float(rotation_error_deg(R[k], state.gt_R[k])), float(np.linalg.norm(t[k] - state.gt_t[k]))))
    return rows


def write_pose_report(rows: List[Tuple[int, float, float, float]], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(POSE_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
