#!/usr/bin/env python3
"""
posemesh command-line interface.

Reconstructs textured triangle meshes from posed multi-view images with noisy
camera extrinsics: Stage 1 jointly optimizes a hash-grid SDF radiance field
and per-camera pose corrections, Stage 2 extracts and photometrically refines
a mesh.
"""

__version__ = "1.0.0"

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import RefineConfig, TrainConfig, config_to_dict, load_config
from errors import NumericalError
from evaluation import align_state, evaluate, pose_report, to_model_frame, write_pose_report
from mesh import MESH_FORMATS, export_mesh, import_mesh, marching_cubes, sample_field_grid
from mesh_refiner import bake_vertex_colors, refine_mesh
from renderer import COMPONENTS, render_image
from scene_io import ALBEDOS, SHAPES, SyntheticSpec, load_scene, make_synthetic_scene, write_depth, write_image
from trainer import load_state, train_stage1


PROGRESS_MODULES = ("__main__", "main", "trainer", "mesh_refiner", "evaluation")


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class CliArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def setup_logging(verbose: bool = False):
    """
    Configure root logger formatting and level for the application.

    Sets the logging level to DEBUG when `verbose` is True, otherwise to
    WARNING for the root logger and INFO for the modules that report progress
    (training, refinement, evaluation and the CLI itself).

    Parameters:
        verbose (bool): When True, enable DEBUG-level logging for all modules.
    """
    if verbose:
        # Show all logs from all modules
        logging.basicConfig(
            level=logging.DEBUG,
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    else:
        logging.basicConfig(
            level=logging.WARNING,
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
        for name in PROGRESS_MODULES:
            logging.getLogger(name).setLevel(logging.INFO)


def build_parser() -> CliArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    parser = CliArgumentParser(
        prog="posemesh",
        description="Mesh reconstruction from multi-view images with noisy camera poses",
        epilog="Example: python src/main.py train --scene data/sphere --noise-sigma 0.15 --out runs/sphere",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    synthetic = commands.add_parser("make-synthetic", help="Render an analytic oracle scene")
    synthetic.add_argument("--out", type=Path, required=True, metavar="DIR", help="Scene directory to write")
    synthetic.add_argument("--shape", choices=SHAPES, default="sphere")
    synthetic.add_argument("--albedo", choices=ALBEDOS, default="checker")
    synthetic.add_argument("--views", type=int, default=20, help="Number of training views")
    synthetic.add_argument("--test-views", type=int, default=4, help="Number of test views")
    synthetic.add_argument("--size", type=int, default=64, help="Image size in pixels")
    synthetic.add_argument("--ring-radius", type=float, default=4.0, help="Camera distance from the shape")
    synthetic.add_argument("--seed", type=int, default=0)

    train = commands.add_parser("train", help="Stage 1: joint field and pose optimization")
    train.add_argument("--scene", type=Path, required=True, metavar="DIR", help="Scene directory")
    train.add_argument("--config", type=Path, metavar="FILE", help="JSON file mirroring TrainConfig")
    train.add_argument("--noise-sigma", type=float, help="Std-dev of the se(3) pose perturbation")
    train.add_argument("--seed", type=int, help="Run seed")
    train.add_argument("--iterations", type=int, help="Override the number of steps")
    train.add_argument("--out", type=Path, required=True, metavar="DIR", help="Run directory")

    render = commands.add_parser("render", help="Render one scene view from a checkpoint")
    render.add_argument("--checkpoint", type=Path, required=True, metavar="FILE")
    render.add_argument("--view", type=int, default=0, help="Scene view index")
    render.add_argument("--out", type=Path, required=True, metavar="FILE", help="Output PNG")
    render.add_argument("--scene", type=Path, metavar="DIR", help="Scene directory (default: the training scene)")
    render.add_argument("--component", choices=COMPONENTS, default="full")
    render.add_argument("--depth-error", action="store_true", help="Also write an absolute depth error map")

    extract = commands.add_parser("extract-mesh", help="Marching cubes on the trained SDF")
    extract.add_argument("--checkpoint", type=Path, required=True, metavar="FILE")
    extract.add_argument("--resolution", type=int, default=128, help="Lattice points per axis")
    extract.add_argument("--level", type=float, default=0.0, help="Iso level")
    extract.add_argument("--out", type=Path, required=True, metavar="FILE", help=f"Mesh file ({', '.join(MESH_FORMATS)})")
    extract.add_argument("--world-units", action="store_true", help="Export in original scene units")
    extract.add_argument("--features", action="store_true", help="Bake specular features into PLY output")

    refine = commands.add_parser("refine-mesh", help="Stage 2: photometric mesh refinement")
    refine.add_argument("--checkpoint", type=Path, required=True, metavar="FILE")
    refine.add_argument("--mesh", type=Path, required=True, metavar="FILE", help="Mesh in normalized units")
    refine.add_argument("--out", type=Path, required=True, metavar="FILE")
    refine.add_argument("--config", type=Path, metavar="FILE", help="JSON file mirroring RefineConfig")
    refine.add_argument("--scene", type=Path, metavar="DIR", help="Scene directory (default: the training scene)")
    refine.add_argument("--world-units", action="store_true", help="Export in original scene units")

    evaluate_cmd = commands.add_parser("evaluate", help="Test-view metrics, pose errors and chamfer distance")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True, metavar="FILE")
    evaluate_cmd.add_argument("--scene", type=Path, metavar="DIR", help="Scene directory (default: the training scene)")
    evaluate_cmd.add_argument("--mesh", type=Path, metavar="FILE", help="Extracted mesh in normalized units")
    evaluate_cmd.add_argument("--gt-mesh", type=Path, metavar="FILE", help="Reference mesh in normalized units")
    evaluate_cmd.add_argument("--out", type=Path, metavar="DIR", help="Report directory (default: next to the checkpoint)")

    poses = commands.add_parser("pose-report", help="Per-camera initial and refined pose errors")
    poses.add_argument("--checkpoint", type=Path, required=True, metavar="FILE")
    poses.add_argument("--out", type=Path, metavar="FILE", help="CSV path (default: pose_report.csv next to the checkpoint)")
    return parser


def _output_dir(args: argparse.Namespace) -> Path:
    if args.command in ("make-synthetic", "train"):
        return args.out
    if args.command == "evaluate":
        return args.out or args.checkpoint.parent
    if args.command == "pose-report":
        return args.out.parent if args.out else args.checkpoint.parent
    return args.out.parent


def write_run_metadata(argv: List[str], args: argparse.Namespace):
    """Echo argv verbatim and the parsed arguments to run_metadata.json."""
    out_dir = _output_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    parsed = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    payload = {"version": __version__, "argv": list(argv), "args": parsed}
    (out_dir / "run_metadata.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _scene_for(state, scene_dir: Optional[Path]):
    directory = scene_dir or Path(state.scene_dir)
    return load_scene(directory, state.config.background)


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    spec = SyntheticSpec(
        shape=args.shape,
        albedo=args.albedo,
        n_views=args.views,
        n_test=args.test_views,
        size=args.size,
        ring_radius=args.ring_radius,
        seed=args.seed,
    )
    scene = make_synthetic_scene(spec, args.out)
    logger.info(f"Wrote {len(scene.cameras)} views of a {spec.shape} to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {
        name: value
        for name, value in (("noise_sigma", args.noise_sigma), ("seed", args.seed), ("iterations", args.iterations))
        if value is not None
    }
    config = dataclasses.replace(config, **overrides)
    config.validate()
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(config_to_dict(config), indent=2) + "\n", encoding="utf-8")

    scene = load_scene(args.scene, config.background)
    state = train_stage1(scene, config, args.out)
    rot_err, trans_err = state.pose_errors()
    logger.info(
        f"Training finished after {state.step} steps in {state.training_time:.1f} s: "
        f"rotation error {rot_err:.4f} deg, translation error {trans_err:.5f}"
    )
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    state = load_state(args.checkpoint)
    scene = _scene_for(state, args.scene)
    if not 0 <= args.view < len(scene.cameras):
        raise ValueError(f"View {args.view} out of range; scene has {len(scene.cameras)} views")

    if args.view in state.train_indices:
        camera = state.sync_cameras()[state.train_indices.index(args.view)]
    else:
        camera = to_model_frame(scene.cameras[args.view], align_state(state))
    image, depth = render_image(
        state.model,
        camera,
        state.near,
        state.far,
        state.alpha(),
        state.config.background,
        grid=state.grid,
        n_samples=state.config.n_samples,
        component=args.component,
    )
    write_image(args.out, image)
    write_depth(args.out.with_name(f"{args.out.stem}_depth.png"), depth)
    logger.info(f"Rendered view {args.view} ({args.component}) to {args.out}")

    if args.depth_error:
        gt_depth = scene.depths[args.view] if scene.depths is not None else None
        if gt_depth is None:
            raise ValueError(f"Scene has no ground-truth depth for view {args.view}")
        alignment = align_state(state)
        scale = alignment.scale if alignment is not None else 1.0
        finite = np.isfinite(gt_depth)
        error = np.where(finite, np.abs(depth * scale - np.where(finite, gt_depth, 0.0)), 0.0)
        peak = float(np.max(error)) if np.any(error > 0) else 1.0
        path = args.out.with_name(f"{args.out.stem}_depth_error.png")
        write_image(path, np.repeat((error / peak)[:, :, None], 3, axis=2))
        logger.info(f"Mean absolute depth error {float(np.mean(error[finite])) if np.any(finite) else 0.0:.5f}; map written to {path}")
    return 0


def cmd_extract_mesh(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    state = load_state(args.checkpoint)
    alpha = state.alpha()
    grid = sample_field_grid(state.model, args.resolution, alpha=alpha, level=args.level)
    mesh = marching_cubes(grid)
    if mesh.is_empty:
        logger.warning("Extracted mesh is empty; the iso level is never crossed")
    mesh = bake_vertex_colors(mesh, state.model, alpha, with_features=args.features)
    if args.world_units:
        mesh = mesh.transformed(state.scale, state.offset)
    export_mesh(mesh, args.out)
    logger.info(f"Extracted {mesh.n_vertices} vertices, {mesh.n_faces} faces to {args.out}")
    return 0


def cmd_refine_mesh(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    state = load_state(args.checkpoint)
    config = load_config(args.config, RefineConfig) if args.config else RefineConfig()
    scene = _scene_for(state, args.scene)
    images = [scene.images[i] for i in state.train_indices]
    mesh = import_mesh(args.mesh)
    alpha = state.alpha()
    result = refine_mesh(mesh, state.sync_cameras(), images, state.model, config, state.near, state.far, alpha)
    if result.reverted:
        logger.warning("Refinement hit a non-finite loss; exporting the last stable mesh")
    refined = bake_vertex_colors(result.mesh, state.model, alpha)
    if args.world_units:
        refined = refined.transformed(state.scale, state.offset)
    export_mesh(refined, args.out)
    logger.info(f"Refined mesh written to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    logger = logging.getLogger(__name__)
    state = load_state(args.checkpoint)
    scene = _scene_for(state, args.scene)
    mesh = import_mesh(args.mesh) if args.mesh else None
    gt_mesh = import_mesh(args.gt_mesh) if args.gt_mesh else None
    out_dir = args.out or args.checkpoint.parent
    report = evaluate(scene, state, out_dir, mesh=mesh, gt_mesh=gt_mesh, seed=state.config.seed)
    for name, value in report.summary().items():
        print(f"{name}: {value:.6g}")
    logger.info(f"Evaluation written to {out_dir}")
    return 0


def cmd_pose_report(args: argparse.Namespace) -> int:
    state = load_state(args.checkpoint)
    rows = pose_report(state)
    path = args.out or args.checkpoint.parent / "pose_report.csv"
    write_pose_report(rows, path)
    print("camera  initial_rot_deg  rot_deg  trans")
    for camera, initial, rot, trans in rows:
        print(f"{camera:6d}  {initial:15.4f}  {rot:7.4f}  {trans:.5f}")
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "refine-mesh": cmd_refine_mesh,
    "evaluate": cmd_evaluate,
    "pose-report": cmd_pose_report,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command-line interface.

    Parameters:
        argv (list, optional): Arguments without the program name; defaults to sys.argv[1:].

    Returns:
        int: 0 on success, 1 on invalid input or usage, 2 on runtime failure.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    setup_logging(args.verbose)
    logger = logging.getLogger(__name__)

    try:
        write_run_metadata(argv, args)
        return COMMANDS[args.command](args)
    except FileNotFoundError:
        logger.exception("File not found")
        return 1
    except ValueError:
        logger.exception("Invalid input")
        return 1
    except NumericalError:
        logger.exception("Numerical failure")
        return 2
    except Exception:
        logger.exception("Unexpected error")
        return 2


def main():
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
