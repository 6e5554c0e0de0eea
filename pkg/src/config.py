"""
Training and refinement configuration, JSON config files and seeded RNG streams.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np

from errors import SceneValidationError
from field import FieldConfig


logger = logging.getLogger(__name__)

# Fixed stream ids: every random consumer draws from default_rng([seed, stream]).
STREAMS = {
    "init": 0,
    "noise": 1,
    "rays": 2,
    "jitter": 3,
    "eikonal": 4,
    "occupancy": 5,
    "refine": 6,
    "surface": 7,
    "synthetic": 8,
}

SMOOTH_MODES = ("printed", "offset-laplacian")


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run seed."""
    if stream not in STREAMS:
        raise ValueError(f"Unknown random stream '{stream}'")
    return np.random.default_rng([int(seed), STREAMS[stream]])


@dataclass
class TrainConfig:
    """
    Stage-1 settings.

    Attributes:
        iterations (int): Optimization steps.
        lr_nerf (tuple): Field learning rate (start, end), exponentially decayed.
        lr_pose (tuple): Pose-correction learning rate (start, end).
        weight_decay (float): Decoupled decay of the field optimizer.
        betas (tuple): Adam moment decay rates of both optimizers.
        lambda_photo, lambda_eik, lambda_spec, lambda_entropy (float): Loss weights.
        c2f_interval (tuple): Normalized progress interval of the level window ramp.
        c2f_enabled (bool): False keeps every level fully on from step 0.
        rays_per_batch (int): Rays per step.
        eikonal_samples (int): Points M for the eikonal term.
        n_samples (int): Samples per ray.
        seed (int): Run seed.
        noise_sigma (float): Std-dev of the se(3) pose perturbation.
        occupancy_resolution, occupancy_threshold, occupancy_every, occupancy_decay:
            Occupancy grid settings.
        background (tuple): Background colour.
        log_every (int): Steps between progress log lines and CSV rows.
        checkpoint_every (int): Steps between checkpoints (0 disables periodic checkpoints).
        pose_snapshot_steps (list, optional): Steps at which refined poses are recorded.
        field (FieldConfig): Network and encoder settings.
    """

    iterations: int = 30000
    lr_nerf: Tuple[float, float] = (1e-3, 1e-5)
    lr_pose: Tuple[float, float] = (1e-4, 1e-6)
    weight_decay: float = 1e-6
    betas: Tuple[float, float] = (0.9, 0.99)
    lambda_photo: float = 1.0
    lambda_eik: float = 0.1
    lambda_spec: float = 1e-4
    lambda_entropy: float = 1e-3
    c2f_interval: Tuple[float, float] = (0.1, 0.5)
    c2f_enabled: bool = True
    rays_per_batch: int = 4096
    eikonal_samples: int = 1024
    n_samples: int = 64
    seed: int = 0
    noise_sigma: float = 0.15
    occupancy_resolution: int = 64
    occupancy_threshold: float = 0.01
    occupancy_every: int = 16
    occupancy_decay: float = 0.95
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    log_every: int = 100
    checkpoint_every: int = 5000
    pose_snapshot_steps: Optional[List[int]] = None
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)

    def validate(self):
        _require(self.iterations >= 1, f"iterations must be >= 1, got {self.iterations}")
        for name in ("lambda_photo", "lambda_eik", "lambda_spec", "lambda_entropy", "weight_decay", "noise_sigma"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr_nerf", "lr_pose"):
            start, end = getattr(self, name)
            _require(start > 0 and end > 0, f"{name} rates must be positive, got {(start, end)}")
        s0, s1 = self.c2f_interval
        _require(0 <= s0 < s1 <= 1, f"c2f_interval must satisfy 0 <= start < end <= 1, got {(s0, s1)}")
        _require(self.rays_per_batch >= 1, "rays_per_batch must be >= 1")
        _require(self.eikonal_samples >= 1, "eikonal_samples must be >= 1")
        _require(self.n_samples >= 2, "n_samples must be >= 2")
        _require(self.occupancy_resolution >= 1, "occupancy_resolution must be >= 1")
        _require(self.occupancy_every >= 1, "occupancy_every must be >= 1")
        _require(0 < self.occupancy_decay <= 1, "occupancy_decay must be in (0, 1]")
        _require(self.log_every >= 1, "log_every must be >= 1")
        _require(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        self.field.geo_grid.validate()
        self.field.app_grid.validate()

    def snapshot_steps(self) -> List[int]:
        if self.pose_snapshot_steps is not None:
            return sorted(set(int(s) for s in self.pose_snapshot_steps))
        return sorted({0, self.iterations // 3, self.iterations})


@dataclass
class RefineConfig:
    """
    Stage-2 mesh refinement settings.

    Attributes:
        iterations (int): Optimization steps.
        lr (float): Offset learning rate at the first step.
        lr_end (float): Offset learning rate at the last step (exponential decay).
        lambda_photo, lambda_smooth, lambda_offset (float): Loss weights. The offset
            term sums over vertices while the photometric term averages over rays,
            so dense meshes need a far smaller lambda_offset for offsets to move.
        topology_every (int): Steps between topology edits.
        topology_rounds (int): Maximum number of topology edits.
        subdivide_quantile (float): Fraction of highest-error faces subdivided.
        decimate_quantile (float): Fraction of lowest-error faces considered for collapse.
        rays_per_batch (int): Rays per step.
        smooth_mode (str): "printed" or "offset-laplacian".
        seed (int): Run seed.
        background (tuple): Background colour of missed rays.
        log_every (int): Steps between progress log lines.
    """

    iterations: int = 600
    lr: float = 1e-3
    lr_end: float = 1e-5
    lambda_photo: float = 1.0
    lambda_smooth: float = 0.01
    lambda_offset: float = 0.1
    topology_every: int = 200
    topology_rounds: int = 3
    subdivide_quantile: float = 0.10
    decimate_quantile: float = 0.30
    rays_per_batch: int = 4096
    smooth_mode: str = "printed"
    seed: int = 0
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    log_every: int = 50

    def validate(self):
        _require(self.iterations >= 0, f"iterations must be >= 0, got {self.iterations}")
        _require(self.lr > 0, f"lr must be positive, got {self.lr}")
        _require(self.lr_end > 0, f"lr_end must be positive, got {self.lr_end}")
        for name in ("lambda_photo", "lambda_smooth", "lambda_offset"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        _require(self.topology_every >= 1, "topology_every must be >= 1")
        _require(self.topology_rounds >= 0, "topology_rounds must be >= 0")
        for name in ("subdivide_quantile", "decimate_quantile"):
            _require(0 <= getattr(self, name) <= 1, f"{name} must be in [0, 1]")
        _require(self.smooth_mode in SMOOTH_MODES, f"smooth_mode must be one of {SMOOTH_MODES}")
        _require(self.rays_per_batch >= 1, "rays_per_batch must be >= 1")


def _require(condition: bool, message: str):
    if not condition:
        raise SceneValidationError(f"Invalid configuration: {message}")


T = TypeVar("T")


def config_from_dict(cls: Type[T], data: Dict[str, Any], where: str = "config") -> T:
    """
    Build a config dataclass from a plain dict, recursing into nested configs.

    Raises:
        SceneValidationError: On unknown keys or values of the wrong kind.
    """
    if not isinstance(data, dict):
        raise SceneValidationError(f"{where} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise SceneValidationError(f"Unknown key(s) in {where}: {', '.join(unknown)}")

    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = config_from_dict(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise SceneValidationError(f"{where}.{name} must be a list of {len(default)} numbers")
            kwargs[name] = tuple(float(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise SceneValidationError(f"{where}.{name} must be true or false")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
                raise SceneValidationError(f"{where}.{name} must be an integer")
            kwargs[name] = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SceneValidationError(f"{where}.{name} must be a number")
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(config) -> Dict[str, Any]:
    """Plain JSON-serializable dict of a config dataclass."""
    data = dataclasses.asdict(config)
    return json.loads(json.dumps(data))


def load_config(path: Union[str, Path], cls: Type[T] = TrainConfig) -> T:
    """
    Read a JSON config file whose keys mirror the dataclass fields.

    Raises:
        FileNotFoundError: If the file does not exist.
        SceneValidationError: On malformed JSON, unknown keys or invalid values.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneValidationError(f"Config file {path} is not valid JSON: {e}") from e
    config = config_from_dict(cls, data, where=path.name)
    config.validate()
    logger.debug(f"Loaded {cls.__name__} from {path}")
    return config
