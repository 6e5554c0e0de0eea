"""
Multi-resolution hash-grid encoding with coarse-to-fine level windowing.

Each level stores a table of trainable feature rows. Coarse levels whose
(N_l + 1)^3 lattice fits in the table size are indexed densely; finer levels
use the 32-bit spatial hash. A point's level feature is the trilinear blend of
its 8 enclosing lattice vertices, scaled by the level's cosine window.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

import autodiff as ad
from autodiff import ParamBlock
from errors import NumericalError, SceneValidationError


logger = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)

_MASK32 = np.uint64(0xFFFFFFFF)

# Corner offsets of a lattice cell, bit a of the corner id selects axis a.
_CORNERS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)
_CORNER_SIGNS = np.where(_CORNERS == 1, 1.0, -1.0)


@dataclass
class GridConfig:
    """
    Hash-grid hyperparameters.

    Attributes:
        levels (int): Number of resolution levels L.
        n_min (int): Coarsest resolution.
        n_max (int): Finest resolution.
        table_size (int): Entries per level T (power of two).
        features (int): Features per entry F.
        init_range (float): Tables start uniform in [-init_range, init_range].
    """

    levels: int = 16
    n_min: int = 14
    n_max: int = 4069
    table_size: int = 2 ** 19
    features: int = 2
    init_range: float = 1e-4

    def validate(self):
        if self.levels < 2:
            raise SceneValidationError(f"Grid needs at least 2 levels, got {self.levels}")
        if self.n_min < 1:
            raise SceneValidationError(f"Grid n_min must be >= 1, got {self.n_min}")
        if self.n_max < self.n_min:
            raise SceneValidationError(f"Grid n_max ({self.n_max}) is below n_min ({self.n_min})")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise SceneValidationError(f"Grid table_size must be a power of two, got {self.table_size}")
        if self.table_size > 2 ** 32:
            raise SceneValidationError("Grid table_size cannot exceed 2^32")
        if self.features < 1:
            raise SceneValidationError(f"Grid features must be >= 1, got {self.features}")


def growth_factor(config: GridConfig) -> float:
    """Per-level scale b; 1 when n_min == n_max."""
    if config.n_min == config.n_max:
        return 1.0
    return math.exp((math.log(config.n_max) - math.log(config.n_min)) / (config.levels - 1))


def level_resolutions(config: GridConfig) -> np.ndarray:
    """
    Resolutions N_l = floor(N_min * b^l) for every level.

    Products within 1e-9 of an integer snap to it, so the finest level lands
    on n_max instead of one below it after floating-point rounding.
    """
    b = growth_factor(config)
    resolutions = []
    for level in range(config.levels):
        value = config.n_min * b ** level
        resolutions.append(int(math.floor(value + 1e-9)))
    return np.array(resolutions, dtype=np.int64)


def hash_index(vertex, table_size: int):
    """
    Spatial hash of integer lattice vertices: XOR of 32-bit wrapped
    products with PRIMES, masked to the table size.

    Parameters:
        vertex: Nonnegative integer array with trailing dimension 3.
        table_size (int): Power-of-two table size.

    Returns:
        int or np.ndarray: Index (indices) in [0, table_size).
    """
    if table_size < 1 or table_size & (table_size - 1):
        raise ValueError(f"table_size must be a power of two, got {table_size}")
    v = np.asarray(vertex, dtype=np.uint64)
    h = (v[..., 0] * np.uint64(PRIMES[0])) & _MASK32
    h ^= (v[..., 1] * np.uint64(PRIMES[1])) & _MASK32
    h ^= (v[..., 2] * np.uint64(PRIMES[2])) & _MASK32
    result = (h & np.uint64(table_size - 1)).astype(np.int64)
    if result.ndim == 0:
        return int(result)
    return result


def cosine_window(k, alpha):
    """Window weight of level k at progress alpha: 0, half-cosine ramp, then 1."""
    d = np.asarray(alpha, dtype=np.float64) - np.asarray(k, dtype=np.float64)
    ramp = (1.0 - np.cos(np.clip(d, 0.0, 1.0) * np.pi)) / 2.0
    weight = np.where(d < 0.0, 0.0, np.where(d >= 1.0, 1.0, ramp))
    if weight.ndim == 0:
        return float(weight)
    return weight


def progress_to_alpha(step: int, total_steps: int, c2f_interval: Tuple[float, float], levels: int) -> float:
    """Map training progress to window alpha in [0, levels]."""
    s0, s1 = c2f_interval
    progress = 1.0 if total_steps <= 0 else step / total_steps
    ramp = min(max((progress - s0) / (s1 - s0), 0.0), 1.0)
    return levels * ramp


class _LevelLookup:
    """Corner indices, trilinear weights and their spatial derivatives at one level."""

    def __init__(self, indices: np.ndarray, weights: np.ndarray, dweights: np.ndarray):
        self.indices = indices  # (8, P)
        self.weights = weights  # (8, P)
        self.dweights = dweights  # (8, P, 3), d weight / d x


class HashGridEncoder:
    """
    Multi-resolution hash encoding with trainable per-level tables.

    Parameters:
        config (GridConfig): Grid hyperparameters.
        rng (np.random.Generator): Source for the table initialization.
        name (str): Prefix for the table ParamBlock names.
    """

    def __init__(self, config: GridConfig, rng: np.random.Generator, name: str = "grid"):
        config.validate()
        self.config = config
        self.name = name
        self.resolutions = level_resolutions(config)
        self.dense = [(int(n) + 1) ** 3 <= config.table_size for n in self.resolutions]
        self.tables: List[ParamBlock] = []
        for level, res in enumerate(self.resolutions):
            rows = (int(res) + 1) ** 3 if self.dense[level] else config.table_size
            values = rng.uniform(-config.init_range, config.init_range, size=(rows, config.features))
            self.tables.append(ParamBlock(values, name=f"{name}.level{level}"))
        logger.debug(
            f"Encoder '{name}': resolutions {self.resolutions.tolist()}, "
            f"{sum(self.dense)} dense levels, {sum(t.size for t in self.tables)} parameters"
        )

    @property
    def levels(self) -> int:
        return self.config.levels

    @property
    def output_dim(self) -> int:
        return self.config.levels * self.config.features

    def parameters(self) -> List[ParamBlock]:
        return list(self.tables)

    def windows(self, alpha: Optional[float]) -> np.ndarray:
        """Per-level window weights; alpha=None means every level fully on."""
        if alpha is None:
            return np.ones(self.levels)
        return np.asarray(cosine_window(np.arange(self.levels), alpha), dtype=np.float64)

    def lookup(self, x: np.ndarray, level: int) -> _LevelLookup:
        """Corner indices and trilinear weights of points x (P, 3) at one level."""
        res = int(self.resolutions[level])
        inside = (x >= 0.0) & (x <= 1.0)
        pos = np.clip(x, 0.0, 1.0) * res
        base = np.clip(np.floor(pos), 0, res - 1).astype(np.int64)
        frac = pos - base

        corners = base[None, :, :] + _CORNERS[:, None, :]
        if self.dense[level]:
            stride = res + 1
            indices = corners[..., 0] + stride * (corners[..., 1] + stride * corners[..., 2])
        else:
            indices = hash_index(corners, self.config.table_size)

        axis_weights = np.where(_CORNERS[:, None, :] == 1, frac[None], 1.0 - frac[None])
        weights = axis_weights[..., 0] * axis_weights[..., 1] * axis_weights[..., 2]

        dweights = np.empty(axis_weights.shape)
        dweights[..., 0] = _CORNER_SIGNS[:, None, 0] * axis_weights[..., 1] * axis_weights[..., 2]
        dweights[..., 1] = _CORNER_SIGNS[:, None, 1] * axis_weights[..., 0] * axis_weights[..., 2]
        dweights[..., 2] = _CORNER_SIGNS[:, None, 2] * axis_weights[..., 0] * axis_weights[..., 1]
        dweights *= res * inside[None, :, :]
        return _LevelLookup(indices, weights, dweights)

    def encode(self, x: np.ndarray, alpha: Optional[float] = None) -> np.ndarray:
        """
        Encode points without recording a graph.

        Parameters:
            x (np.ndarray): (P, 3) points; outside [0, 1]^3 they are clamped.
            alpha (float, optional): Window progress; None leaves levels unwindowed.

        Returns:
            np.ndarray: (P, L*F) features.

        Raises:
            NumericalError: If x holds non-finite values.
        """
        op = HashEncodeOp(self, self.windows(alpha))
        return op.forward(np.asarray(x, dtype=np.float64), *[t.values for t in self.tables])

    def encode_expr(self, x, alpha: Optional[float] = None) -> ad.Expr:
        """Differentiable encoding w.r.t. the tables and the point positions."""
        op = HashEncodeOp(self, self.windows(alpha))
        return ad.apply(op, x, *[ad.param(t) for t in self.tables])

    def jacobian_expr(self, x: np.ndarray, alpha: Optional[float] = None) -> ad.Expr:
        """
        Spatial Jacobian d encoding / d x as a (P, L*F, 3) expression.

        Linear in the tables and differentiable w.r.t. them; the points are constants.
        """
        op = HashJacobianOp(self, self.windows(alpha), np.asarray(x, dtype=np.float64))
        return ad.apply(op, *[ad.param(t) for t in self.tables])


def _check_finite(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise NumericalError("Hash-grid encoding received non-finite coordinates")


def _scatter_rows(indices: np.ndarray, values: np.ndarray, rows: int) -> np.ndarray:
    """Sum value rows into a (rows, F) array at indices, deterministically."""
    out = np.empty((rows, values.shape[1]))
    for f in range(values.shape[1]):
        out[:, f] = np.bincount(indices, weights=values[:, f], minlength=rows)
    return out


class HashEncodeOp(ad.Op):
    """Inputs: x (P, 3) then one table per level. Output: (P, L*F)."""

    kind = "composite"

    def __init__(self, encoder: HashGridEncoder, windows: np.ndarray):
        self.encoder = encoder
        self.windows = windows
        self.lookups = {}

    def forward(self, x, *tables):
        _check_finite(x)
        features = self.encoder.config.features
        out = np.zeros((x.shape[0], len(tables) * features))
        self.lookups = {}
        for level, table in enumerate(tables):
            if self.windows[level] == 0.0:
                continue
            lookup = self.encoder.lookup(x, level)
            self.lookups[level] = lookup
            feature = lookup.weights[0][:, None] * table[lookup.indices[0]]
            for c in range(1, 8):
                feature = feature + lookup.weights[c][:, None] * table[lookup.indices[c]]
            out[:, level * features:(level + 1) * features] = feature * self.windows[level]
        return out

    def backward(self, grad, out, x, *tables):
        features = self.encoder.config.features
        grad_x = np.zeros_like(x)
        grad_tables = []
        for level, table in enumerate(tables):
            lookup = self.lookups.get(level)
            if lookup is None:
                grad_tables.append(None)
                continue
            g = grad[:, level * features:(level + 1) * features] * self.windows[level]
            rows = (lookup.weights[:, :, None] * g[None, :, :]).reshape(-1, features)
            grad_tables.append(_scatter_rows(lookup.indices.reshape(-1), rows, table.shape[0]))
            for c in range(8):
                corner_dot = np.sum(table[lookup.indices[c]] * g, axis=1)
                grad_x += corner_dot[:, None] * lookup.dweights[c]
        return (grad_x, *grad_tables)


class HashJacobianOp(ad.Op):
    """Inputs: one table per level. Output: (P, L*F, 3) spatial Jacobian at fixed points."""

    kind = "composite"

    def __init__(self, encoder: HashGridEncoder, windows: np.ndarray, x: np.ndarray):
        _check_finite(x)
        self.encoder = encoder
        self.windows = windows
        self.x = x
        self.lookups = {
            level: encoder.lookup(x, level)
            for level in range(encoder.levels)
            if windows[level] != 0.0
        }

    def forward(self, *tables):
        features = self.encoder.config.features
        out = np.zeros((self.x.shape[0], len(tables) * features, 3))
        for level, lookup in self.lookups.items():
            table = tables[level]
            block = np.zeros((self.x.shape[0], features, 3))
            for c in range(8):
                block += table[lookup.indices[c]][:, :, None] * lookup.dweights[c][:, None, :]
            out[:, level * features:(level + 1) * features, :] = block * self.windows[level]
        return out

    def backward(self, grad, out, *tables):
        features = self.encoder.config.features
        grad_tables = []
        for level, table in enumerate(tables):
            lookup = self.lookups.get(level)
            if lookup is None:
                grad_tables.append(None)
                continue
            g = grad[:, level * features:(level + 1) * features, :] * self.windows[level]
            rows = np.einsum("cpa,pfa->cpf", lookup.dweights, g).reshape(-1, features)
            grad_tables.append(_scatter_rows(lookup.indices.reshape(-1), rows, table.shape[0]))
        return tuple(grad_tables)
