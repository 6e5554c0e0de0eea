"""
Triangle meshes: isosurface extraction, regularizers, OBJ/PLY files and
surface sampling for chamfer evaluation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import mcubes
import numpy as np
import trimesh
from scipy.spatial import cKDTree

import autodiff as ad
from autodiff import Expr
from config import SMOOTH_MODES
from losses import weighted_sum


logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
REFINE_LOSS_NAMES = ("photo", "smooth", "offset")
MESH_FORMATS = ("obj", "ply")


@dataclass
class TriangleMesh:
    """
    Indexed triangle mesh.

    Attributes:
        vertices (np.ndarray): (n, 3) positions.
        faces (np.ndarray): (m, 3) vertex indices.
        offsets (np.ndarray): (n, 3) per-vertex offsets added on top of the vertices.
        colors (np.ndarray, optional): (n, 3) colours in [0, 1].
        features (np.ndarray, optional): (n, K) per-vertex specular features.
    """

    vertices: np.ndarray
    faces: np.ndarray
    offsets: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.offsets is None:
            self.offsets = np.zeros_like(self.vertices)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"Face indices out of range for {len(self.vertices)} vertices")
        if self.offsets.shape != self.vertices.shape:
            raise ValueError("Offsets must match the vertex array shape")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    @property
    def positions(self) -> np.ndarray:
        """Vertices with offsets applied."""
        return self.vertices + self.offsets

    def face_areas(self) -> np.ndarray:
        return face_areas(self.positions, self.faces)

    def face_normals(self) -> np.ndarray:
        """Unit normals following the counter-clockwise winding."""
        p = self.positions
        n = np.cross(p[self.faces[:, 1]] - p[self.faces[:, 0]], p[self.faces[:, 2]] - p[self.faces[:, 0]])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def neighbors(self) -> List[np.ndarray]:
        """Sorted neighbour indices S_i of every vertex."""
        pairs = directed_edges(self.faces)
        lists = [[] for _ in range(self.n_vertices)]
        for i, j in pairs:
            lists[i].append(j)
        return [np.array(sorted(set(items)), dtype=np.int64) for items in lists]

    def fold_offsets(self) -> "TriangleMesh":
        """Copy with offsets baked into the vertices and reset to zero."""
        return TriangleMesh(self.positions, self.faces.copy(), None, _copy(self.colors), _copy(self.features))

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(), self.faces.copy(), self.offsets.copy(), _copy(self.colors), _copy(self.features)
        )

    def transformed(self, scale: float, offset: np.ndarray) -> "TriangleMesh":
        """Map positions x to (x - offset) / scale, e.g. from the unit box back to scene units."""
        vertices = (self.positions - np.asarray(offset, dtype=np.float64)) / scale
        return TriangleMesh(vertices, self.faces.copy(), None, _copy(self.colors), _copy(self.features))


def _copy(array):
    return None if array is None else np.array(array, copy=True)


def face_areas(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = np.asarray(positions)
    cross = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def directed_edges(faces: np.ndarray) -> np.ndarray:
    """Unique (i, j) pairs, both directions, for every edge of the faces."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    both = np.concatenate([e, e[:, ::-1]])
    return np.unique(both, axis=0)


def edge_face_counts(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Undirected edges (sorted pairs) and how many faces use each."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def boundary_edges(faces: np.ndarray) -> np.ndarray:
    """Edges used by exactly one face; empty for a closed surface."""
    edges, counts = edge_face_counts(faces)
    return edges[counts == 1]


def non_manifold_edges(faces: np.ndarray) -> np.ndarray:
    """Edges shared by more than two faces."""
    edges, counts = edge_face_counts(faces)
    return edges[counts > 2]


def remove_degenerate_faces(mesh: TriangleMesh, min_area: float = DEGENERATE_AREA) -> TriangleMesh:
    """Drop faces with area below `min_area` or repeated indices, then unreferenced vertices."""
    faces = mesh.faces
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    keep = distinct & (face_areas(mesh.positions, faces) >= min_area)
    removed = int(np.sum(~keep))
    if removed:
        logger.debug(f"Removed {removed} degenerate faces")
    return compact(TriangleMesh(mesh.vertices, faces[keep], mesh.offsets, mesh.colors, mesh.features))


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop vertices no face references and renumber the faces."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.reshape(-1)] = True
    if np.all(used):
        return mesh
    remap = np.cumsum(used) - 1

    def pick(array):
        return None if array is None else array[used]

    return TriangleMesh(mesh.vertices[used], remap[mesh.faces], mesh.offsets[used], pick(mesh.colors), pick(mesh.features))


# ---------------------------------------------------------------------------
# Extraction


@dataclass
class ScalarGrid:
    """
    Field values on the lattice x_i = i / (R - 1) over [0, 1]^3.

    Attributes:
        values (np.ndarray): (R, R, R) samples indexed [i, j, k] -> (x_i, y_j, z_k).
        level (float): Iso-value of the surface.
    """

    values: np.ndarray
    level: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError(f"ScalarGrid values must be a cube, got shape {self.values.shape}")
        if self.values.shape[0] < 2:
            raise ValueError("ScalarGrid resolution must be at least 2")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ScalarGrid values must be finite")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def lattice_points(resolution: int) -> np.ndarray:
    """(R^3, 3) lattice coordinates in [i, j, k] order."""
    axis = np.linspace(0.0, 1.0, resolution)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1), zz.reshape(-1)], axis=1)


def sample_field_grid(model, resolution: int, alpha: Optional[float] = None, level: float = 0.0, chunk: int = 65536) -> ScalarGrid:
    """
    Sample a field's SDF on the (R, R, R) corner lattice of [0, 1]^3.

    Parameters:
        model: FieldModel, or any object with `sdf(points)`, or a callable.
        resolution (int): Lattice points per axis R >= 2.
        alpha (float, optional): Window progress passed to a FieldModel.
        level (float): Iso-value stored with the grid.
        chunk (int): Points evaluated per call.
    """
    if resolution < 2:
        raise ValueError(f"Grid resolution must be at least 2, got {resolution}")
    if callable(model) and not hasattr(model, "sdf"):
        query = model
    elif hasattr(model, "geo_encoder"):
        def query(points):
            return model.sdf(points, alpha)
    else:
        query = model.sdf

    axis = np.linspace(0.0, 1.0, resolution)
    values = np.empty((resolution, resolution, resolution))
    yy, zz = np.meshgrid(axis, axis, indexing="ij")
    slab = np.stack([yy.reshape(-1), zz.reshape(-1)], axis=1)
    rows_per_chunk = max(1, chunk // len(slab))
    for start in range(0, resolution, rows_per_chunk):
        xs = axis[start:start + rows_per_chunk]
        points = np.concatenate([np.column_stack([np.full(len(slab), x), slab]) for x in xs])
        values[start:start + len(xs)] = np.asarray(query(points)).reshape(len(xs), resolution, resolution)
    logger.debug(f"Sampled field on a {resolution}^3 lattice")
    return ScalarGrid(values=values, level=level)


def marching_cubes(grid: ScalarGrid) -> TriangleMesh:
    """
    Triangulate the iso-surface {f = level} of a lattice grid.

    Vertices are interpolated along lattice edges and scaled into [0, 1]^3.
    Faces are wound so normals point toward f > level. A grid without a sign
    change yields an empty mesh.
    """
    values = grid.values
    if not (np.any(values < grid.level) and np.any(values > grid.level)):
        logger.debug("No sign change in grid; empty mesh")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    vertices, triangles = mcubes.marching_cubes(values, grid.level)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    # winding check against the lattice gradient
    gradient = np.stack(np.gradient(values), axis=-1)
    centroids = vertices[faces].mean(axis=1)
    cells = np.clip(np.rint(centroids).astype(np.int64), 0, grid.resolution - 1)
    g = gradient[cells[:, 0], cells[:, 1], cells[:, 2]]
    normals = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
    if np.sum(np.einsum("ij,ij->i", normals, g)) < 0:
        faces = faces[:, ::-1].copy()

    mesh = TriangleMesh(vertices / (grid.resolution - 1), faces)
    mesh = remove_degenerate_faces(mesh)
    logger.info(f"Marching cubes at {grid.resolution}^3: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return mesh


# ---------------------------------------------------------------------------
# Regularizers


def smooth_loss(mesh: TriangleMesh, offsets=None, mode: str = "printed"):
    """
    Mean over vertices of (1/|S_i|) sum_{j in S_i} ||p_i - p_j||^2.

    In "printed" mode p = v + offsets; in "offset-laplacian" mode p = offsets
    only. Isolated vertices contribute 0. Returns an expression when `offsets`
    is one, otherwise a float.
    """
    if mode not in SMOOTH_MODES:
        raise ValueError(f"Unknown smooth mode '{mode}'; expected one of {SMOOTH_MODES}")
    symbolic = isinstance(offsets, Expr)
    offsets = mesh.offsets if offsets is None else offsets
    if mesh.n_vertices == 0:
        return ad.constant(0.0) if symbolic else 0.0
    positions = ad.as_expr(offsets) + mesh.vertices if mode == "printed" else ad.as_expr(offsets)

    pairs = directed_edges(mesh.faces)
    if len(pairs) == 0:
        return ad.constant(0.0) if symbolic else 0.0
    degree = np.bincount(pairs[:, 0], minlength=mesh.n_vertices).astype(np.float64)
    diff = positions[pairs[:, 0]] - positions[pairs[:, 1]]
    squared = ad.reduce_sum(diff * diff, axis=1)
    loss = ad.reduce_sum(squared * (1.0 / degree[pairs[:, 0]])) / float(mesh.n_vertices)
    return loss if symbolic else float(loss.value)


def offset_loss(offsets):
    """sum_i ||offset_i||^2."""
    symbolic = isinstance(offsets, Expr)
    o = ad.as_expr(offsets)
    loss = ad.reduce_sum(o * o)
    return loss if symbolic else float(loss.value)


def refine_total(parts: Sequence, weights: Sequence[float]):
    """lambda_photo L_photo + lambda_smooth L_smooth + lambda_offset L_offset."""
    return weighted_sum(parts, weights, REFINE_LOSS_NAMES)


# ---------------------------------------------------------------------------
# Files


def _format_of(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in MESH_FORMATS:
        raise ValueError(f"Unsupported mesh format '{fmt}'; expected one of {MESH_FORMATS}")
    return fmt


def export_mesh(mesh: TriangleMesh, path: Union[str, Path], fmt: Optional[str] = None):
    """
    Write a mesh (offsets applied) as OBJ or binary PLY through trimesh.

    Colours become uchar vertex colours; features are written as float32
    vertex properties spec_0..spec_{K-1}, which only PLY keeps.
    """
    path = Path(path)
    fmt = _format_of(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    export = trimesh.Trimesh(
        mesh.positions,
        mesh.faces,
        vertex_colors=_colors_to_uint8(mesh.colors),
        vertex_attributes=_features_to_attributes(mesh.features),
        process=False,
    )
    export.export(str(path), file_type=fmt)
    logger.info(f"Wrote {mesh.n_vertices} vertices / {mesh.n_faces} faces to {path}")


def _colors_to_uint8(colors: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if colors is None or len(colors) == 0:
        return None
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


def _features_to_attributes(features: Optional[np.ndarray]) -> dict:
    if features is None:
        return {}
    return {f"spec_{k}": features[:, k].astype(np.float32) for k in range(features.shape[1])}


def import_mesh(path: Union[str, Path], fmt: Optional[str] = None) -> TriangleMesh:
    """
    Read an OBJ or PLY mesh with trimesh, without merging or reordering.

    Polygons arrive triangulated. Vertex colours and spec_k properties are
    picked up when the file carries them.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: On content that cannot be parsed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mesh file not found: {path}")
    fmt = _format_of(path, fmt)
    try:
        loaded = trimesh.load(str(path), file_type=fmt, force="mesh", process=False)
    except Exception as e:
        raise ValueError(f"Cannot read mesh {path}: {e}") from e
    parts = loaded.geometry if isinstance(loaded, trimesh.Scene) else loaded
    if isinstance(loaded, (list, trimesh.Scene)) and len(parts) == 0:
        logger.warning(f"{path} holds no geometry")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not isinstance(loaded, trimesh.Trimesh):
        raise ValueError(f"Cannot read mesh {path}: no triangle geometry")

    colors = None
    if loaded.visual.kind == "vertex":
        colors = np.asarray(loaded.visual.vertex_colors[:, :3], dtype=np.float64) / 255.0
    return TriangleMesh(
        np.asarray(loaded.vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(loaded.faces, dtype=np.int64).reshape(-1, 3),
        colors=colors,
        features=_read_features(loaded),
    )


def _read_features(loaded: "trimesh.Trimesh") -> Optional[np.ndarray]:
    columns = dict(loaded.vertex_attributes)
    raw = loaded.metadata.get("_ply_raw", {}).get("vertex", {}).get("data")
    if raw is not None:
        names = raw.dtype.names if hasattr(raw, "dtype") else list(raw.keys())
        for name in names or ():
            columns.setdefault(name, raw[name])
    spec = sorted((n for n in columns if n.startswith("spec_")), key=lambda n: int(n.split("_")[1]))
    if not spec:
        return None
    return np.stack([np.asarray(columns[n], dtype=np.float64).reshape(-1) for n in spec], axis=1)


# ---------------------------------------------------------------------------
# Surface sampling and chamfer


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform points on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("Cannot sample the surface of an empty mesh")
    positions = mesh.positions
    areas = face_areas(positions, mesh.faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("Cannot sample a mesh with zero surface area")
    chosen = rng.choice(mesh.n_faces, size=n, p=areas / total)
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    tri = positions[mesh.faces[chosen]]
    return tri[:, 0] + u * (tri[:, 1] - tri[:, 0]) + v * (tri[:, 2] - tri[:, 0])


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """
    Bidirectional chamfer distance with squared nearest-neighbour distances:
    0.5 * (mean_a min_b ||a - b||^2 + mean_b min_a ||a - b||^2).

    Raises:
        ValueError: If either set is empty.
    """
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (np.mean(d_ab ** 2) + np.mean(d_ba ** 2)))
