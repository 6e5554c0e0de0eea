"""
Stage 2: photometric refinement of an extracted mesh.

Rays from the training cameras are intersected with the offset mesh through a
BVH. The hit point o + t v depends on the three vertices of the hit face via
the Moller-Trumbore relations, so the photometric error of the colour shaded
there back-propagates into per-vertex offsets. Faces that keep rendering badly
are subdivided, faces that render well are collapsed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Expr, ParamBlock
from config import RefineConfig, make_rng
from errors import NumericalError
from losses import photometric_loss
from mesh import TriangleMesh, compact, offset_loss, refine_total, remove_degenerate_faces, smooth_loss
from optim import RowAdamW, lr_at
from renderer import Camera, generate_rays


logger = logging.getLogger(__name__)

LEAF_SIZE = 8
PARALLEL_EPS = 1e-14
HIT_EPS = 1e-9
GRAZING_COS = 0.25
BACKGROUND_TOL = 0.5 / 255.0

LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI_CIVITA[_i, _j, _k] = 1.0
    LEVI_CIVITA[_i, _k, _j] = -1.0


# ---------------------------------------------------------------------------
# BVH


class BVH:
    """
    Flattened bounding-volume hierarchy over triangles.

    Nodes are stored depth-first: the first child of node n is n + 1, the
    second child is `second_child[n]`. Leaves reference `count[n]` triangles
    starting at `first[n]` in `order`.

    Parameters:
        positions (np.ndarray): (n, 3) vertex positions.
        faces (np.ndarray): (m, 3) triangles.
        leaf_size (int): Maximum triangles per leaf.
    """

    def __init__(self, positions: np.ndarray, faces: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.leaf_size = leaf_size
        triangles = np.asarray(positions, dtype=np.float64)[self.faces]
        centroids = triangles.mean(axis=1)

        self.order = np.arange(len(self.faces))
        box_min, box_max, first, count, second = [], [], [], [], []

        def build(start: int, end: int):
            node = len(first)
            idx = self.order[start:end]
            box_min.append(triangles[idx].min(axis=(0, 1)) if len(idx) else np.zeros(3))
            box_max.append(triangles[idx].max(axis=(0, 1)) if len(idx) else np.zeros(3))
            first.append(start)
            count.append(end - start)
            second.append(-1)
            if end - start <= leaf_size:
                return node
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            sorted_idx = idx[np.argsort(c[:, axis], kind="stable")]
            self.order[start:end] = sorted_idx
            mid = (start + end) // 2
            count[node] = 0
            build(start, mid)
            second[node] = build(mid, end)
            return node

        if len(self.faces):
            build(0, len(self.faces))
        self.box_min = np.array(box_min).reshape(-1, 3)
        self.box_max = np.array(box_max).reshape(-1, 3)
        self.first = np.array(first, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.second_child = np.array(second, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.first)

    def refit(self, positions: np.ndarray):
        """Recompute node boxes for moved vertices, keeping the topology."""
        triangles = np.asarray(positions, dtype=np.float64)[self.faces]
        for node in range(self.n_nodes - 1, -1, -1):
            if self.count[node] > 0:
                idx = self.order[self.first[node]:self.first[node] + self.count[node]]
                self.box_min[node] = triangles[idx].min(axis=(0, 1))
                self.box_max[node] = triangles[idx].max(axis=(0, 1))
            else:
                left, right = node + 1, self.second_child[node]
                self.box_min[node] = np.minimum(self.box_min[left], self.box_min[right])
                self.box_max[node] = np.maximum(self.box_max[left], self.box_max[right])

    def candidates(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        (ray, face) pairs whose leaf boxes the rays cross.

        All rays descend the tree together, one level per iteration.
        """
        if self.n_nodes == 0 or len(origins) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        with np.errstate(divide="ignore"):
            inverse = 1.0 / directions
        rays = np.arange(len(origins))
        nodes = np.zeros(len(origins), dtype=np.int64)
        hit_rays, hit_faces = [], []
        while len(rays):
            keep = _slab_test(origins[rays], inverse[rays], self.box_min[nodes], self.box_max[nodes])
            rays, nodes = rays[keep], nodes[keep]
            leaf = self.count[nodes] > 0
            if np.any(leaf):
                leaf_rays, leaf_nodes = rays[leaf], nodes[leaf]
                counts = self.count[leaf_nodes]
                repeated = np.repeat(leaf_rays, counts)
                starts = np.repeat(self.first[leaf_nodes], counts)
                within = np.arange(len(repeated)) - np.repeat(np.cumsum(counts) - counts, counts)
                hit_rays.append(repeated)
                hit_faces.append(self.order[starts + within])
            inner_rays, inner_nodes = rays[~leaf], nodes[~leaf]
            rays = np.concatenate([inner_rays, inner_rays])
            nodes = np.concatenate([inner_nodes + 1, self.second_child[inner_nodes]])
        if not hit_rays:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(hit_rays), np.concatenate(hit_faces)


def _slab_test(origins, inverse, box_min, box_max) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        t0 = (box_min - origins) * inverse
        t1 = (box_max - origins) * inverse
    t_near = np.nanmax(np.fmin(t0, t1), axis=1)
    t_far = np.nanmin(np.fmax(t0, t1), axis=1)
    return t_far >= np.maximum(t_near, 0.0)


# ---------------------------------------------------------------------------
# Intersection


@dataclass
class MeshHits:
    """
    Nearest intersections of a ray batch.

    Attributes:
        face (np.ndarray): Hit face per ray, -1 for a miss.
        barycentric (np.ndarray): (N, 3) weights of the hit face's vertices.
        t (np.ndarray): Ray parameter of the hit, inf for a miss.
    """

    face: np.ndarray
    barycentric: np.ndarray
    t: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.face >= 0


def moller_trumbore(origins, directions, v0, v1, v2):
    """Batched ray/triangle test; returns (u, v, t, valid) with barycentric (1-u-v, u, v)."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(directions, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > PARALLEL_EPS
    inverse = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins - v0
    u = np.einsum("ij,ij->i", s, p) * inverse
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", directions, q) * inverse
    t = np.einsum("ij,ij->i", e2, q) * inverse
    valid = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > HIT_EPS)
    return u, v, t, valid


def ray_mesh_intersect(
    positions: np.ndarray,
    faces: np.ndarray,
    origins: np.ndarray,
    directions: np.ndarray,
    bvh: Optional[BVH] = None,
) -> MeshHits:
    """
    Nearest hit of every ray with the mesh (positions with offsets applied).

    Parameters:
        positions (np.ndarray): (n, 3) vertex positions.
        faces (np.ndarray): (m, 3) triangles.
        origins, directions (np.ndarray): (N, 3) rays; directions are unit vectors.
        bvh (BVH, optional): Prebuilt hierarchy over the same faces.

    Returns:
        MeshHits: Face ids (-1 on miss), barycentric weights and hit distances.
    """
    positions = np.asarray(positions, dtype=np.float64)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(origins)
    result = MeshHits(np.full(n, -1, dtype=np.int64), np.zeros((n, 3)), np.full(n, np.inf))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0 or n == 0:
        return result
    bvh = bvh or BVH(positions, faces)
    rays, cand = bvh.candidates(origins, directions)
    if len(rays) == 0:
        return result

    tri = positions[faces[cand]]
    u, v, t, valid = moller_trumbore(origins[rays], directions[rays], tri[:, 0], tri[:, 1], tri[:, 2])
    rays, cand, u, v, t = rays[valid], cand[valid], u[valid], v[valid], t[valid]
    if len(rays) == 0:
        return result
    order = np.lexsort((cand, t, rays))
    rays, cand, u, v, t = rays[order], cand[order], u[order], v[order], t[order]
    first = np.ones(len(rays), dtype=bool)
    first[1:] = rays[1:] != rays[:-1]
    r = rays[first]
    result.face[r] = cand[first]
    result.t[r] = t[first]
    result.barycentric[r] = np.stack([1.0 - u[first] - v[first], u[first], v[first]], axis=1)
    return result


def cross_expr(a, b) -> Expr:
    return ad.einsum("ijk,nj,nk->ni", LEVI_CIVITA, a, b)


def _dot_expr(a, b) -> Expr:
    return ad.reduce_sum(ad.as_expr(a) * b, axis=1)


def intersection_expr(positions, faces: np.ndarray, face_ids: np.ndarray, origins: np.ndarray, directions: np.ndarray):
    """
    Differentiable hit distance and barycentric weights for known hit faces.

    Parameters:
        positions: (n, 3) vertex positions as an expression (e.g. vertices + offsets).
        faces (np.ndarray): (m, 3) triangles.
        face_ids (np.ndarray): Hit face of each ray (all valid).
        origins, directions (np.ndarray): (H, 3) rays.

    Returns:
        tuple: (t (H,), barycentric (H, 3)) expressions.
    """
    positions = ad.as_expr(positions)
    corners = np.asarray(faces, dtype=np.int64)[face_ids]
    v0 = positions[corners[:, 0]]
    e1 = positions[corners[:, 1]] - v0
    e2 = positions[corners[:, 2]] - v0
    p = cross_expr(directions, e2)
    det = _dot_expr(e1, p)
    s = -v0 + origins
    q = cross_expr(s, e1)
    u = _dot_expr(s, p) / det
    v = _dot_expr(q, directions) / det
    t = _dot_expr(e2, q) / det
    weights = ad.stack([1.0 - u - v, u, v], axis=1)
    return t, weights


# ---------------------------------------------------------------------------
# Topology edits


def subdivide_faces(mesh: TriangleMesh, selected: np.ndarray) -> TriangleMesh:
    """
    Midpoint 1-to-4 split of the selected faces.

    Neighbouring faces that share a split edge are split into 2 or 3 so no
    T-junctions remain. Offsets must already be folded into the vertices.
    """
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == 0:
        return mesh
    vertices = list(mesh.vertices)
    colors = None if mesh.colors is None else list(mesh.colors)
    features = None if mesh.features is None else list(mesh.features)
    midpoint: Dict[Tuple[int, int], int] = {}

    def split(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in midpoint:
            midpoint[key] = len(vertices)
            vertices.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
            if colors is not None:
                colors.append(0.5 * (mesh.colors[a] + mesh.colors[b]))
            if features is not None:
                features.append(0.5 * (mesh.features[a] + mesh.features[b]))
        return midpoint[key]

    for f in selected:
        a, b, c = mesh.faces[f]
        split(a, b), split(b, c), split(c, a)

    new_faces = []
    for a, b, c in mesh.faces:
        ab = midpoint.get((min(a, b), max(a, b)))
        bc = midpoint.get((min(b, c), max(b, c)))
        ca = midpoint.get((min(c, a), max(c, a)))
        count = sum(m is not None for m in (ab, bc, ca))
        if count == 0:
            new_faces.append((a, b, c))
        elif count == 3:
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        elif count == 1:
            # rotate so the split edge is (x, y)
            for x, y, z, m in ((a, b, c, ab), (b, c, a, bc), (c, a, b, ca)):
                if m is not None:
                    new_faces += [(x, m, z), (m, y, z)]
        else:
            # two split edges: the unsplit one is (y, z)
            for x, y, z, m_xy, m_zx in ((a, b, c, ab, ca), (b, c, a, bc, ab), (c, a, b, ca, bc)):
                if m_xy is not None and m_zx is not None:
                    new_faces += [(x, m_xy, m_zx), (m_xy, y, z), (m_xy, z, m_zx)]
    return TriangleMesh(
        np.array(vertices),
        np.array(new_faces, dtype=np.int64),
        colors=None if colors is None else np.array(colors),
        features=None if features is None else np.array(features),
    )


def collapse_edges(mesh: TriangleMesh, selected: np.ndarray, min_faces: int = 4) -> TriangleMesh:
    """
    Collapse the shortest edge of each selected face to its midpoint.

    An edge (i, j) is collapsed only when i and j share exactly two neighbours
    (the link condition of a manifold interior edge), no surrounding face
    flips, and neither endpoint was touched by another collapse this round.
    """
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == 0:
        return mesh
    vertices = mesh.vertices.copy()
    faces = mesh.faces.copy()
    neighbours = [set(s.tolist()) for s in mesh.neighbors()]
    vertex_faces: List[set] = [set() for _ in range(mesh.n_vertices)]
    for f, tri in enumerate(faces):
        for v in tri:
            vertex_faces[v].add(f)

    alive = np.ones(len(faces), dtype=bool)
    locked = np.zeros(mesh.n_vertices, dtype=bool)
    collapsed = 0
    for f in selected:
        if alive.sum() - 2 < min_faces:
            break
        if not alive[f]:
            continue
        tri = faces[f]
        edges = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
        lengths = [np.linalg.norm(vertices[a] - vertices[b]) for a, b in edges]
        i, j = edges[int(np.argmin(lengths))]
        if locked[i] or locked[j] or len(neighbours[i] & neighbours[j]) != 2:
            continue
        target = 0.5 * (vertices[i] + vertices[j])
        ring = (vertex_faces[i] | vertex_faces[j]) - (vertex_faces[i] & vertex_faces[j])
        if _flips(vertices, faces, ring, (i, j), target):
            continue

        for g in vertex_faces[i] & vertex_faces[j]:
            alive[g] = False
        for g in vertex_faces[j]:
            if alive[g]:
                faces[g][faces[g] == j] = i
                vertex_faces[i].add(g)
        vertex_faces[i] -= {g for g in vertex_faces[i] if not alive[g]}
        vertices[i] = target
        for k in neighbours[j] - {i}:
            neighbours[k].discard(j)
            neighbours[k].add(i)
        neighbours[i] = (neighbours[i] | neighbours[j]) - {i, j}
        neighbours[j] = set()
        vertex_faces[j] = set()
        locked[list(neighbours[i] | {i, j})] = True
        collapsed += 1

    logger.debug(f"Collapsed {collapsed} edges")
    result = TriangleMesh(vertices, faces[alive], colors=mesh.colors, features=mesh.features)
    return compact(result)


def _flips(vertices, faces, ring, pair, target) -> bool:
    """True if moving the pair to `target` reverses or degenerates a surrounding face."""
    i, j = pair
    for g in ring:
        tri = faces[g]
        before = vertices[tri]
        after = before.copy()
        after[(tri == i) | (tri == j)] = target
        n0 = np.cross(before[1] - before[0], before[2] - before[0])
        n1 = np.cross(after[1] - after[0], after[2] - after[0])
        if np.dot(n0, n1) <= 0.0:
            return True
    return False


def adapt_topology(mesh: TriangleMesh, face_error: np.ndarray, config: RefineConfig) -> TriangleMesh:
    """Subdivide the highest-error faces, then collapse edges of the lowest-error ones."""
    observed = np.nonzero(np.isfinite(face_error))[0]
    if len(observed) == 0:
        return mesh
    ranked = observed[np.argsort(face_error[observed], kind="stable")]
    n_split = int(np.floor(config.subdivide_quantile * len(ranked)))
    n_merge = int(np.floor(config.decimate_quantile * len(ranked)))
    worst = ranked[len(ranked) - n_split:] if n_split else np.zeros(0, dtype=np.int64)
    best = ranked[:n_merge]

    merged = collapse_edges(mesh, np.setdiff1d(best, worst, assume_unique=True))
    # face ids changed; map the split set by centroid lookup on the merged mesh
    if n_split:
        centroids = mesh.vertices[mesh.faces[worst]].mean(axis=1)
        merged_centroids = merged.vertices[merged.faces].mean(axis=1)
        picks = [int(np.argmin(np.sum((merged_centroids - c) ** 2, axis=1))) for c in centroids]
        merged = subdivide_faces(merged, np.unique(picks))
    result = remove_degenerate_faces(merged)
    logger.info(
        f"Topology round: split {n_split}, collapse candidates {n_merge}; "
        f"{mesh.n_faces} -> {result.n_faces} faces"
    )
    return result


# ---------------------------------------------------------------------------
# Refinement loop


@dataclass
class RefineResult:
    """Refined mesh (offsets folded) and the per-step loss log."""

    mesh: TriangleMesh
    history: List[Tuple[int, float, float, float, float]] = field(default_factory=list)
    reverted: bool = False


def _appearance_colors(model, points: Expr, directions: np.ndarray, alpha):
    sample = model.appearance_expr(ad.clip(points, 0.0, 1.0), directions, alpha)
    return sample.c


def refine_mesh(
    mesh: TriangleMesh,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    model,
    config: Optional[RefineConfig] = None,
    near: float = 0.0,
    far: float = 10.0,
    alpha: Optional[float] = None,
) -> RefineResult:
    """
    Optimize per-vertex offsets against the training images.

    Only driving rays move vertices: rays that hit the mesh at an incidence
    cosine of at least GRAZING_COS and whose target pixel is not the
    background colour. Other hits are shaded with their hit point held fixed.
    Each step updates the offsets of the vertices of driven faces only; the
    rest keep their values and optimizer moments.

    Parameters:
        mesh (TriangleMesh): Extracted mesh in the unit box.
        cameras (Sequence[Camera]): Cameras with refined poses.
        images (Sequence[np.ndarray]): Target images, one per camera.
        model: Appearance provider with `appearance_expr(x, v, alpha)`.
        config (RefineConfig, optional): Loop settings.
        near, far (float): Ray bounds used for ray generation.
        alpha (float, optional): Window progress passed to the model.

    Returns:
        RefineResult: Mesh with offsets folded into the vertices.
    """
    config = config or RefineConfig()
    config.validate()
    if mesh.is_empty:
        logger.warning("Refinement skipped: empty mesh")
        return RefineResult(mesh.copy())
    if len(cameras) != len(images):
        raise ValueError(f"Got {len(cameras)} cameras but {len(images)} images")
    rng = make_rng(config.seed, "refine")
    background = np.asarray(config.background, dtype=np.float64)
    weights = (config.lambda_photo, config.lambda_smooth, config.lambda_offset)

    current = mesh.fold_offsets()
    snapshot = current.copy()
    offsets, optimizer, bvh = _fresh_offsets(current)
    face_sum = np.zeros(current.n_faces)
    face_count = np.zeros(current.n_faces)
    rounds = 0
    result = RefineResult(current)

    for step in range(1, config.iterations + 1):
        origins, directions, targets = _sample_rays(cameras, images, config.rays_per_batch, near, far, rng)
        positions = current.vertices + offsets.values
        bvh.refit(positions)
        hits = ray_mesh_intersect(positions, current.faces, origins, directions, bvh)
        driving, passive = _split_hits(positions, current.faces, hits, directions, targets, background)

        offset_expr = ad.param(offsets)
        position_expr = offset_expr + current.vertices
        parts_color = []
        if np.any(driving):
            t, _ = intersection_expr(
                position_expr, current.faces, hits.face[driving], origins[driving], directions[driving]
            )
            points = ad.reshape(t, (-1, 1)) * directions[driving] + origins[driving]
            parts_color.append(_appearance_colors(model, points, directions[driving], alpha))
        if np.any(passive):
            fixed = origins[passive] + hits.t[passive][:, None] * directions[passive]
            parts_color.append(_appearance_colors(model, ad.constant(fixed), directions[passive], alpha))
        missed = ~hits.hit
        if np.any(missed):
            parts_color.append(ad.constant(np.tile(background, (int(np.sum(missed)), 1))))
        rendered = ad.concat(parts_color, axis=0) if len(parts_color) > 1 else parts_color[0]
        ordered_targets = np.concatenate([targets[driving], targets[passive], targets[missed]])

        try:
            parts = [
                photometric_loss(rendered, ordered_targets),
                smooth_loss(current, offset_expr, config.smooth_mode),
                offset_loss(offset_expr),
            ]
            loss = refine_total(parts, weights)
        except NumericalError as e:
            logger.warning(f"Refinement step {step}: {e}; reverting to the last topology snapshot")
            result.mesh = snapshot.copy()
            result.reverted = True
            return result

        optimizer.zero_grad()
        ad.backward(loss)
        lr = lr_at(step - 1, config.iterations, config.lr, config.lr_end)
        optimizer.step(lr, np.unique(current.faces[hits.face[driving]]))

        shaded = driving | passive
        if np.any(shaded):
            n_shaded = int(np.sum(shaded))
            shaded_faces = np.concatenate([hits.face[driving], hits.face[passive]])
            shaded_targets = ordered_targets[:n_shaded]
            errors = np.sum((rendered.value[:n_shaded] - shaded_targets) ** 2, axis=1)
            np.add.at(face_sum, shaded_faces, errors)
            np.add.at(face_count, shaded_faces, 1.0)

        values = [float(p.value) for p in parts]
        result.history.append((step, float(loss.value), *values))
        if step % config.log_every == 0:
            logger.info(
                f"refine step {step}/{config.iterations} loss {float(loss.value):.6f} "
                f"photo {values[0]:.6f} driving rays {int(np.sum(driving))} lr {lr:.2e} faces {current.n_faces}"
            )

        if step % config.topology_every == 0 and rounds < config.topology_rounds and step < config.iterations:
            folded = TriangleMesh(current.vertices + offsets.values, current.faces, colors=current.colors)
            with np.errstate(invalid="ignore", divide="ignore"):
                face_error = np.where(face_count > 0, face_sum / face_count, np.nan)
            current = adapt_topology(folded, face_error, config)
            snapshot = current.copy()
            offsets, optimizer, bvh = _fresh_offsets(current)
            face_sum = np.zeros(current.n_faces)
            face_count = np.zeros(current.n_faces)
            rounds += 1

    result.mesh = TriangleMesh(current.vertices + offsets.values, current.faces, colors=current.colors)
    logger.info(f"Refinement done: {result.mesh.n_vertices} vertices, {result.mesh.n_faces} faces")
    return result


def _split_hits(positions, faces, hits: MeshHits, directions, targets, background):
    """Boolean masks (driving, passive) over the ray batch; misses are in neither."""
    hit = hits.hit
    cosine = np.zeros(len(hit))
    if np.any(hit):
        tri = positions[faces[hits.face[hit]]]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        lengths = np.linalg.norm(normals, axis=1) * np.linalg.norm(directions[hit], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosine[hit] = np.abs(np.einsum("ij,ij->i", normals, directions[hit])) / lengths
        cosine[hit] = np.nan_to_num(cosine[hit], nan=0.0)
    background_target = np.all(np.abs(targets - background) <= BACKGROUND_TOL, axis=1)
    driving = hit & ~background_target & (cosine >= GRAZING_COS)
    return driving, hit & ~driving


def _fresh_offsets(mesh: TriangleMesh):
    offsets = ParamBlock(np.zeros_like(mesh.vertices), name="mesh.offsets")
    return offsets, RowAdamW(offsets, name="refine"), BVH(mesh.vertices, mesh.faces)


def _sample_rays(cameras, images, count, near, far, rng):
    camera_ids = rng.integers(0, len(cameras), size=count)
    origins = np.empty((count, 3))
    directions = np.empty((count, 3))
    targets = np.empty((count, 3))
    for cam_id in np.unique(camera_ids):
        rows = np.nonzero(camera_ids == cam_id)[0]
        camera = cameras[int(cam_id)]
        cols = rng.integers(0, camera.width, size=len(rows))
        lines = rng.integers(0, camera.height, size=len(rows))
        rays = generate_rays(camera, np.stack([cols, lines], axis=1), near, far)
        origins[rows] = rays.origins
        directions[rows] = rays.directions
        targets[rows] = images[int(cam_id)][lines, cols]
    return origins, directions, targets


# ---------------------------------------------------------------------------
# Baking


def bake_vertex_colors(mesh: TriangleMesh, model, alpha: Optional[float] = None, with_features: bool = False) -> TriangleMesh:
    """
    Store the diffuse colour c_d at every vertex, clamped to [0, 1].

    With `with_features`, the specular feature vector f_s is stored as well.
    """
    positions = np.clip(mesh.positions, 0.0, 1.0)
    if len(positions) == 0:
        return mesh.copy()
    colors, features = model.diffuse(positions, alpha)
    baked = mesh.fold_offsets()
    baked.colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    baked.features = np.asarray(features, dtype=np.float64) if with_features else None
    logger.debug(f"Baked colours for {len(positions)} vertices")
    return baked
