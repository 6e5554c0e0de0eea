"""
SE(3) / so(3) helpers: exponential maps, pose corrections and pose errors.

Camera poses are camera-to-world transforms [R | t]. A correction is a
6-vector xi = (omega, rho) in se(3); the refined pose is exp(xi) * [R | t].
The numeric functions here work on plain numpy arrays; `refine_poses_expr`
builds the same composition as a differentiable expression for training.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

import autodiff as ad


logger = logging.getLogger(__name__)

# Below this rotation angle the so(3) coefficients come from their Taylor series.
SERIES_THRESHOLD = 0.1

# hat(e_k) for k = x, y, z.
SO3_GENERATORS = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])


@dataclass
class CameraPose:
    """
    A camera-to-world rigid transform with its trainable correction.

    Attributes:
        R (np.ndarray): 3x3 rotation.
        t (np.ndarray): Translation (camera center in world coordinates).
        correction (np.ndarray): se(3) 6-vector (omega, rho), zero at start.
    """

    R: np.ndarray
    t: np.ndarray
    correction: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def matrix(self) -> np.ndarray:
        return compose(self.R, self.t)


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of one 3-vector or a batch of them."""
    omega = np.asarray(omega, dtype=np.float64)
    return np.einsum("...k,kij->...ij", omega, SO3_GENERATORS)


def so3_coefficients(theta_sq: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rodrigues coefficients as functions of u = theta^2.

    Returns:
        tuple: A = sin(t)/t, B = (1 - cos(t))/t^2, C = (t - sin(t))/t^3.
    """
    u = np.asarray(theta_sq, dtype=np.float64)
    small = u < SERIES_THRESHOLD ** 2
    theta = np.sqrt(np.where(small, 1.0, u))
    sin, cos = np.sin(theta), np.cos(theta)

    a = np.where(small, 1.0 - u / 6.0 + u * u / 120.0 - u ** 3 / 5040.0, sin / theta)
    b = np.where(small, 0.5 - u / 24.0 + u * u / 720.0 - u ** 3 / 40320.0, (1.0 - cos) / theta ** 2)
    c = np.where(small, 1.0 / 6.0 - u / 120.0 + u * u / 5040.0 - u ** 3 / 362880.0, (theta - sin) / theta ** 3)
    return a, b, c


def so3_coefficient_derivatives(theta_sq: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Derivatives dA/du, dB/du, dC/du with u = theta^2."""
    u = np.asarray(theta_sq, dtype=np.float64)
    small = u < SERIES_THRESHOLD ** 2
    theta = np.sqrt(np.where(small, 1.0, u))
    sin, cos = np.sin(theta), np.cos(theta)

    da = np.where(
        small,
        -1.0 / 6.0 + u / 60.0 - u * u / 1680.0,
        (theta * cos - sin) / (2.0 * theta ** 3),
    )
    db = np.where(
        small,
        -1.0 / 24.0 + u / 360.0 - u * u / 13440.0,
        (theta * sin - 2.0 + 2.0 * cos) / (2.0 * theta ** 4),
    )
    dc = np.where(
        small,
        -1.0 / 120.0 + u / 2520.0 - u * u / 120960.0,
        ((1.0 - cos) * theta - 3.0 * theta + 3.0 * sin) / (2.0 * theta ** 5),
    )
    return da, db, dc


class SO3CoefficientsOp(ad.Op):
    """(N,) squared angles -> (N, 3) columns [A, B, C]."""

    kind = "elementwise"

    def forward(self, theta_sq):
        return np.stack(so3_coefficients(theta_sq), axis=-1)

    def backward(self, grad, out, theta_sq):
        derivs = np.stack(so3_coefficient_derivatives(theta_sq), axis=-1)
        return (np.sum(grad * derivs, axis=-1),)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """
    Rotation matrix exp(hat(omega)) via Rodrigues' formula.

    Accepts one 3-vector or an (N, 3) batch.
    """
    omega = np.asarray(omega, dtype=np.float64)
    a, b, _ = so3_coefficients(np.sum(omega * omega, axis=-1))
    k = hat(omega)
    eye = np.eye(3)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def left_jacobian(omega: np.ndarray) -> np.ndarray:
    """The SO(3) left Jacobian V(omega) used for the se(3) translation block."""
    omega = np.asarray(omega, dtype=np.float64)
    _, b, c = so3_coefficients(np.sum(omega * omega, axis=-1))
    k = hat(omega)
    return np.eye(3) + b[..., None, None] * k + c[..., None, None] * (k @ k)


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """
    4x4 rigid transform exp(hat(xi)) for xi = (omega, rho).

    The rotation block is so3_exp(omega) and the translation is V(omega) rho.
    """
    xi = np.asarray(xi, dtype=np.float64)
    omega, rho = xi[..., :3], xi[..., 3:]
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = so3_exp(omega)
    out[..., :3, 3] = np.einsum("...ij,...j->...i", left_jacobian(omega), rho)
    out[..., 3, 3] = 1.0
    return out


def compose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Stack rotation(s) and translation(s) into 4x4 transform(s)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(R.shape[:-2] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def refined_pose(pose: CameraPose) -> np.ndarray:
    """exp(correction) * [R | t] as a 4x4 matrix; the identity map for a zero correction."""
    correction = np.asarray(pose.correction, dtype=np.float64)
    if not np.any(correction):
        return pose.matrix()
    return se3_exp(correction) @ pose.matrix()


def refine_poses_expr(xi: ad.Expr, R: np.ndarray, t: np.ndarray) -> Tuple[ad.Expr, ad.Expr]:
    """
    Differentiable refined rotations and translations for a batch of poses.

    Parameters:
        xi (Expr): (N, 6) corrections.
        R (np.ndarray): (N, 3, 3) base rotations.
        t (np.ndarray): (N, 3) base translations.

    Returns:
        tuple: (R_refined (N, 3, 3), t_refined (N, 3)) expressions.
    """
    n = np.shape(R)[0]
    omega = xi[:, :3]
    rho = xi[:, 3:]
    coefficients = ad.apply(SO3CoefficientsOp(), ad.reduce_sum(omega * omega, axis=1))
    a = ad.reshape(coefficients[:, 0], (n, 1, 1))
    b = ad.reshape(coefficients[:, 1], (n, 1, 1))
    c = ad.reshape(coefficients[:, 2], (n, 1, 1))

    k = ad.einsum("nk,kij->nij", omega, SO3_GENERATORS)
    k2 = ad.matmul(k, k)
    eye = np.eye(3)
    rotation = eye + a * k + b * k2
    jacobian = eye + b * k + c * k2

    refined_R = ad.matmul(rotation, np.asarray(R, dtype=np.float64))
    refined_t = ad.einsum("nij,nj->ni", rotation, np.asarray(t, dtype=np.float64)) + ad.einsum(
        "nij,nj->ni", jacobian, rho
    )
    return refined_R, refined_t


def apply_corrections(R: np.ndarray, t: np.ndarray, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Numeric counterpart of refine_poses_expr."""
    xi = np.asarray(xi, dtype=np.float64)
    correction = se3_exp(xi)
    refined_R = correction[:, :3, :3] @ R
    refined_t = np.einsum("nij,nj->ni", correction[:, :3, :3], t) + correction[:, :3, 3]
    return refined_R, refined_t


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotations in degrees; works on batches."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    trace = np.einsum("...ji,...ji->...", Ra, Rb)
    cosine = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(cosine))


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to M in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ S @ Vt


@dataclass
class AlignmentResult:
    """
    Similarity alignment of an estimated camera set onto ground truth.

    Attributes:
        scale (float): Similarity scale (1 when degenerate).
        rotation (np.ndarray): 3x3 alignment rotation.
        translation (np.ndarray): Alignment translation.
        rotation_errors_deg (np.ndarray): Per-camera aligned rotation errors.
        translation_errors (np.ndarray): Per-camera aligned center errors in scene units.
        degenerate (bool): True when the centers are collinear and no scale was fitted.
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rotation_errors_deg: np.ndarray
    translation_errors: np.ndarray
    degenerate: bool = False

    @property
    def mean_rotation_error(self) -> float:
        return float(np.mean(self.rotation_errors_deg))

    @property
    def mean_translation_error(self) -> float:
        return float(np.mean(self.translation_errors))


def align_trajectories(
    est_R: np.ndarray, est_t: np.ndarray, gt_R: np.ndarray, gt_t: np.ndarray
) -> AlignmentResult:
    """
    Least-squares similarity alignment of estimated camera centers onto ground truth.

    Parameters:
        est_R, est_t: Estimated camera-to-world rotations (N, 3, 3) and centers (N, 3).
        gt_R, gt_t: Ground-truth rotations and centers.

    Returns:
        AlignmentResult: Alignment and per-camera errors after alignment.

    Raises:
        ValueError: If the lists differ in length or hold fewer than 3 cameras.
    """
    est_R, est_t = np.asarray(est_R, dtype=np.float64), np.asarray(est_t, dtype=np.float64)
    gt_R, gt_t = np.asarray(gt_R, dtype=np.float64), np.asarray(gt_t, dtype=np.float64)
    if len(est_R) != len(gt_R) or len(est_t) != len(gt_t) or len(est_R) != len(est_t):
        raise ValueError("Estimated and ground-truth pose lists must have equal length")
    if len(est_R) < 3:
        raise ValueError(f"Trajectory alignment needs at least 3 cameras, got {len(est_R)}")

    mu_est = est_t.mean(axis=0)
    mu_gt = gt_t.mean(axis=0)
    est_c = est_t - mu_est
    gt_c = gt_t - mu_gt

    spread = np.linalg.svd(est_c, compute_uv=False)
    degenerate = spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]

    if degenerate:
        logger.warning("Camera centers are collinear; aligning without scale")
        rotation = project_to_rotation(np.einsum("nij,nkj->ik", gt_R, est_R))
        scale = 1.0
    else:
        covariance = gt_c.T @ est_c / len(est_t)
        U, D, Vt = np.linalg.svd(covariance)
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        rotation = U @ S @ Vt
        variance = np.mean(np.sum(est_c ** 2, axis=1))
        scale = float(np.trace(np.diag(D) @ S) / variance)

    translation = mu_gt - scale * rotation @ mu_est
    aligned_R = np.einsum("ij,njk->nik", rotation, est_R)
    aligned_t = scale * est_t @ rotation.T + translation

    return AlignmentResult(
        scale=scale,
        rotation=rotation,
        translation=translation,
        rotation_errors_deg=rotation_error_deg(aligned_R, gt_R),
        translation_errors=np.linalg.norm(aligned_t - gt_t, axis=1),
        degenerate=bool(degenerate),
    )
