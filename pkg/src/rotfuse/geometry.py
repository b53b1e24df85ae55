"""SO(3) helpers and the normalized-camera rotation algebra.

Rotations are plain ``(3, 3)`` float64 arrays. Functions that accept
user-supplied rotations validate them with :func:`check_rotation`;
functions that build rotations internally hold them to ``CONSTRUCT_TOL``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONSTRUCT_TOL = 1e-9
INPUT_TOL = 1e-6
UNIT_TOL = 1e-6


class InvalidRotation(ValueError):
    pass


class InconsistentRig(ValueError):
    pass


class NotUnit(ValueError):
    pass


class Singular(ValueError):
    pass


def rotation_residual(m) -> float:
    """Frobenius norm of ``m m^T - I``."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.linalg.norm(m @ m.T - np.eye(3)))


def is_rotation(m, tol: float = CONSTRUCT_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return rotation_residual(m) < tol and abs(np.linalg.det(m) - 1.0) <= tol


def check_rotation(m, tol: float = INPUT_TOL, name: str = "rotation") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if not is_rotation(arr, tol):
        raise InvalidRotation(f"{name} is not a proper rotation (tol={tol:g})")
    return arr


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues' formula: rotation vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def geodesic_distance(r1, r2) -> float:
    """Rotation angle of ``r1^T r2`` in radians."""
    rel = np.asarray(r1).T @ np.asarray(r2)
    cos_theta = (np.trace(rel) - 1.0) * 0.5
    return math.acos(min(1.0, max(-1.0, cos_theta)))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=np.float64) + self.translation


def rotation_from_calibration(n_tgt, r_tilde, n_ref) -> np.ndarray:
    """Relative rotation between normalized cameras from extrinsic calibration.

    ``r_tilde`` maps the original reference camera frame to the original
    target camera frame; ``n_*`` map original to normalized camera frames.
    """
    n_tgt = check_rotation(n_tgt, name="n_tgt")
    r_tilde = check_rotation(r_tilde, name="r_tilde")
    n_ref = check_rotation(n_ref, name="n_ref")
    return n_tgt @ r_tilde @ n_ref.T


def rotation_from_head_poses(h_tgt, h_ref) -> np.ndarray:
    """Relative rotation from head poses expressed in each normalized camera."""
    h_tgt = check_rotation(h_tgt, name="h_tgt")
    h_ref = check_rotation(h_ref, name="h_ref")
    return h_tgt @ h_ref.T


def translation_from_rotation(r, d: float) -> np.ndarray:
    """Translation that keeps the gaze origin ``(0, 0, d)`` fixed under ``r``."""
    r = check_rotation(r)
    if not d > 0:
        raise ValueError("normalization distance must be positive")
    return np.array([0.0, 0.0, d]) - d * r[:, 2]


def verify_rotation_interconvertibility(
    c: RigidTransform,
    n_ref,
    n_tgt,
    h_hat_ref: RigidTransform,
    h_hat_tgt: RigidTransform,
    rig_tol: float = 1e-6,
) -> float:
    """Residual between the calibration and head-pose definitions of R.

    Raises InconsistentRig unless the original-frame head poses satisfy
    ``h_hat_tgt = c @ h_hat_ref``.
    """
    n_ref = check_rotation(n_ref, name="n_ref")
    n_tgt = check_rotation(n_tgt, name="n_tgt")
    expected = c @ h_hat_ref
    gap = np.linalg.norm(expected.rotation - h_hat_tgt.rotation) + np.linalg.norm(
        expected.translation - h_hat_tgt.translation
    )
    if gap > rig_tol:
        raise InconsistentRig(f"h_hat_tgt != C h_hat_ref (gap {gap:.3g})")
    h_tgt = n_tgt @ h_hat_tgt.rotation
    h_ref = n_ref @ h_hat_ref.rotation
    from_calib = rotation_from_calibration(n_tgt, c.rotation, n_ref)
    from_pose = rotation_from_head_poses(h_tgt, h_ref)
    return float(np.linalg.norm(from_calib - from_pose))


def fixed_point_residual(r, d: float) -> float:
    """``|(r, t) o - o|`` for ``o = (0, 0, d)`` and ``t`` from :func:`translation_from_rotation`."""
    t = translation_from_rotation(r, d)
    o = np.array([0.0, 0.0, d])
    return float(np.linalg.norm(np.asarray(r) @ o + t - o))


def _as_unit(g, name: str) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    n = np.linalg.norm(g, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise NotUnit(f"{name} is not a unit vector")
    return g


def angular_error(g1, g2) -> float | np.ndarray:
    """Angle between unit vectors in degrees. Broadcasts over leading axes."""
    a = _as_unit(g1, "g1")
    b = _as_unit(g2, "g2")
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    out = np.degrees(np.arccos(dot))
    return float(out) if np.ndim(out) == 0 else out


def pitch_yaw_from_vector(g) -> tuple[float, float]:
    """Pitch/yaw in radians; ``(0, 0, -1)`` is frontal and ``-y`` is up."""
    x, y, z = _as_unit(g, "g")
    pitch = math.asin(min(1.0, max(-1.0, -y)))
    yaw = math.atan2(-x, -z)
    return pitch, yaw


def vector_from_pitch_yaw(pitch: float, yaw: float) -> np.ndarray:
    if not -math.pi / 2 <= pitch <= math.pi / 2:
        raise ValueError("pitch out of range")
    cp = math.cos(pitch)
    return np.array([-cp * math.sin(yaw), -math.sin(pitch), -cp * math.cos(yaw)])


def pitch_of(g: np.ndarray) -> np.ndarray:
    """Vectorized pitch for ``(..., 3)`` unit vectors."""
    return np.arcsin(np.clip(-g[..., 1], -1.0, 1.0))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def orthonormalize(m) -> np.ndarray:
    """Nearest proper rotation (polar decomposition), with det forced to +1."""
    m = np.asarray(m, dtype=np.float64)
    if abs(np.linalg.det(m)) < 1e-12:
        raise Singular("matrix is singular")
    u, _, vt = np.linalg.svd(m)
    sign = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, sign]) @ vt


def look_at_rotation(direction) -> np.ndarray:
    """World-to-camera rotation for a camera at ``direction`` looking at the origin.

    The world frame is the frontal normalized camera: ``+z`` points from the
    camera into the face and ``+y`` is image-down. The camera x axis is kept
    horizontal (no roll), as in data normalization.
    """
    u = np.asarray(direction, dtype=np.float64)
    z = -u / np.linalg.norm(u)
    x = np.cross([0.0, 1.0, 0.0], z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("camera direction is parallel to the vertical axis")
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z])


# -- rig description files ---------------------------------------------------

RIG_FORMAT = "rotfuse-rig/1"


def load_rig_file(path) -> dict:
    """Parse a JSON rig description.

    Layout::

        {"format": "rotfuse-rig/1", "d": 0.6,
         "cameras": [{"id": 0,
                      "extrinsic_rotation": [[...3x3...]],
                      "extrinsic_translation": [x, y, z],
                      "normalization_rotation": [[...3x3...]],
                      "split": "train"}, ...]}

    Extrinsics map world coordinates to the original camera frame. All
    rotations must pass the 1e-6 input tolerance.
    """
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != RIG_FORMAT:
        raise ValueError(f"unsupported rig format {raw.get('format')!r}")
    d = float(raw["d"])
    if not d > 0:
        raise ValueError("d must be positive")
    cameras = []
    for cam in raw["cameras"]:
        cid = int(cam["id"])
        ext = RigidTransform(
            check_rotation(cam["extrinsic_rotation"], name=f"camera {cid} extrinsic"),
            cam.get("extrinsic_translation", [0.0, 0.0, 0.0]),
        )
        norm = check_rotation(cam["normalization_rotation"], name=f"camera {cid} normalization")
        cameras.append(
            {"id": cid, "extrinsic": ext, "normalization": norm, "split": cam.get("split", "train")}
        )
    return {"d": d, "cameras": cameras}


def dump_rig_file(path, d: float, cameras: list[dict]) -> None:
    payload = {
        "format": RIG_FORMAT,
        "d": float(d),
        "cameras": [
            {
                "id": int(c["id"]),
                "extrinsic_rotation": c["extrinsic"].rotation.tolist(),
                "extrinsic_translation": c["extrinsic"].translation.tolist(),
                "normalization_rotation": np.asarray(c["normalization"]).tolist(),
                "split": c.get("split", "train"),
            }
            for c in cameras
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2))
