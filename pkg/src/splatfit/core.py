"""Primitive containers, cameras, and the projection math shared by every stage.

A scene is a struct-of-arrays over anisotropic Gaussian primitives.  Each
primitive carries a position, per-axis log standard deviations, a rotation
(angle in 2D, quaternion in 3D), an opacity logit, an RGB feature vector in
logit space, and an auxiliary error scalar that is never optimized directly.

All math is float64.  Covariances are built from the factored form
R * diag(exp(2*s)) * R^T, which keeps them positive definite for any
parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Screen-space footprint radius, in units of the largest projected standard
# deviation, beyond which a full-opacity primitive's contribution drops below
# 1/255.  Culling at this radius can never drop a visible contribution.
FOOTPRINT_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if scalar:
        return float(out[0])
    return out.reshape(np.shape(x))


def sigmoid_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(np.asarray(x, dtype=np.float64))
    return s * (1.0 - s)


def logit(p: np.ndarray | float) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit requires probabilities strictly inside (0, 1)")
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class Camera:
    """Viewing transform plus intrinsics.

    mode "2d": primitives live directly on the pixel plane; width/height only.
    mode "3d": pinhole camera with world-to-camera rotation/translation and
    focal/principal intrinsics; camera space is x-right, y-down, z-forward.
    """

    mode: str
    width: int
    height: int
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("2d", "3d"):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        if self.mode == "3d":
            if self.rotation is None or self.translation is None:
                raise ValueError("3d camera requires rotation and translation")
            if None in (self.fx, self.fy, self.cx, self.cy):
                raise ValueError("3d camera requires fx, fy, cx, cy")
            object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
            object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity2d(cls, width: int, height: int) -> "Camera":
        return cls(mode="2d", width=width, height=height)

    @classmethod
    def look_at(
        cls,
        position: Sequence[float],
        target: Sequence[float],
        width: int,
        height: int,
        focal: float,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Camera":
        """Pinhole camera at `position` looking toward `target`."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        distance = np.linalg.norm(forward)
        if distance < 1e-12:
            raise ValueError("camera position coincides with its target")
        forward = forward / distance
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        nrm = np.linalg.norm(right)
        if nrm < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        right = right / nrm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            mode="3d",
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ position,
            fx=float(focal),
            fy=float(focal),
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
        )


@dataclass
class GaussianPrimitive:
    """Single primitive; scalar view of one scene row."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: float | np.ndarray
    opacity_logit: float
    feature: np.ndarray
    err_scalar: float = 0.0

    @property
    def mode(self) -> str:
        return "2d" if np.asarray(self.position).shape[0] == 2 else "3d"

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class Scene:
    """Struct-of-arrays container for a set of primitives.

    rotations has shape (K,) in 2D (angles, radians) and (K, 4) in 3D
    (quaternions in (w, x, y, z) order; normalized on use, not on storage).
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    err_scalars: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.err_scalars is None:
            self.err_scalars = np.zeros(len(self.positions), dtype=np.float64)
        self.err_scalars = np.asarray(self.err_scalars, dtype=np.float64).reshape(-1)
        k, dim = self.positions.shape
        if dim not in (2, 3):
            raise ValueError(f"positions must be (K, 2) or (K, 3), got {self.positions.shape}")
        if self.log_scales.shape != (k, dim):
            raise ValueError(f"log_scales shape {self.log_scales.shape} != {(k, dim)}")
        want_rot = (k,) if dim == 2 else (k, 4)
        if self.rotations.shape != want_rot:
            raise ValueError(f"rotations shape {self.rotations.shape} != {want_rot}")
        if self.opacity_logits.shape != (k,):
            raise ValueError("opacity_logits length mismatch")
        if self.features.shape != (k, 3):
            raise ValueError(f"features shape {self.features.shape} != {(k, 3)}")
        if self.err_scalars.shape != (k,):
            raise ValueError("err_scalars length mismatch")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def mode(self) -> str:
        return "2d" if self.positions.shape[1] == 2 else "3d"

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return sigmoid(self.features)

    def copy(self) -> "Scene":
        return Scene(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.features.copy(),
            self.err_scalars.copy(),
        )

    def take(self, indices: np.ndarray) -> "Scene":
        idx = np.asarray(indices)
        return Scene(
            self.positions[idx],
            self.log_scales[idx],
            self.rotations[idx],
            self.opacity_logits[idx],
            self.features[idx],
            self.err_scalars[idx],
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        rot = self.rotations[i]
        return GaussianPrimitive(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=float(rot) if self.mode == "2d" else rot.copy(),
            opacity_logit=float(self.opacity_logits[i]),
            feature=self.features[i].copy(),
            err_scalar=float(self.err_scalars[i]),
        )

    @classmethod
    def from_primitives(cls, primitives: Iterable[GaussianPrimitive]) -> "Scene":
        prims = list(primitives)
        if not prims:
            raise ValueError("cannot build a scene from zero primitives")
        two_d = np.asarray(prims[0].position).shape[0] == 2
        if two_d:
            rotations = np.array([float(p.rotation) for p in prims], dtype=np.float64)
        else:
            rotations = np.stack([np.asarray(p.rotation, dtype=np.float64) for p in prims])
        return cls(
            positions=np.stack([np.asarray(p.position, dtype=np.float64) for p in prims]),
            log_scales=np.stack([np.asarray(p.log_scale, dtype=np.float64) for p in prims]),
            rotations=rotations,
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            features=np.stack([np.asarray(p.feature, dtype=np.float64) for p in prims]),
            err_scalars=np.array([p.err_scalar for p in prims], dtype=np.float64),
        )


def scene_concat(parts: Sequence[Scene]) -> Scene:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("nothing to concatenate")
    return Scene(
        np.concatenate([p.positions for p in parts]),
        np.concatenate([p.log_scales for p in parts]),
        np.concatenate([p.rotations for p in parts]),
        np.concatenate([p.opacity_logits for p in parts]),
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.err_scalars for p in parts]),
    )


def rotation_matrices_2d(angles: np.ndarray) -> np.ndarray:
    """(K,) angles -> (K, 2, 2) rotation matrices."""
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty(angles.shape + (2, 2), dtype=np.float64)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def normalize_quaternions(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (unit quaternions, norms); raises on zero-norm input."""
    norms = np.linalg.norm(quats, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("zero-norm quaternion")
    return quats / norms[..., None], norms


def quaternion_rotation_matrices(quats: np.ndarray) -> np.ndarray:
    """(K, 4) quaternions in (w, x, y, z) order -> (K, 3, 3); normalizes first."""
    q, _ = normalize_quaternions(np.asarray(quats, dtype=np.float64))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotation_matrices(scene: Scene) -> np.ndarray:
    if scene.mode == "2d":
        return rotation_matrices_2d(scene.rotations)
    return quaternion_rotation_matrices(scene.rotations)


def covariances(scene: Scene) -> np.ndarray:
    """World-space covariances R diag(exp(2s)) R^T, shape (K, D, D)."""
    rot = rotation_matrices(scene)
    diag = np.exp(2.0 * scene.log_scales)
    return np.einsum("kij,kj,klj->kil", rot, diag, rot)


def covariance(primitive: GaussianPrimitive) -> np.ndarray:
    """World-space covariance of a single primitive."""
    return covariances(Scene.from_primitives([primitive]))[0]


@dataclass
class SplattedGaussian:
    """Screen-space footprint of one primitive for one camera."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class SplatData:
    """Batched screen-space geometry for a whole scene.

    `valid` marks primitives in front of the near plane; rows where it is
    False hold unspecified values.  `jacobian` and `t_cam` are None in 2D.
    """

    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2), dilation included
    depth: np.ndarray  # (K,)
    valid: np.ndarray  # (K,) bool
    t_cam: np.ndarray | None = None  # (K, 3)
    jacobian: np.ndarray | None = None  # (K, 2, 3)


def splat_scene(
    scene: Scene,
    camera: Camera,
    dilation: float = 0.3,
    near_plane: float = 0.01,
) -> SplatData:
    """Project every primitive to screen space.

    2D mode: mean2d is the position, cov2d the world covariance plus dilation,
    depth the insertion index (compositing order is scene order).

    3D mode: pinhole projection with the first-order linearization
    cov2d = J Rc Sigma Rc^T J^T + dilation * I, depth the camera-space z.
    """
    if scene.mode == "2d" and camera.mode != "2d":
        raise ValueError(f"scene mode '2d' incompatible with camera mode {camera.mode!r}")
    if scene.mode == "3d" and camera.mode != "3d":
        raise ValueError(f"scene mode '3d' incompatible with camera mode {camera.mode!r}")
    k = len(scene)
    cov = covariances(scene)
    dil = dilation * np.eye(2)
    if scene.mode == "2d":
        return SplatData(
            mean2d=scene.positions.copy(),
            cov2d=cov + dil,
            depth=np.arange(k, dtype=np.float64),
            valid=np.ones(k, dtype=bool),
        )
    rc, tc = camera.rotation, camera.translation
    t = scene.positions @ rc.T + tc
    tz = t[:, 2]
    valid = tz > near_plane
    tz_safe = np.where(valid, tz, 1.0)
    fx, fy = camera.fx, camera.fy
    mean2d = np.stack(
        [fx * t[:, 0] / tz_safe + camera.cx, fy * t[:, 1] / tz_safe + camera.cy], axis=1
    )
    jac = np.zeros((k, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = fx / tz_safe
    jac[:, 0, 2] = -fx * t[:, 0] / tz_safe**2
    jac[:, 1, 1] = fy / tz_safe
    jac[:, 1, 2] = -fy * t[:, 1] / tz_safe**2
    m = np.einsum("kij,jl->kil", jac, rc)
    cov2d = np.einsum("kij,kjl,kml->kim", m, cov, m) + dil
    return SplatData(mean2d=mean2d, cov2d=cov2d, depth=tz, valid=valid, t_cam=t, jacobian=jac)


def footprint_radii(splat_data: SplatData, sigma_factor: float = FOOTPRINT_SIGMA) -> np.ndarray:
    """Per-primitive screen radius: sigma_factor times the largest projected std."""
    c = splat_data.cov2d
    a, b, d = c[:, 0, 0], c[:, 0, 1], c[:, 1, 1]
    # Largest eigenvalue of a symmetric 2x2 matrix, closed form.
    half_tr = 0.5 * (a + d)
    disc = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    lam_max = half_tr + disc
    return sigma_factor * np.sqrt(np.maximum(lam_max, 0.0))


def splat(
    primitive: GaussianPrimitive,
    camera: Camera,
    dilation: float = 0.3,
    near_plane: float = 0.01,
) -> SplattedGaussian | None:
    """Project one primitive; None when culled.

    Culls primitives behind the near plane and primitives whose conservative
    footprint (FOOTPRINT_SIGMA times the largest projected std) misses the
    image rectangle entirely.
    """
    data = splat_scene(Scene.from_primitives([primitive]), camera, dilation, near_plane)
    if not data.valid[0]:
        return None
    r = footprint_radii(data)[0]
    mx, my = data.mean2d[0]
    if mx + r < 0 or mx - r > camera.width - 1 or my + r < 0 or my - r > camera.height - 1:
        return None
    return SplattedGaussian(mean2d=data.mean2d[0], cov2d=data.cov2d[0], depth=float(data.depth[0]))


def gaussian_eval(splatted: SplattedGaussian, pixel: Sequence[float]) -> float:
    """Unnormalized Gaussian density exp(-0.5 d^T cov2d^{-1} d) at a pixel center."""
    d = np.asarray(pixel, dtype=np.float64) - splatted.mean2d
    q = float(d @ np.linalg.solve(splatted.cov2d, d))
    return float(np.exp(-0.5 * q))


def scene_extent(scene_or_positions: Scene | np.ndarray) -> float:
    """Diagonal of the positions' bounding box; the ADC size unit."""
    pos = scene_or_positions.positions if isinstance(scene_or_positions, Scene) else np.asarray(scene_or_positions)
    if len(pos) == 0:
        return 0.0
    span = pos.max(axis=0) - pos.min(axis=0)
    return float(np.linalg.norm(span))
