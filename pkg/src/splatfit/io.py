"""Snapshots, images, and synthetic datasets.

Snapshot layout: a 16-byte header (magic b"SPLT", format version, spatial
dimension, primitive count; all little-endian uint32) followed by one record
per primitive of little-endian float32 fields in declared order: position,
log_scale, rotation (angle or quaternion), opacity_logit, feature.  Error
scalars are not stored; they are identically zero between steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, Scene, scene_extent
from .rasterizer import RenderConfig, render

SNAPSHOT_MAGIC = b"SPLT"
SNAPSHOT_VERSION = 1


@dataclass
class PrimitiveSnapshot:
    scene: Scene
    version: int = SNAPSHOT_VERSION

    @property
    def mode(self) -> str:
        return self.scene.mode


def _record_width(dim: int) -> int:
    rot = 1 if dim == 2 else 4
    return dim + dim + rot + 1 + 3


def save_snapshot(scene: Scene, path: str | Path) -> None:
    """Write the scene at float32 precision."""
    dim = scene.dim
    rot = scene.rotations[:, None] if scene.mode == "2d" else scene.rotations
    table = np.concatenate(
        [scene.positions, scene.log_scales, rot, scene.opacity_logits[:, None], scene.features],
        axis=1,
    )
    header = struct.pack("<4sIII", SNAPSHOT_MAGIC, SNAPSHOT_VERSION, dim, len(scene))
    Path(path).write_bytes(header + table.astype("<f4").tobytes())


def load_snapshot(path: str | Path) -> PrimitiveSnapshot:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"snapshot {path}: truncated header ({len(raw)} bytes)")
    magic, version, dim, count = struct.unpack("<4sIII", raw[:16])
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"snapshot {path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"snapshot {path}: unsupported version {version}")
    if dim not in (2, 3):
        raise ValueError(f"snapshot {path}: invalid dimension {dim}")
    width = _record_width(dim)
    expected = 16 + count * width * 4
    if len(raw) != expected:
        raise ValueError(
            f"snapshot {path}: expected {expected} bytes for {count} primitives, got {len(raw)}"
        )
    table = np.frombuffer(raw[16:], dtype="<f4").reshape(count, width).astype(np.float64)
    rot_cols = 1 if dim == 2 else 4
    o = 0
    positions = table[:, o : o + dim]; o += dim
    log_scales = table[:, o : o + dim]; o += dim
    rotations = table[:, o : o + rot_cols]; o += rot_cols
    opacity_logits = table[:, o]; o += 1
    features = table[:, o : o + 3]
    scene = Scene(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations[:, 0] if dim == 2 else rotations,
        opacity_logits=opacity_logits,
        features=features,
    )
    return PrimitiveSnapshot(scene=scene, version=version)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Save an [0, 1] float image as 8-bit PNG (values rounded, then clipped)."""
    arr = np.asarray(image, dtype=np.float64)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def load_image(path: str | Path) -> np.ndarray:
    """Load an image as float64 in [0, 1]; RGB shape (H, W, 3)."""
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]


@dataclass
class SyntheticScene:
    """A reproducible dataset: views plus the recipe that regenerates it."""

    views: list[View]
    extent: float
    kind: str
    spec: dict = field(default_factory=dict)


def _resolution(params: dict) -> tuple[int, int]:
    res = params.get("resolution", 64)
    if isinstance(res, (list, tuple)):
        h, w = int(res[0]), int(res[1])
    else:
        h = w = int(res)
    return h, w


def _checker2d(params: dict, seed: int) -> SyntheticScene:
    h, w = _resolution(params)
    cell = int(params.get("cell", 8))
    noise = float(params.get("noise", 0.0))
    dark_noise = float(params.get("dark_noise", noise))
    noise_cell = int(params.get("noise_cell", 1))
    noise_spread = float(params.get("noise_spread", 0.0))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = ((xx // cell + yy // cell) % 2).astype(np.float64)
    image = np.repeat(base[:, :, None], 3, axis=2)
    if noise > 0.0 or dark_noise > 0.0:
        rng = np.random.default_rng(seed)
        gh = -(-h // noise_cell)
        gw = -(-w // noise_cell)
        # Independent textures on light and dark cells, upsampled from a
        # noise_cell-pitch grid so the detail stays resolvable. Separate
        # amplitudes allow targets whose detail density varies across the
        # image (e.g. textured light cells over flat dark cells).
        hi = np.kron(rng.uniform(0, 1, size=(gh, gw, 3)), np.ones((noise_cell, noise_cell, 1)))
        lo = np.kron(rng.uniform(0, 1, size=(gh, gw, 3)), np.ones((noise_cell, noise_cell, 1)))
        hi, lo = hi[:h, :w], lo[:h, :w]
        amp = np.ones((h, w, 1))
        if noise_spread > 0.0:
            # Per-checker-cell amplitude in [1 - spread, 1], so the detail a
            # region demands varies across the target.
            ch = -(-h // cell)
            cw = -(-w // cell)
            cell_amp = 1.0 - noise_spread * rng.uniform(0, 1, size=(ch, cw))
            amp = np.kron(cell_amp, np.ones((cell, cell)))[:h, :w, None]
        mask = image > 0.5
        image = np.where(mask, 1.0 - noise * amp * hi, dark_noise * amp * lo)
    views = [View(camera=Camera.identity2d(w, h), image=image)]
    return SyntheticScene(views=views, extent=float(np.hypot(w, h)), kind="checker2d")


def _texture2d(params: dict, seed: int) -> SyntheticScene:
    del seed
    path = params["path"]
    image = load_image(path)
    h, w = image.shape[:2]
    views = [View(camera=Camera.identity2d(w, h), image=image)]
    return SyntheticScene(views=views, extent=float(np.hypot(w, h)), kind="texture2d")


def _blobs3d(params: dict, seed: int) -> SyntheticScene:
    from .core import logit  # local import keeps module load order simple

    h, w = _resolution(params)
    count = int(params.get("count", 40))
    n_views = int(params.get("views", 12))
    ball = float(params.get("ball_radius", 0.8))
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = direction * ball * rng.uniform(0, 1, size=(count, 1)) ** (1 / 3)
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    hidden = Scene(
        positions=positions,
        log_scales=np.log(rng.uniform(0.06, 0.2, size=(count, 3))),
        rotations=quats,
        opacity_logits=logit(rng.uniform(0.5, 0.95, size=count)),
        features=logit(rng.uniform(0.15, 0.85, size=(count, 3))),
    )
    cameras = [
        Camera.look_at(
            position=(3.0 * np.cos(t), 3.0 * np.sin(t), 0.9),
            target=(0.0, 0.0, 0.0),
            width=w,
            height=h,
            focal=1.2 * min(w, h),
        )
        for t in np.linspace(0.0, 2.0 * np.pi, n_views, endpoint=False)
    ]
    rcfg = RenderConfig()
    views = [View(camera=c, image=render(hidden, c, "rgb", rcfg).image) for c in cameras]
    return SyntheticScene(views=views, extent=scene_extent(hidden), kind="blobs3d")


_KINDS = {"checker2d": _checker2d, "texture2d": _texture2d, "blobs3d": _blobs3d}


def make_synthetic(kind: str, params: dict | None = None, seed: int = 0) -> SyntheticScene:
    """Build a named synthetic dataset; the recipe is stored on the result."""
    if kind not in _KINDS:
        raise ValueError(f"unknown dataset kind {kind!r} (have {sorted(_KINDS)})")
    params = dict(params or {})
    dataset = _KINDS[kind](params, seed)
    dataset.spec = {"kind": kind, "seed": int(seed), **params}
    return dataset


def dataset_from_spec(spec: dict) -> SyntheticScene:
    """Regenerate a dataset from the spec dict stored in run manifests."""
    spec = dict(spec)
    if "kind" not in spec:
        raise ValueError("dataset spec is missing 'kind'")
    kind = spec.pop("kind")
    seed = int(spec.pop("seed", 0))
    return make_synthetic(kind, spec, seed)


def camera_to_dict(camera: Camera) -> dict:
    if camera.mode == "2d":
        return {"mode": "2d", "width": camera.width, "height": camera.height}
    return {
        "mode": "3d",
        "width": camera.width,
        "height": camera.height,
        "rotation": camera.rotation.reshape(-1).tolist(),
        "translation": camera.translation.tolist(),
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
    }


def camera_from_dict(data: dict) -> Camera:
    mode = data.get("mode")
    if mode == "2d":
        return Camera.identity2d(int(data["width"]), int(data["height"]))
    if mode == "3d":
        return Camera(
            mode="3d",
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(data["translation"], dtype=np.float64),
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
        )
    raise ValueError(f"camera spec needs mode '2d' or '3d', got {mode!r}")
