"""Depth-ordered alpha compositing of splatted Gaussians, forward and backward.

The forward pass flattens the scene into per-(pixel, primitive) contribution
pairs, sorts them by (pixel, depth), and runs segmented scans to obtain the
transmittance in front of every contribution.  The backward pass replays the
cached pairs and chains hand-derived Jacobians all the way to the primitive
parameters; it is validated against finite differences rather than any
autodiff framework.

Conventions: pixel (row i, col j) has its center at coordinates (x=j, y=i);
flat pixel index is i * width + j.  Depth ties compose lower primitive index
first.  In 2D mode the compositing order is scene order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Camera,
    Scene,
    SplatData,
    footprint_radii,
    quaternion_rotation_matrices,
    rotation_matrices,
    rotation_matrices_2d,
    sigmoid_grad,
    splat_scene,
)

DEFAULT_CUTOFF = 1.0 / 255.0


@dataclass(frozen=True)
class RenderConfig:
    """Rendering knobs; `exact()` disables every culling approximation."""

    dilation: float = 0.3
    near_plane: float = 0.01
    contribution_cutoff: float = DEFAULT_CUTOFF
    early_stop_transmittance: float = 1e-4

    @classmethod
    def exact(cls, dilation: float = 0.3, near_plane: float = 0.01) -> "RenderConfig":
        return cls(
            dilation=dilation,
            near_plane=near_plane,
            contribution_cutoff=0.0,
            early_stop_transmittance=0.0,
        )


@dataclass
class RenderCache:
    """Forward-pass state replayed by backward(); parameter arrays are copies."""

    scene: Scene
    camera: Camera
    config: RenderConfig
    decoder_kind: str
    phi: np.ndarray  # (K, m) decoded per-primitive values
    splat_data: SplatData
    cov2d_inv: np.ndarray  # (K, 2, 2)
    rendered: np.ndarray  # (K,) bool: survived culling with a nonempty footprint
    pair_pix: np.ndarray  # (P,) flat pixel index, sorted
    pair_prim: np.ndarray  # (P,) primitive index
    pair_g: np.ndarray  # (P,) Gaussian density
    pair_a: np.ndarray  # (P,) alpha * G
    pair_t_before: np.ndarray  # (P,) transmittance in front of this contribution
    pair_omega: np.ndarray  # (P,) blending weight
    scene_len: int


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, m)
    residual_transmittance: np.ndarray  # (H, W)
    cache: RenderCache


@dataclass
class GradientBuffer:
    """Per-primitive gradients for one rendered view."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    feature: np.ndarray
    err_scalar: np.ndarray
    mean2d: np.ndarray  # screen-space mean gradients, the densification signal
    rendered: np.ndarray  # bool mask of primitives that produced contributions
    image_size: tuple[int, int] = (0, 0)  # (width, height) of the rendered view

    @classmethod
    def zeros(cls, k: int, dim: int, image_size: tuple[int, int] = (0, 0)) -> "GradientBuffer":
        rot_shape = (k,) if dim == 2 else (k, 4)
        return cls(
            position=np.zeros((k, dim)),
            log_scale=np.zeros((k, dim)),
            rotation=np.zeros(rot_shape),
            opacity_logit=np.zeros(k),
            feature=np.zeros((k, 3)),
            err_scalar=np.zeros(k),
            mean2d=np.zeros((k, 2)),
            rendered=np.zeros(k, dtype=bool),
            image_size=image_size,
        )


def decode(scene: Scene, decoder: str | np.ndarray) -> tuple[np.ndarray, str]:
    """Per-primitive decoded values phi, shape (K, m), plus the decoder kind."""
    if isinstance(decoder, str):
        if decoder == "rgb":
            return scene.colors(), "rgb"
        if decoder == "ones":
            return np.ones((len(scene), 1)), "ones"
        if decoder == "err":
            return scene.err_scalars[:, None].copy(), "err"
        raise ValueError(f"unknown decoder {decoder!r}")
    arr = np.asarray(decoder, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != len(scene):
        raise ValueError(f"decoder array must be (K, m)=({len(scene)}, m), got {arr.shape}")
    return arr.copy(), "custom"


def _invert_cov2d(cov2d: np.ndarray) -> np.ndarray:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    d = cov2d[:, 1, 1]
    det = a * d - b * b
    if np.any(det <= 0):
        raise FloatingPointError("non positive definite screen covariance")
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


def _segments(pix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For sorted flat pixel ids: (first-pair index per segment, per-pair index
    of its segment's first pair, per-pair index of its segment's last pair)."""
    p = len(pix)
    start = np.empty(p, dtype=bool)
    start[0] = True
    start[1:] = pix[1:] != pix[:-1]
    seg_first = np.flatnonzero(start)
    seg_of = np.cumsum(start) - 1
    seg_last = np.append(seg_first[1:] - 1, p - 1)
    return seg_first, seg_first[seg_of], seg_last[seg_of]


def render(
    scene: Scene,
    camera: Camera,
    decoder: str | np.ndarray = "rgb",
    config: RenderConfig = RenderConfig(),
) -> RenderOutput:
    """Composite the scene front-to-back over a black background.

    image(u) = sum_k phi_k * alpha_k G_k(u) * prod_{j before k} (1 - alpha_j G_j(u))
    residual_transmittance(u) = prod_k (1 - alpha_k G_k(u))
    """
    h, w = camera.height, camera.width
    k = len(scene)
    phi, kind = decode(scene, decoder)
    m = phi.shape[1]
    data = splat_scene(scene, camera, config.dilation, config.near_plane)
    cov2d_inv = _invert_cov2d(data.cov2d)
    alphas = scene.alphas()

    cutoff = config.contribution_cutoff
    if cutoff > 0.0:
        # Radius where alpha * G falls to the cutoff; conservative per pair.
        ratio = np.where(alphas > 0, alphas / cutoff, 0.0)
        lam_scale = footprint_radii(data, sigma_factor=1.0)
        radii = np.where(ratio > 1.0, np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0))), -1.0) * lam_scale
    else:
        radii = np.full(k, np.hypot(w, h), dtype=np.float64)

    x0 = np.maximum(np.ceil(data.mean2d[:, 0] - radii), 0).astype(np.int64)
    x1 = np.minimum(np.floor(data.mean2d[:, 0] + radii), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(data.mean2d[:, 1] - radii), 0).astype(np.int64)
    y1 = np.minimum(np.floor(data.mean2d[:, 1] + radii), h - 1).astype(np.int64)
    rendered = data.valid & (radii >= 0) & (x1 >= x0) & (y1 >= y0)

    idx = np.flatnonzero(rendered)
    if idx.size == 0:
        cache = RenderCache(
            scene=scene.copy(),
            camera=camera,
            config=config,
            decoder_kind=kind,
            phi=phi,
            splat_data=data,
            cov2d_inv=cov2d_inv,
            rendered=rendered,
            pair_pix=np.empty(0, dtype=np.int64),
            pair_prim=np.empty(0, dtype=np.int64),
            pair_g=np.empty(0),
            pair_a=np.empty(0),
            pair_t_before=np.empty(0),
            pair_omega=np.empty(0),
            scene_len=k,
        )
        return RenderOutput(
            image=np.zeros((h, w, m)),
            residual_transmittance=np.ones((h, w)),
            cache=cache,
        )

    # Flatten footprints into (pixel, primitive) pairs.
    bw = x1[idx] - x0[idx] + 1
    bh = y1[idx] - y0[idx] + 1
    counts = bw * bh
    prim = np.repeat(idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offset = np.arange(counts.sum(), dtype=np.int64) - np.repeat(starts, counts)
    bw_r = np.repeat(bw, counts)
    px = np.repeat(x0[idx], counts) + offset % bw_r
    py = np.repeat(y0[idx], counts) + offset // bw_r

    d = np.stack([px, py], axis=1).astype(np.float64) - data.mean2d[prim]
    inv = cov2d_inv[prim]
    q = (
        inv[:, 0, 0] * d[:, 0] ** 2
        + 2.0 * inv[:, 0, 1] * d[:, 0] * d[:, 1]
        + inv[:, 1, 1] * d[:, 1] ** 2
    )
    g = np.exp(-0.5 * q)
    a = alphas[prim] * g
    if cutoff > 0.0:
        keep = a >= cutoff
        prim, px, py, g, a = prim[keep], px[keep], py[keep], g[keep], a[keep]

    # Composite order: pixel-major, then depth, ties by primitive index.
    # (pixel, rank) is unique per pair, so one packed integer key sorts it.
    depth_rank = np.empty(k, dtype=np.int64)
    depth_rank[np.argsort(data.depth, kind="stable")] = np.arange(k)
    pix = py * w + px
    order = np.argsort(pix * k + depth_rank[prim])
    pix, prim, g, a = pix[order], prim[order], g[order], a[order]

    image = np.zeros((h * w, m))
    t_res = np.ones(h * w)
    if len(pix) == 0:
        cache = RenderCache(
            scene.copy(), camera, config, kind, phi, data, cov2d_inv, rendered,
            pix, prim, g, a, np.empty(0), np.empty(0), k,
        )
        return RenderOutput(image.reshape(h, w, m), t_res.reshape(h, w), cache)

    # Transmittance in front of each contribution: log-space exclusive scan
    # per pixel segment; exact zeros (a == 1) are counted separately so the
    # scan never mixes infinities.
    zero = (1.0 - a) <= 0.0
    lg = np.where(zero, 0.0, np.log1p(-np.where(zero, 0.0, a)))
    lc_excl = np.cumsum(lg) - lg
    zc_excl = np.cumsum(zero.astype(np.int64)) - zero
    _, seg_base, _ = _segments(pix)
    t_before = np.exp(lc_excl - lc_excl[seg_base])
    t_before[(zc_excl - zc_excl[seg_base]) > 0] = 0.0

    if config.early_stop_transmittance > 0.0:
        keep = t_before >= config.early_stop_transmittance
        pix, prim, g, a, t_before = pix[keep], prim[keep], g[keep], a[keep], t_before[keep]
    if len(pix) == 0:
        cache = RenderCache(
            scene.copy(), camera, config, kind, phi, data, cov2d_inv, rendered,
            pix, prim, g, a, t_before, np.empty(0), k,
        )
        return RenderOutput(image.reshape(h, w, m), t_res.reshape(h, w), cache)

    # Early termination keeps a prefix of every segment, so per-pair values
    # are unchanged; the residual is the last kept contribution's t * (1 - a).
    seg_first, _, seg_last = _segments(pix)
    omega = a * t_before
    phip = phi[prim]
    for c in range(m):
        image[:, c] = np.bincount(pix, weights=omega * phip[:, c], minlength=h * w)
    last = seg_last[seg_first]
    t_res[pix[seg_first]] = t_before[last] * (1.0 - a[last])

    cache = RenderCache(
        scene=scene.copy(),
        camera=camera,
        config=config,
        decoder_kind=kind,
        phi=phi,
        splat_data=data,
        cov2d_inv=cov2d_inv,
        rendered=rendered,
        pair_pix=pix,
        pair_prim=prim,
        pair_g=g,
        pair_a=a,
        pair_t_before=t_before,
        pair_omega=omega,
        scene_len=k,
    )
    return RenderOutput(image.reshape(h, w, m), t_res.reshape(h, w), cache)


def render_error_scalar(
    scene: Scene, camera: Camera, config: RenderConfig = RenderConfig()
) -> np.ndarray:
    """Composite the per-primitive error scalars, shape (H, W)."""
    return render(scene, camera, decoder="err", config=config).image[:, :, 0]


def accumulate_errors(render_output: RenderOutput, pixel_error: np.ndarray) -> np.ndarray:
    """Blend-weighted redistribution of a per-pixel error map onto primitives.

    Returns E_k = sum_u pixel_error(u) * omega_k(u), computed directly from the
    cached contribution pairs.
    """
    cache = render_output.cache
    h, w = cache.camera.height, cache.camera.width
    err = np.asarray(pixel_error, dtype=np.float64)
    if err.shape != (h, w):
        raise ValueError(f"pixel error shape {err.shape} != {(h, w)}")
    return np.bincount(
        cache.pair_prim,
        weights=cache.pair_omega * err.reshape(-1)[cache.pair_pix],
        minlength=cache.scene_len,
    )


def backward(
    render_output: RenderOutput,
    image_grad: np.ndarray | None = None,
    transmittance_grad: np.ndarray | None = None,
    aux_pixel_error: np.ndarray | None = None,
) -> GradientBuffer:
    """Pull pixel-space gradients back to primitive parameters.

    image_grad: dL/d(image), (H, W, m) or (H, W) when m == 1.
    transmittance_grad: dL/d(residual transmittance), (H, W).
    aux_pixel_error: per-pixel guiding error; adds its blend-weighted
    redistribution to err_scalar gradients and touches nothing else.
    """
    cache = render_output.cache
    scene = cache.scene
    if len(scene) != cache.scene_len:
        raise ValueError("render cache does not match scene (primitive count changed)")
    camera, data = cache.camera, cache.splat_data
    h, w = camera.height, camera.width
    k, dim = cache.scene_len, scene.dim
    m = cache.phi.shape[1]
    buf = GradientBuffer.zeros(k, dim, image_size=(w, h))
    buf.rendered = cache.rendered.copy()

    pix, prim = cache.pair_pix, cache.pair_prim
    g, a, t_before, omega = cache.pair_g, cache.pair_a, cache.pair_t_before, cache.pair_omega
    p = len(pix)

    if image_grad is not None:
        gc = np.asarray(image_grad, dtype=np.float64)
        if gc.ndim == 2:
            gc = gc[:, :, None]
        if gc.shape != (h, w, m):
            raise ValueError(f"image grad shape {gc.shape} incompatible with (H, W, m)=({h}, {w}, {m})")
        gc = gc.reshape(h * w, m)
    else:
        gc = None
    if transmittance_grad is not None:
        gt = np.asarray(transmittance_grad, dtype=np.float64)
        if gt.shape != (h, w):
            raise ValueError(f"transmittance grad shape {gt.shape} != {(h, w)}")
        gt = gt.reshape(-1)
    else:
        gt = None

    if p == 0:
        return buf

    if aux_pixel_error is not None:
        aux = np.asarray(aux_pixel_error, dtype=np.float64)
        if aux.shape != (h, w):
            raise ValueError(f"aux error shape {aux.shape} != {(h, w)}")
        buf.err_scalar += np.bincount(
            prim, weights=omega * aux.reshape(-1)[pix], minlength=k
        )

    if gc is None and gt is None:
        return buf

    one_minus = 1.0 - a
    safe_inv = np.where(one_minus > 0.0, 1.0 / np.where(one_minus > 0.0, one_minus, 1.0), 0.0)
    _, seg_base, seg_last = _segments(pix)

    # d(loss)/d(a_j) at a pixel, where C = sum phi_i a_i T_i and T_res:
    #   dC/da_j   = phi_j T_j - (sum_{i>j} phi_i omega_i) / (1 - a_j)
    #   dTres/da_j = -T_res / (1 - a_j)
    g_a = np.zeros(p)
    if gc is not None:
        dot = np.einsum("pm,pm->p", cache.phi[prim], gc[pix])
        s_pair = omega * dot
        cs = np.cumsum(s_pair)
        incl = cs - (cs - s_pair)[seg_base]
        suffix = incl[seg_last] - incl
        g_a += t_before * dot - safe_inv * suffix
    if gt is not None:
        t_res_pair = render_output.residual_transmittance.reshape(-1)[pix]
        g_a -= safe_inv * gt[pix] * t_res_pair

    alphas = scene.alphas()
    g_q = -0.5 * g * (g_a * alphas[prim])

    d0 = (pix % w).astype(np.float64) - data.mean2d[prim, 0]
    d1 = (pix // w).astype(np.float64) - data.mean2d[prim, 1]
    i00 = cache.cov2d_inv[prim, 0, 0]
    i01 = cache.cov2d_inv[prim, 0, 1]
    i11 = cache.cov2d_inv[prim, 1, 1]
    v0 = i00 * d0 + i01 * d1
    v1 = i01 * d0 + i11 * d1

    def scatter(values: np.ndarray) -> np.ndarray:
        return np.bincount(prim, weights=values, minlength=k)

    g_alpha = scatter(g_a * g)
    buf.mean2d[:, 0] = scatter(-2.0 * g_q * v0)
    buf.mean2d[:, 1] = scatter(-2.0 * g_q * v1)
    g_cov2d = np.zeros((k, 2, 2))
    g_cov2d[:, 0, 0] = scatter(-g_q * v0 * v0)
    g_cov2d[:, 0, 1] = g_cov2d[:, 1, 0] = scatter(-g_q * v0 * v1)
    g_cov2d[:, 1, 1] = scatter(-g_q * v1 * v1)
    if gc is not None:
        gcp = gc[pix]
        g_phi = np.stack([scatter(omega * gcp[:, c]) for c in range(m)], axis=1)
        if cache.decoder_kind == "rgb":
            buf.feature = g_phi * sigmoid_grad(scene.features)
        elif cache.decoder_kind == "err":
            buf.err_scalar += g_phi[:, 0]

    buf.opacity_logit = g_alpha * sigmoid_grad(scene.opacity_logits)

    # Chain screen-space gradients to the primitive parameters.
    if dim == 2:
        buf.position = buf.mean2d.copy()
        g_sigma = g_cov2d
        rot = rotation_matrices_2d(scene.rotations)
    else:
        rc = camera.rotation
        jac = data.jacobian
        mat = np.einsum("kij,jl->kil", jac, rc)
        cov_w = _world_covariances(scene)
        g_m = 2.0 * np.einsum("kij,kjl,klm->kim", g_cov2d, mat, cov_w)
        g_sigma = np.einsum("kia,kij,kjb->kab", mat, g_cov2d, mat)
        g_j = np.einsum("kil,jl->kij", g_m, rc)
        g_t = np.einsum("ki,kij->kj", buf.mean2d, jac)
        fx, fy = camera.fx, camera.fy
        t = data.t_cam
        tz = np.where(data.valid, t[:, 2], 1.0)
        g_t[:, 0] += g_j[:, 0, 2] * (-fx / tz**2)
        g_t[:, 1] += g_j[:, 1, 2] * (-fy / tz**2)
        g_t[:, 2] += (
            g_j[:, 0, 0] * (-fx / tz**2)
            + g_j[:, 1, 1] * (-fy / tz**2)
            + g_j[:, 0, 2] * (2.0 * fx * t[:, 0] / tz**3)
            + g_j[:, 1, 2] * (2.0 * fy * t[:, 1] / tz**3)
        )
        g_t[~data.valid] = 0.0
        buf.position = np.einsum("kj,ji->ki", g_t, rc)
        rot = quaternion_rotation_matrices(scene.rotations)

    # Sigma = R diag(exp(2s)) R^T; g_sigma is the full symmetric gradient.
    diag = np.exp(2.0 * scene.log_scales)
    g_diag = np.einsum("kji,kjl,kli->ki", rot, g_sigma, rot)
    buf.log_scale = 2.0 * diag * g_diag
    g_rot = 2.0 * np.einsum("kij,kjl->kil", g_sigma, rot) * diag[:, None, :]
    if dim == 2:
        c, s = np.cos(scene.rotations), np.sin(scene.rotations)
        buf.rotation = (
            g_rot[:, 0, 0] * (-s) + g_rot[:, 0, 1] * (-c) + g_rot[:, 1, 0] * c + g_rot[:, 1, 1] * (-s)
        )
    else:
        buf.rotation = _quaternion_grad(scene.rotations, g_rot)
    return buf


def _world_covariances(scene: Scene) -> np.ndarray:
    rot = rotation_matrices(scene)
    diag = np.exp(2.0 * scene.log_scales)
    return np.einsum("kij,kj,klj->kil", rot, diag, rot)


def _quaternion_grad(quats: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through R(q/|q|) back to the raw quaternion."""
    quats = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(quats, axis=1)
    qn = quats / norms[:, None]
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    k = len(quats)
    dr = np.zeros((k, 3, 3, 4))
    zero = np.zeros(k)
    # dR/dw
    dr[:, :, :, 0] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=1),
            np.stack([z, zero, -x], axis=1),
            np.stack([-y, x, zero], axis=1),
        ],
        axis=1,
    )
    # dR/dx
    dr[:, :, :, 1] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=1),
            np.stack([y, -2.0 * x, -w], axis=1),
            np.stack([z, w, -2.0 * x], axis=1),
        ],
        axis=1,
    )
    # dR/dy
    dr[:, :, :, 2] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=1),
            np.stack([x, zero, z], axis=1),
            np.stack([-w, z, -2.0 * y], axis=1),
        ],
        axis=1,
    )
    # dR/dz
    dr[:, :, :, 3] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=1),
            np.stack([w, -2.0 * z, y], axis=1),
            np.stack([x, y, zero], axis=1),
        ],
        axis=1,
    )
    g_qn = np.einsum("kij,kijr->kr", g_rot, dr)
    # Through the normalization q/|q|.
    proj = np.eye(4)[None] - qn[:, :, None] * qn[:, None, :]
    return np.einsum("kij,kj->ki", proj, g_qn) / norms[:, None]
