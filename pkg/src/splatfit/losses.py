"""Image losses, per-pixel guiding error, and its redistribution onto primitives.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, C1=0.01^2, C2=0.03^2)
with mirrored borders.  The separable blur is materialized as two small
matrices so its exact adjoint is available for the photometric gradient; both
are validated against a scalar windowed oracle and finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Camera, Scene
from .rasterizer import RenderConfig, RenderOutput, backward, render

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _window1d() -> np.ndarray:
    coords = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    return w / w.sum()


@lru_cache(maxsize=None)
def _blur_matrix(n: int) -> np.ndarray:
    """Row-blur operator with mirrored borders as an (n, n) matrix."""
    half = SSIM_WINDOW // 2
    if n <= half:
        raise ValueError(f"image side {n} too small for a {SSIM_WINDOW}-tap window")
    w = _window1d()
    # np.pad computes the reflected index map for us.
    idx = np.pad(np.arange(n), half, mode="reflect")
    pad = np.zeros((n + 2 * half, n))
    pad[np.arange(n + 2 * half), idx] = 1.0
    conv = np.zeros((n, n + 2 * half))
    for o in range(SSIM_WINDOW):
        conv[np.arange(n), np.arange(n) + o] = w[o]
    return conv @ pad


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable windowed blur along the first two axes."""
    bh = _blur_matrix(x.shape[0])
    bw = _blur_matrix(x.shape[1])
    y = np.tensordot(bh, x, axes=(1, 0))
    return np.moveaxis(np.tensordot(bw, y, axes=(1, 1)), 0, 1)


def _blur_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of _blur (transposed matrices; mirror-pad blur is not
    self-adjoint at the borders)."""
    bh = _blur_matrix(g.shape[0]).T
    bw = _blur_matrix(g.shape[1]).T
    y = np.tensordot(bh, g, axes=(1, 0))
    return np.moveaxis(np.tensordot(bw, y, axes=(1, 1)), 0, 1)


@dataclass
class PixelErrorMap:
    """Non-negative per-pixel guiding error."""

    values: np.ndarray  # (H, W)
    kind: str  # "ssim" | "l1"

    def __post_init__(self) -> None:
        if self.kind not in ("ssim", "l1"):
            raise ValueError(f"unknown guiding error kind {self.kind!r}")


@dataclass
class LossBreakdown:
    total: float
    photometric_l1: float
    photometric_dssim: float
    transmittance_reg: float
    aux: float
    ssim_lambda: float
    transmittance_weight: float


def _as_chw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None]
    return x


def _ssim_channel_stats(x: np.ndarray, y: np.ndarray):
    mu_x = _blur(x)
    mu_y = _blur(y)
    var_x = _blur(x * x) - mu_x * mu_x
    var_y = _blur(y * y) - mu_y * mu_y
    cov = _blur(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Channel-averaged per-pixel SSIM, shape (H, W)."""
    x, y = _as_chw(rendered), _as_chw(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    _, _, a1, a2, b1, b2 = _ssim_channel_stats(x, y)
    return ((a1 * a2) / (b1 * b2)).mean(axis=2)


def ssim_mean_grad(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(mean ssim_map)/d(rendered), same shape as rendered."""
    x, y = _as_chw(rendered), _as_chw(target)
    h, w, c = x.shape
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_channel_stats(x, y)
    s = (a1 * a2) / (b1 * b2)
    u = 1.0 / (h * w * c)  # upstream weight of each per-channel map entry
    g_mu = u * (2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s / b1)
    g_var = u * (-s / b2)
    g_cov = u * (2.0 * a1 / (b1 * b2))
    out = (
        _blur_adjoint(g_mu - 2.0 * mu_x * g_var - mu_y * g_cov)
        + 2.0 * x * _blur_adjoint(g_var)
        + y * _blur_adjoint(g_cov)
    )
    if np.asarray(rendered).ndim == 2:
        return out[:, :, 0]
    return out


def photometric_loss(
    rendered: np.ndarray, target: np.ndarray, ssim_lambda: float = 0.2
) -> LossBreakdown:
    """(1 - lambda) * L1 + lambda * (1 - mean SSIM) / 2."""
    x, y = _as_chw(rendered), _as_chw(target)
    l1 = float(np.abs(x - y).mean())
    dssim = float((1.0 - ssim_map(rendered, target).mean()) / 2.0)
    total = (1.0 - ssim_lambda) * l1 + ssim_lambda * dssim
    return LossBreakdown(
        total=total,
        photometric_l1=l1,
        photometric_dssim=dssim,
        transmittance_reg=0.0,
        aux=0.0,
        ssim_lambda=ssim_lambda,
        transmittance_weight=0.0,
    )


def photometric_grad(
    rendered: np.ndarray, target: np.ndarray, ssim_lambda: float = 0.2
) -> np.ndarray:
    """d(photometric_loss)/d(rendered)."""
    x, y = _as_chw(rendered), _as_chw(target)
    g_l1 = np.sign(x - y) / x.size
    g = (1.0 - ssim_lambda) * g_l1 - 0.5 * ssim_lambda * _as_chw(ssim_mean_grad(rendered, target))
    if np.asarray(rendered).ndim == 2:
        return g[:, :, 0]
    return g


def photometric_bundle(
    rendered: np.ndarray,
    target: np.ndarray,
    ssim_lambda: float = 0.2,
    guiding_kind: str | None = None,
) -> tuple[LossBreakdown, np.ndarray, PixelErrorMap | None]:
    """Loss, gradient, and (optionally) guiding error from one set of SSIM
    statistics.  Matches photometric_loss / photometric_grad /
    guiding_error_map exactly; this is the trainer's per-step fast path."""
    x, y = _as_chw(rendered), _as_chw(target)
    h, w, c = x.shape
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_channel_stats(x, y)
    s = (a1 * a2) / (b1 * b2)
    s_map = s.mean(axis=2)
    l1 = float(np.abs(x - y).mean())
    dssim = float((1.0 - s_map.mean()) / 2.0)
    breakdown = LossBreakdown(
        total=(1.0 - ssim_lambda) * l1 + ssim_lambda * dssim,
        photometric_l1=l1,
        photometric_dssim=dssim,
        transmittance_reg=0.0,
        aux=0.0,
        ssim_lambda=ssim_lambda,
        transmittance_weight=0.0,
    )
    u = 1.0 / (h * w * c)
    g_mu = u * (2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s / b1)
    g_var = u * (-s / b2)
    g_cov = u * (2.0 * a1 / (b1 * b2))
    ssim_grad = (
        _blur_adjoint(g_mu - 2.0 * mu_x * g_var - mu_y * g_cov)
        + 2.0 * x * _blur_adjoint(g_var)
        + y * _blur_adjoint(g_cov)
    )
    grad = (1.0 - ssim_lambda) * (np.sign(x - y) / x.size) - 0.5 * ssim_lambda * ssim_grad
    if np.asarray(rendered).ndim == 2:
        grad = grad[:, :, 0]
    error_map = None
    if guiding_kind == "ssim":
        error_map = PixelErrorMap(np.maximum((1.0 - s_map) / 2.0, 0.0), "ssim")
    elif guiding_kind == "l1":
        error_map = PixelErrorMap(np.abs(x - y).mean(axis=2), "l1")
    elif guiding_kind is not None:
        raise ValueError(f"unknown guiding error kind {guiding_kind!r}")
    return breakdown, grad, error_map


def guiding_error_map(rendered: np.ndarray, target: np.ndarray, kind: str = "ssim") -> PixelErrorMap:
    """Per-pixel error that steers densification; treated as a constant field."""
    if kind == "ssim":
        values = np.maximum((1.0 - ssim_map(rendered, target)) / 2.0, 0.0)
    elif kind == "l1":
        x, y = _as_chw(rendered), _as_chw(target)
        values = np.abs(x - y).mean(axis=2)
    else:
        raise ValueError(f"unknown guiding error kind {kind!r}")
    return PixelErrorMap(values=values, kind=kind)


def aux_error_loss(
    error_map: PixelErrorMap,
    scene: Scene,
    camera: Camera,
    config: RenderConfig = RenderConfig(),
) -> np.ndarray:
    """Per-primitive redistributed error E_k = sum_u E(u) * omega_k(u).

    Implemented as the gradient of an auxiliary image: the error scalars
    e_k (identically zero) are composited like any other per-primitive
    quantity, and <E, rendered_error> pulls exactly E_k back onto e_k while
    every other parameter keeps a zero gradient because e_k == 0.
    """
    out = render(scene, camera, decoder="err", config=config)
    grads = backward(out, image_grad=error_map.values[:, :, None])
    return grads.err_scalar


def transmittance_reg(render_output: RenderOutput) -> float:
    """Mean residual transmittance; drives opacities up when regularized."""
    return float(render_output.residual_transmittance.mean())


def psnr(rendered: np.ndarray, target: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1] images, capped for mse ~ 0."""
    mse = float(((np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(float(10.0 * np.log10(1.0 / mse)), cap)
