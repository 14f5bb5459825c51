"""Optimization loop: Adam over primitive parameters with densification runs.

The trainer renders one training view per iteration, pulls the photometric
gradient (and, under the revised policy, the per-pixel guiding error) through
the rasterizer backward pass, steps Adam per parameter group, and hands the
scene to the density controller on its schedule.  Optimizer moments follow
primitives across growth and pruning: survivors keep theirs, new rows start
from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adc import AdcConfig, AdcStats, accumulate_view, run_adc
from .core import Scene, logit, scene_extent
from .losses import photometric_bundle, psnr, ssim_map, transmittance_reg
from .rasterizer import RenderConfig, backward, render

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "features")


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 1000
    seed: int = 0
    ssim_lambda: float = 0.2
    position_lr_init: float = 1.6e-4  # multiplied by the scene extent
    position_lr_final: float = 1.6e-6
    log_scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    opacity_lr: float = 5e-2
    feature_lr: float = 2.5e-3
    photometric_weight: float = 1.0  # debug knob; 0 isolates the auxiliary path
    transmittance_weight: float = 0.1
    eval_interval: int = 0  # 0: evaluate only at the end
    holdout_every: int = 8
    adc: AdcConfig = field(default_factory=AdcConfig)
    render: RenderConfig = field(default_factory=RenderConfig)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> np.ndarray:
    """One Adam update; returns the new parameters and advances `state`."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def _remap_state(state: AdamState, keep_map: np.ndarray) -> AdamState:
    """Carry moments for surviving primitives; new rows (-1) start at zero."""
    kept = keep_map >= 0
    m = np.zeros((len(keep_map),) + state.m.shape[1:])
    v = np.zeros_like(m)
    m[kept] = state.m[keep_map[kept]]
    v[kept] = state.v[keep_map[kept]]
    return AdamState(m=m, v=v, step=state.step)


@dataclass
class TrainReport:
    loss_curve: np.ndarray  # (T, 4): total, l1, dssim, mean residual transmittance
    growth_curve: list[dict]  # one row per densification run plus the initial count
    adc_events: list[dict]
    eval_records: list[dict]
    final_count: int
    iterations: int


def evaluate(
    scene: Scene,
    views: list,
    config: RenderConfig = RenderConfig(),
) -> dict:
    """Render each view and report PSNR / mean SSIM per view plus means."""
    psnrs, ssims = [], []
    for view in views:
        image = render(scene, view.camera, "rgb", config).image
        psnrs.append(psnr(image, view.image))
        ssims.append(float(ssim_map(image, view.image).mean()))
    return {
        "psnr": psnrs,
        "ssim": ssims,
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
    }


def split_views(views: list, holdout_every: int) -> tuple[list, list]:
    """Every holdout_every-th view is held out; a single view serves as both."""
    if len(views) == 1 or holdout_every <= 0:
        return list(views), list(views)
    holdout = [v for i, v in enumerate(views) if i % holdout_every == 0]
    training = [v for i, v in enumerate(views) if i % holdout_every != 0]
    if not training:
        training = list(views)
    return training, holdout


def initial_scene(
    dataset,
    count: int,
    rng: np.random.Generator,
    init_opacity: float = 0.1,
) -> Scene:
    """Seed primitives: a colored grid over the first view (2D) or a uniform
    ball of the dataset extent (3D)."""
    view = dataset.views[0]
    h, w = view.image.shape[:2]
    if view.camera.mode == "2d":
        cols = int(np.ceil(np.sqrt(count * w / h)))
        rows = int(np.ceil(count / cols))
        xs = (np.arange(cols) + 0.5) * w / cols
        ys = (np.arange(rows) + 0.5) * h / rows
        gx, gy = np.meshgrid(xs, ys)
        positions = np.stack([gx.ravel(), gy.ravel()], axis=1)[:count]
        sigma = 0.5 * max(w / cols, h / rows)
        colors = view.image[
            np.clip(positions[:, 1].astype(int), 0, h - 1),
            np.clip(positions[:, 0].astype(int), 0, w - 1),
        ]
        return Scene(
            positions=positions,
            log_scales=np.full((len(positions), 2), np.log(sigma)),
            rotations=np.zeros(len(positions)),
            opacity_logits=np.full(len(positions), logit(init_opacity)),
            features=logit(np.clip(colors, 0.03, 0.97)),
        )
    radius = 0.45 * dataset.extent
    positions = rng.uniform(-radius, radius, size=(count, 3))
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return Scene(
        positions=positions,
        log_scales=np.full((count, 3), np.log(0.05 * dataset.extent)),
        rotations=quats,
        opacity_logits=np.full(count, logit(init_opacity)),
        features=logit(np.clip(rng.uniform(0.3, 0.7, size=(count, 3)), 0.03, 0.97)),
    )


def train(
    scene: Scene,
    dataset,
    config: TrainConfig,
    log_fn: Optional[Callable[[str], None]] = None,
) -> tuple[Scene, TrainReport]:
    """Fit the scene to the dataset; returns the final scene and a report."""
    total = config.total_iterations
    extent = dataset.extent if dataset.extent > 0 else scene_extent(scene)
    adc_cfg = config.adc.resolve(scene_extent=extent, total_iterations=total)
    rcfg = config.render
    train_views, holdout_views = split_views(dataset.views, config.holdout_every)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))

    scene = scene.copy()
    stats = AdcStats.zeros(len(scene))
    states = {
        name: AdamState(
            m=np.zeros_like(getattr(scene, name)), v=np.zeros_like(getattr(scene, name))
        )
        for name in PARAM_GROUPS
    }
    grad_fields = {
        "positions": "position",
        "log_scales": "log_scale",
        "rotations": "rotation",
        "opacity_logits": "opacity_logit",
        "features": "feature",
    }

    def position_lr(it: int) -> float:
        frac = it / max(total, 1)
        return (
            extent
            * config.position_lr_init
            * (config.position_lr_final / config.position_lr_init) ** frac
        )

    losses = np.zeros((total, 4))
    growth_curve = [
        {"iteration": 0, "count": len(scene), "added": 0, "pruned": 0}
    ]
    adc_events: list[dict] = []
    eval_records: list[dict] = []
    revised_scoring = adc_cfg.policy == "revised"
    or_on = bool(adc_cfg.opacity_regularization)

    for it in range(total):
        view = train_views[it % len(train_views)]
        h, w = view.image.shape[:2]
        out = render(scene, view.camera, "rgb", rcfg)
        adc_active = it < adc_cfg.densify_end
        want_guiding = revised_scoring and adc_active
        breakdown, photo_grad, error_map = photometric_bundle(
            out.image,
            view.image,
            config.ssim_lambda,
            guiding_kind=adc_cfg.guiding_error if want_guiding else None,
        )
        treg = transmittance_reg(out)
        total_loss = config.photometric_weight * breakdown.total
        if or_on:
            total_loss += config.transmittance_weight * treg
        if not np.isfinite(total_loss):
            raise TrainingAborted(f"non-finite loss at iteration {it}: {total_loss!r}")
        losses[it] = (total_loss, breakdown.photometric_l1, breakdown.photometric_dssim, treg)

        trans_grad = (
            np.full((h, w), config.transmittance_weight / (h * w)) if or_on else None
        )
        grads = backward(
            out,
            image_grad=config.photometric_weight * photo_grad,
            transmittance_grad=trans_grad,
            aux_pixel_error=error_map.values if error_map is not None else None,
        )

        lrs = {
            "positions": position_lr(it),
            "log_scales": config.log_scale_lr,
            "rotations": config.rotation_lr,
            "opacity_logits": config.opacity_lr,
            "features": config.feature_lr,
        }
        for name in PARAM_GROUPS:
            updated = adam_step(
                getattr(scene, name), getattr(grads, grad_fields[name]), states[name], lrs[name]
            )
            setattr(scene, name, updated)

        if adc_active:
            accumulate_view(
                stats, grads, grads.err_scalar, world_space=adc_cfg.tau_world_space
            )
            due = (
                it >= adc_cfg.densify_start
                and (it - adc_cfg.densify_start) % adc_cfg.densify_interval == 0
            )
            if due:
                result = run_adc(scene, stats, adc_cfg, rng, step=it)
                scene, stats = result.scene, result.stats
                for name in PARAM_GROUPS:
                    states[name] = _remap_state(states[name], result.keep_map)
                adc_events.append(result.event)
                growth_curve.append(
                    {
                        "iteration": it,
                        "count": len(scene),
                        "added": result.event["selected"],
                        "pruned": result.event["pruned"],
                    }
                )
                if log_fn:
                    log_fn(
                        f"iter {it}: adc {result.event['count_before']} -> {len(scene)} "
                        f"(+{result.event['selected']}, -{result.event['pruned']})"
                    )

        if config.eval_interval > 0 and (it + 1) % config.eval_interval == 0 and it + 1 < total:
            record = {"iteration": it + 1, **evaluate(scene, holdout_views, rcfg)}
            eval_records.append(record)
            if log_fn:
                log_fn(
                    f"iter {it + 1}: psnr {record['psnr_mean']:.2f} ssim {record['ssim_mean']:.4f}"
                )

    final_record = {"iteration": total, **evaluate(scene, holdout_views, rcfg)}
    eval_records.append(final_record)
    if log_fn:
        log_fn(
            f"final: count {len(scene)} psnr {final_record['psnr_mean']:.2f} "
            f"ssim {final_record['ssim_mean']:.4f}"
        )
    report = TrainReport(
        loss_curve=losses,
        growth_curve=growth_curve,
        adc_events=adc_events,
        eval_records=eval_records,
        final_count=len(scene),
        iterations=total,
    )
    return scene, report
