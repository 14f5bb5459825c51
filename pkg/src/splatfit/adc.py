"""Adaptive density control: growing, pruning, and opacity maintenance.

Two policies share one pipeline. The "baseline" policy grows primitives whose
view-averaged screen-space positional gradient exceeds a threshold and
periodically hard-resets opacities. The "revised" policy scores primitives by
their blend-weighted share of the per-pixel guiding error (taking the max over
views), corrects opacity on clone so the pair matches the parent's brightness,
rations growth to a fixed fraction of the current count under a global budget,
and replaces opacity resets with a gentle per-run decay.

Every step returns a fresh scene plus a keep_map so the optimizer can carry
moments for surviving primitives and zero them for new ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Scene, logit, rotation_matrices, scene_concat, sigmoid
from .rasterizer import GradientBuffer

_POLICY_DEFAULTS = {
    # policy: (opacity_correction, growth_control, opacity_regularization, grow_threshold)
    "baseline": (False, False, False, 2e-4),
    "revised": (True, True, True, 0.1),
}


@dataclass(frozen=True)
class AdcConfig:
    """Densification settings; None fields resolve to policy defaults.

    split_size_threshold and densify_end depend on the scene/schedule and are
    filled in by `resolve` (0.01 * scene extent and 90% of total iterations).
    """

    policy: str = "revised"
    max_primitives: int = 10_000
    densify_interval: int = 100
    densify_start: int = 100
    densify_end: Optional[int] = None
    grow_threshold: Optional[float] = None
    grow_fraction: float = 0.05
    split_size_threshold: Optional[float] = None
    prune_alpha: float = 0.005
    opacity_correction: Optional[bool] = None
    growth_control: Optional[bool] = None
    opacity_regularization: Optional[bool] = None
    guiding_error: str = "ssim"
    opacity_decay: float = 1e-3
    opacity_floor: float = 1e-5
    reset_interval: int = 3000
    reset_alpha: float = 0.01
    split_factor: float = 1.6
    tau_world_space: bool = False

    def __post_init__(self) -> None:
        if self.policy not in _POLICY_DEFAULTS:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.guiding_error not in ("ssim", "l1"):
            raise ValueError(f"unknown guiding error {self.guiding_error!r}")
        if not 0.0 <= self.grow_fraction:
            raise ValueError("grow_fraction must be non-negative")

    def resolve(self, scene_extent: float, total_iterations: int) -> "AdcConfig":
        """Fill policy-dependent and scene-dependent defaults."""
        oc, gc, oreg, thr = _POLICY_DEFAULTS[self.policy]
        return replace(
            self,
            opacity_correction=oc if self.opacity_correction is None else self.opacity_correction,
            growth_control=gc if self.growth_control is None else self.growth_control,
            opacity_regularization=oreg
            if self.opacity_regularization is None
            else self.opacity_regularization,
            grow_threshold=thr if self.grow_threshold is None else self.grow_threshold,
            split_size_threshold=0.01 * scene_extent
            if self.split_size_threshold is None
            else self.split_size_threshold,
            densify_end=int(round(0.9 * total_iterations))
            if self.densify_end is None
            else self.densify_end,
        )

    def _require_resolved(self) -> None:
        if None in (
            self.opacity_correction,
            self.growth_control,
            self.opacity_regularization,
            self.grow_threshold,
            self.split_size_threshold,
        ):
            raise ValueError("AdcConfig must be resolve()d before use")


@dataclass
class AdcStats:
    """Per-primitive accumulators between densification runs."""

    grad_accum: np.ndarray  # (K,) summed screen-gradient norms over rendered views
    grad_count: np.ndarray  # (K,) number of views the primitive was rendered in
    err_max: np.ndarray  # (K,) max over views of blend-weighted error share

    @classmethod
    def zeros(cls, count: int) -> "AdcStats":
        return cls(
            grad_accum=np.zeros(count),
            grad_count=np.zeros(count, dtype=np.int64),
            err_max=np.zeros(count),
        )

    def __len__(self) -> int:
        return len(self.grad_accum)


def accumulate_view(
    stats: AdcStats,
    grads: GradientBuffer,
    per_primitive_errors: np.ndarray,
    world_space: bool = False,
) -> None:
    """Fold one rendered view into the running densification statistics.

    Screen-space gradients are scaled to half-resolution units (NDC) so the
    conventional 2e-4 threshold keeps its meaning across image sizes.
    """
    if len(stats.grad_accum) != len(grads.opacity_logit):
        raise ValueError("stats/gradient size mismatch")
    errs = np.asarray(per_primitive_errors, dtype=np.float64)
    if errs.shape != stats.err_max.shape:
        raise ValueError("stats/error size mismatch")
    if world_space:
        norms = np.linalg.norm(grads.position, axis=1)
    else:
        w, h = grads.image_size
        norms = np.linalg.norm(grads.mean2d * np.array([w / 2.0, h / 2.0]), axis=1)
    rendered = grads.rendered
    stats.grad_accum[rendered] += norms[rendered]
    stats.grad_count[rendered] += 1
    np.maximum(stats.err_max, errs, out=stats.err_max)


def densification_score(stats: AdcStats, config: AdcConfig) -> np.ndarray:
    """Growth score per primitive: view-averaged gradient norm (baseline) or
    worst-view redistributed error (revised)."""
    if config.policy == "baseline":
        counts = np.maximum(stats.grad_count, 1)
        return np.where(stats.grad_count > 0, stats.grad_accum / counts, 0.0)
    return stats.err_max.copy()


def select_candidates(scores: np.ndarray, config: AdcConfig, current_count: int) -> np.ndarray:
    """Indices to grow, ranked by score descending (ties: lower index first).

    Growth control caps the selection at floor(grow_fraction * current_count);
    the global budget max_primitives - current_count always applies.
    """
    config._require_resolved()
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.flatnonzero(scores > config.grow_threshold)
    if candidates.size == 0:
        return candidates
    order = np.lexsort((candidates, -scores[candidates]))
    ranked = candidates[order]
    cap = max(config.max_primitives - current_count, 0)
    if config.growth_control:
        cap = min(cap, int(np.floor(config.grow_fraction * current_count)))
    return ranked[:cap]


def corrected_opacity(alpha: np.ndarray | float) -> np.ndarray | float:
    """Opacity for each half of a clone so the pair composites like the parent.

    Solves 1 - (1 - a_hat)^2 = alpha: a_hat = 1 - sqrt(1 - alpha); a_hat is
    strictly below alpha on (0, 1), removing the brightness bias of naive
    duplication.
    """
    a = np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0)
    out = 1.0 - np.sqrt(1.0 - a)
    if np.ndim(alpha) == 0:
        return float(out)
    return out


@dataclass
class GrowResult:
    scene: Scene
    keep_map: np.ndarray  # (K_new,) source index in the old scene or -1 for new rows
    n_cloned: int
    n_split: int


def grow(
    scene: Scene, selected_ids: np.ndarray, config: AdcConfig, rng: np.random.Generator
) -> GrowResult:
    """Clone small selected primitives, split large ones (two offspring sampled
    from the parent, scales shrunk by split_factor, parent dropped)."""
    config._require_resolved()
    k = len(scene)
    sel = np.asarray(selected_ids, dtype=np.int64)
    if sel.size == 0:
        return GrowResult(scene.copy(), np.arange(k), 0, 0)
    if sel.min() < 0 or sel.max() >= k:
        raise IndexError("selected ids out of range")

    sizes = np.exp(scene.log_scales[sel]).max(axis=1)
    split_sel = np.sort(sel[sizes > config.split_size_threshold])
    clone_sel = np.sort(sel[sizes <= config.split_size_threshold])

    survivors = np.setdiff1d(np.arange(k), split_sel, assume_unique=True)
    base = scene.take(survivors)
    parts = [base]
    keep_parts = [survivors]

    if clone_sel.size:
        # The clone pair (parent stays a survivor) shares one corrected opacity.
        clones = scene.take(clone_sel)
        if config.opacity_correction:
            corrected = logit(
                np.maximum(corrected_opacity(sigmoid(scene.opacity_logits[clone_sel])), 1e-12)
            )
            clones.opacity_logits = np.asarray(corrected, dtype=np.float64)
            parent_rows = np.searchsorted(survivors, clone_sel)
            base.opacity_logits[parent_rows] = clones.opacity_logits
        parts.append(clones)
        keep_parts.append(np.full(clone_sel.size, -1, dtype=np.int64))

    if split_sel.size:
        parents = scene.take(split_sel)
        rot = rotation_matrices(parents)
        std = np.exp(parents.log_scales)
        z = rng.standard_normal((split_sel.size, 2, scene.dim))
        offsets = np.einsum("kij,koj->koi", rot, std[:, None, :] * z)
        children = parents.take(np.repeat(np.arange(split_sel.size), 2))
        children.positions = children.positions + offsets.reshape(-1, scene.dim)
        children.log_scales = children.log_scales - np.log(config.split_factor)
        parts.append(children)
        keep_parts.append(np.full(2 * split_sel.size, -1, dtype=np.int64))

    merged = scene_concat(parts)
    keep_map = np.concatenate(keep_parts)
    return GrowResult(merged, keep_map, int(clone_sel.size), int(split_sel.size))


@dataclass
class PruneResult:
    scene: Scene
    keep_indices: np.ndarray


def prune(scene: Scene, config: AdcConfig) -> PruneResult:
    """Drop primitives with alpha strictly below the prune threshold."""
    keep = np.flatnonzero(scene.alphas() >= config.prune_alpha)
    return PruneResult(scene.take(keep), keep)


def opacity_post_step(scene: Scene, config: AdcConfig, reset_due: bool = False) -> Scene:
    """Per-run opacity maintenance.

    With opacity regularization on: subtract a constant decay in alpha space
    (floored away from zero so logits stay finite). Otherwise, on the reset
    schedule, clamp alpha to reset_alpha; untouched rows keep their exact
    logits.
    """
    config._require_resolved()
    out = scene.copy()
    if config.opacity_regularization:
        alphas = np.maximum(out.alphas() - config.opacity_decay, config.opacity_floor)
        out.opacity_logits = np.asarray(logit(alphas), dtype=np.float64)
    elif reset_due:
        alphas = out.alphas()
        out.opacity_logits = np.where(
            alphas > config.reset_alpha, logit(config.reset_alpha), out.opacity_logits
        )
    return out


@dataclass
class AdcResult:
    scene: Scene
    stats: AdcStats  # fresh accumulators sized to the new scene
    keep_map: np.ndarray  # (K_new,) old index or -1; drives optimizer-state remap
    event: dict


def run_adc(
    scene: Scene,
    stats: AdcStats,
    config: AdcConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> AdcResult:
    """One densification run: score, select, grow, prune, opacity maintenance.

    Resets the statistics afterwards. The primitive count never exceeds
    max_primitives.
    """
    config._require_resolved()
    if len(stats) != len(scene):
        raise ValueError(f"stats sized {len(stats)} for a scene of {len(scene)} primitives")
    count_before = len(scene)
    scores = densification_score(stats, config)
    selected = select_candidates(scores, config, count_before)
    grown = grow(scene, selected, config, rng)
    pruned = prune(grown.scene, config)
    keep_map = grown.keep_map[pruned.keep_indices]
    # The hard reset fires on the first densification run inside each
    # reset_interval window, so the schedule holds even when the interval is
    # not a multiple of the densification interval.
    reset_due = (
        not config.opacity_regularization
        and config.reset_interval > 0
        and step >= config.reset_interval
        and step % config.reset_interval < config.densify_interval
    )
    final = opacity_post_step(pruned.scene, config, reset_due=reset_due)
    if len(final) > config.max_primitives:
        raise AssertionError("primitive budget exceeded")  # unreachable by construction
    event = {
        "step": int(step),
        "count_before": int(count_before),
        "selected": int(selected.size),
        "clones": grown.n_cloned,
        "splits": grown.n_split,
        "pruned": int(len(grown.scene) - len(pruned.scene)),
        "count_after": int(len(final)),
        "opacity_reset": bool(reset_due),
        "opacity_decayed": bool(config.opacity_regularization),
        "score_quantiles": [float(q) for q in np.quantile(scores, [0.0, 0.25, 0.5, 0.75, 1.0])]
        if count_before
        else [],
    }
    return AdcResult(final, AdcStats.zeros(len(final)), keep_map, event)
