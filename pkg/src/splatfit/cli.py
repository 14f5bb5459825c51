"""Command-line front end: fit, ablate, render, eval.

Exit codes: 0 success, 2 configuration/usage errors, 3 training aborted on a
non-finite loss, 1 anything else.  Every run directory receives a manifest
that fully reproduces the run (resolved config, dataset recipe, seed).

Usage:
    splatfit fit configs/experiment.json --out runs/fit0 [--policy revised]
    splatfit ablate configs/experiment.json --out runs/grid
    splatfit render runs/fit0/snapshot.splt camera.json out.png
    splatfit eval runs/fit0/snapshot.splt dataset.json [--out metrics.json]
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .adc import AdcConfig
from .core import Scene
from .io import (
    PrimitiveSnapshot,
    SyntheticScene,
    camera_from_dict,
    dataset_from_spec,
    load_snapshot,
    save_image,
    save_snapshot,
)
from .rasterizer import RenderConfig, render
from .trainer import (
    TrainConfig,
    TrainingAborted,
    evaluate,
    initial_scene,
    train,
)


class ConfigError(ValueError):
    """Bad configuration file or command arguments."""


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    outputs: dict
    package_version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _build_dataclass(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def _load_json(path: str | Path, where: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{where} not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    return data


ARM_NAMES = (
    "baseline",
    "baseline+oc",
    "baseline+gc",
    "baseline+or",
    "revised",
    "revised-oc",
    "revised-gc",
    "revised-or",
)

_TOGGLE_FIELDS = {
    "oc": "opacity_correction",
    "gc": "growth_control",
    "or": "opacity_regularization",
}


def arm_settings(arm: str) -> tuple[str, dict]:
    """Policy plus toggle overrides for a named ablation arm."""
    if arm not in ARM_NAMES:
        raise ConfigError(f"unknown arm {arm!r}")
    if arm == "baseline":
        return "baseline", {}
    if arm == "revised":
        return "revised", {}
    policy, _, toggle = arm.partition("+") if "+" in arm else arm.partition("-")
    return policy, {_TOGGLE_FIELDS[toggle]: policy == "baseline"}


def _parse_toggles(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        key = key.strip().lower()
        value = value.strip().lower()
        if key not in _TOGGLE_FIELDS or value not in ("on", "off"):
            raise ConfigError(f"bad toggle {pair!r}: expected oc|gc|or=on|off")
        out[_TOGGLE_FIELDS[key]] = value == "on"
    return out


def load_experiment(config: dict) -> tuple[dict, int, float, TrainConfig, dict]:
    """Validate an experiment config; returns (dataset spec, init_count,
    init_opacity, train config, ablate section)."""
    known = {"dataset", "init_count", "init_opacity", "train", "ablate"}
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "dataset" not in config:
        raise ConfigError("config is missing 'dataset'")
    dataset_spec = config["dataset"]
    init_count = int(config.get("init_count", 64))
    init_opacity = float(config.get("init_opacity", 0.1))
    train_section = dict(config.get("train", {}))
    adc_section = dict(train_section.pop("adc", {}))
    render_section = dict(train_section.pop("render", {}))
    adc_cfg = _build_dataclass(AdcConfig, adc_section, "train.adc")
    render_cfg = _build_dataclass(RenderConfig, render_section, "train.render")
    train_cfg = _build_dataclass(
        TrainConfig, {**train_section, "adc": adc_cfg, "render": render_cfg}, "train"
    )
    ablate = dict(config.get("ablate", {}))
    return dataset_spec, init_count, init_opacity, train_cfg, ablate


def _resolved_config_dict(
    dataset_spec: dict, init_count: int, init_opacity: float, train_cfg: TrainConfig
) -> dict:
    cfg = dataclasses.asdict(train_cfg)
    return {
        "dataset": dict(dataset_spec),
        "init_count": init_count,
        "init_opacity": init_opacity,
        "train": cfg,
    }


def _fit_once(
    dataset: SyntheticScene,
    init_count: int,
    init_opacity: float,
    train_cfg: TrainConfig,
    log_fn=None,
):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(0,))
    )
    scene0 = initial_scene(dataset, init_count, rng, init_opacity)
    return train(scene0, dataset, train_cfg, log_fn=log_fn)


def _write_growth(path: Path, growth: list[dict]) -> None:
    lines = ["iteration\tcount\tadded\tpruned"]
    for row in growth:
        lines.append(f"{row['iteration']}\t{row['count']}\t{row['added']}\t{row['pruned']}")
    path.write_text("\n".join(lines) + "\n")


def _write_losses(path: Path, curve: np.ndarray) -> None:
    lines = ["iteration\ttotal\tl1\tdssim\ttransmittance"]
    for i, row in enumerate(curve):
        lines.append(f"{i}\t{row[0]!r}\t{row[1]!r}\t{row[2]!r}\t{row[3]!r}")
    path.write_text("\n".join(lines) + "\n")


def _metrics_payload(report, final_eval: dict) -> dict:
    return {
        "final": final_eval,
        "final_count": report.final_count,
        "iterations": report.iterations,
        "history": report.eval_records[:-1],
    }


def cmd_fit(args: argparse.Namespace) -> int:
    config = _load_json(args.config, "config")
    if "command" in config and "config" in config:  # a manifest; reuse its config
        config = config["config"]
    dataset_spec, init_count, init_opacity, train_cfg, _ = load_experiment(config)

    overrides: dict = {}
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, total_iterations=args.iterations)
    adc_over = _parse_toggles(args.toggle or [])
    if args.policy is not None:
        overrides["policy"] = args.policy
    if args.max_primitives is not None:
        overrides["max_primitives"] = args.max_primitives
    if args.guiding_error is not None:
        overrides["guiding_error"] = args.guiding_error
    if overrides or adc_over:
        try:
            train_cfg = dataclasses.replace(
                train_cfg, adc=dataclasses.replace(train_cfg.adc, **overrides, **adc_over)
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_spec(dataset_spec)
    log_fn = (lambda msg: print(msg, file=sys.stderr)) if not args.quiet else None
    scene, report = _fit_once(dataset, init_count, init_opacity, train_cfg, log_fn)

    snapshot_path = out_dir / "snapshot.splt"
    save_snapshot(scene, snapshot_path)
    # Metrics and renders are recomputed from the reloaded snapshot so that
    # `render(load(snapshot))` reproduces the reported numbers bit for bit.
    reloaded = load_snapshot(snapshot_path).scene
    holdout = [v for i, v in enumerate(dataset.views) if i % train_cfg.holdout_every == 0] or list(
        dataset.views
    )
    final_eval = evaluate(reloaded, holdout, train_cfg.render)
    report.eval_records[-1] = {"iteration": report.iterations, **final_eval}
    for j, view in enumerate(holdout):
        out = render(reloaded, view.camera, "rgb", train_cfg.render)
        save_image(out.image, out_dir / f"render_{j:03d}.png")
        save_image(out.residual_transmittance, out_dir / f"transmittance_{j:03d}.png")

    (out_dir / "metrics.json").write_text(
        json.dumps(_metrics_payload(report, final_eval), indent=2, sort_keys=True) + "\n"
    )
    _write_growth(out_dir / "growth.tsv", report.growth_curve)
    _write_losses(out_dir / "losses.tsv", report.loss_curve)
    with (out_dir / "events.jsonl").open("w") as fh:
        for event in report.adc_events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    manifest = RunManifest(
        command="fit",
        seed=train_cfg.seed,
        config=_resolved_config_dict(dataset_spec, init_count, init_opacity, train_cfg),
        outputs={
            "snapshot": "snapshot.splt",
            "metrics": "metrics.json",
            "growth": "growth.tsv",
            "losses": "losses.tsv",
            "events": "events.jsonl",
        },
    )
    manifest.write(out_dir / "manifest.json")
    print(
        f"fit: {report.final_count} primitives, "
        f"psnr {final_eval['psnr_mean']:.2f}, ssim {final_eval['ssim_mean']:.4f}"
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_json(args.config, "config")
    dataset_spec, init_count, init_opacity, base_train, ablate = load_experiment(config)
    known = {
        "seeds",
        "baseline_max_primitives",
        "baseline_densify_end",
        "revised_grow_threshold",
        "arms",
    }
    unknown = set(ablate) - known
    if unknown:
        raise ConfigError(f"unknown keys in ablate: {sorted(unknown)}")
    seeds = [int(s) for s in ablate.get("seeds", [0, 1, 2])]
    arms = list(ablate.get("arms", ARM_NAMES))
    for arm in arms:
        if arm not in ARM_NAMES:
            raise ConfigError(f"unknown arm {arm!r}")
    baseline_budget = int(ablate.get("baseline_max_primitives", base_train.adc.max_primitives))
    baseline_end = ablate.get("baseline_densify_end", None)
    revised_threshold = ablate.get("revised_grow_threshold", None)
    if revised_threshold is not None:
        revised_threshold = float(revised_threshold)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_spec(dataset_spec)
    log = (lambda msg: print(msg, file=sys.stderr)) if not args.quiet else None

    def arm_config(arm: str, seed: int, budget: int) -> TrainConfig:
        # Toggles start from policy defaults; the arm flips exactly one.  The
        # configured grow_threshold applies to baseline arms only; revised arms
        # use the revised default unless the ablate section overrides it.
        policy, toggles = arm_settings(arm)
        adc = dataclasses.replace(
            base_train.adc,
            policy=policy,
            max_primitives=baseline_budget if arm == "baseline" else budget,
            grow_threshold=base_train.adc.grow_threshold
            if policy == "baseline"
            else revised_threshold,
            opacity_correction=None,
            growth_control=None,
            opacity_regularization=None,
        )
        if policy == "baseline" and baseline_end is not None:
            adc = dataclasses.replace(adc, densify_end=int(baseline_end))
        adc = dataclasses.replace(adc, **toggles)
        return dataclasses.replace(base_train, seed=seed, adc=adc)

    rows: list[dict] = []
    timings: list[dict] = []
    budgets: dict[int, int] = {}
    for seed in seeds:
        cfg = arm_config("baseline", seed, baseline_budget)
        if log:
            log(f"[baseline seed {seed}] free run up to {baseline_budget}")
        started = time.perf_counter()
        scene, report = _fit_once(dataset, init_count, init_opacity, cfg, None)
        timings.append({"arm": "baseline", "seed": seed, "seconds": time.perf_counter() - started})
        final_eval = report.eval_records[-1]
        budgets[seed] = report.final_count
        rows.append(
            _arm_row("baseline", cfg, seed, baseline_budget, report, final_eval)
        )
        _write_growth(out_dir / f"growth_baseline_s{seed}.tsv", report.growth_curve)
        if log:
            log(
                f"[baseline seed {seed}] count {report.final_count} "
                f"ssim {final_eval['ssim_mean']:.4f}"
            )

    for seed in seeds:
        budget = budgets[seed]
        for arm in arms:
            if arm == "baseline":
                continue
            cfg = arm_config(arm, seed, budget)
            started = time.perf_counter()
            scene, report = _fit_once(dataset, init_count, init_opacity, cfg, None)
            timings.append({"arm": arm, "seed": seed, "seconds": time.perf_counter() - started})
            final_eval = report.eval_records[-1]
            rows.append(_arm_row(arm, cfg, seed, budget, report, final_eval))
            _write_growth(out_dir / f"growth_{arm}_s{seed}.tsv", report.growth_curve)
            if log:
                log(
                    f"[{arm} seed {seed}] budget {budget} count {report.final_count} "
                    f"ssim {final_eval['ssim_mean']:.4f}"
                )

    _write_arm_table(out_dir / "arms.tsv", rows)
    # Wall-clock timings go in their own table: arms.tsv and summary.json must
    # stay bitwise reproducible across reruns, and timings never are.
    _write_table(out_dir / "timings.tsv", ["arm", "seed", "seconds"], timings)
    summary = _summarize_arms(rows, arms)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest = RunManifest(
        command="ablate",
        seed=seeds[0] if seeds else 0,
        config={
            **_resolved_config_dict(dataset_spec, init_count, init_opacity, base_train),
            "ablate": {
                "seeds": seeds,
                "arms": arms,
                "baseline_max_primitives": baseline_budget,
                "baseline_densify_end": baseline_end,
                "revised_grow_threshold": revised_threshold,
            },
        },
        outputs={"arms": "arms.tsv", "summary": "summary.json"},
    )
    manifest.write(out_dir / "manifest.json")
    for arm in arms:
        stats = summary["arms"][arm]
        print(f"{arm:12s} ssim {stats['ssim_mean']:.4f} psnr {stats['psnr_mean']:.2f}")
    return 0


def _arm_row(arm, cfg, seed, budget, report, final_eval) -> dict:
    resolved = cfg.adc.resolve(1.0, cfg.total_iterations)
    return {
        "arm": arm,
        "policy": cfg.adc.policy,
        "opacity_correction": bool(resolved.opacity_correction),
        "growth_control": bool(resolved.growth_control),
        "opacity_regularization": bool(resolved.opacity_regularization),
        "seed": seed,
        "budget": budget,
        "final_count": report.final_count,
        "psnr": final_eval["psnr_mean"],
        "ssim": final_eval["ssim_mean"],
    }


def _write_arm_table(path: Path, rows: list[dict]) -> None:
    _write_table(
        path,
        [
            "arm",
            "policy",
            "opacity_correction",
            "growth_control",
            "opacity_regularization",
            "seed",
            "budget",
            "final_count",
            "psnr",
            "ssim",
        ],
        rows,
    )


def _write_table(path: Path, cols: list[str], rows: list[dict]) -> None:
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _summarize_arms(rows: list[dict], arms: list[str]) -> dict:
    per_arm = {}
    for arm in arms:
        sub = [r for r in rows if r["arm"] == arm]
        per_arm[arm] = {
            "seeds": [r["seed"] for r in sub],
            "ssim": [r["ssim"] for r in sub],
            "psnr": [r["psnr"] for r in sub],
            "final_count": [r["final_count"] for r in sub],
            "ssim_mean": float(np.mean([r["ssim"] for r in sub])),
            "psnr_mean": float(np.mean([r["psnr"] for r in sub])),
        }
    return {"arms": per_arm, "layout": {
        "baseline_family": [a for a in arms if a.startswith("baseline")],
        "revised_family": [a for a in arms if a.startswith("revised")],
    }}


def cmd_render(args: argparse.Namespace) -> int:
    snapshot = load_snapshot(args.snapshot)
    camera_spec = _load_json(args.camera, "camera spec")
    camera = camera_from_dict(camera_spec)
    if snapshot.mode != camera.mode:
        raise ConfigError(
            f"snapshot mode {snapshot.mode!r} does not match camera mode {camera.mode!r}"
        )
    out = render(snapshot.scene, camera, "rgb", RenderConfig())
    out_path = Path(args.out)
    save_image(out.image, out_path)
    save_image(out.residual_transmittance, out_path.with_name(out_path.stem + "_transmittance.png"))
    print(f"rendered {len(snapshot.scene)} primitives to {out_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    snapshot = load_snapshot(args.snapshot)
    spec = _load_json(args.dataset, "dataset spec")
    try:
        dataset = dataset_from_spec(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if dataset.views[0].camera.mode != snapshot.mode:
        raise ConfigError(
            f"snapshot mode {snapshot.mode!r} does not match dataset mode "
            f"{dataset.views[0].camera.mode!r}"
        )
    metrics = evaluate(snapshot.scene, dataset.views, RenderConfig())
    payload = {"count": len(snapshot.scene), **metrics}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatfit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a scene to a dataset")
    fit.add_argument("config", help="experiment config JSON (or a fit manifest)")
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--policy", choices=["baseline", "revised"])
    fit.add_argument("--seed", type=int)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--max-primitives", type=int, dest="max_primitives")
    fit.add_argument("--guiding-error", choices=["ssim", "l1"], dest="guiding_error")
    fit.add_argument(
        "--toggle",
        action="append",
        metavar="oc|gc|or=on|off",
        help="override a policy toggle (repeatable)",
    )
    fit.add_argument("--quiet", action="store_true")
    fit.set_defaults(func=cmd_fit)

    ablate = sub.add_parser("ablate", help="run the policy/toggle grid at equal budgets")
    ablate.add_argument("config")
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--quiet", action="store_true")
    ablate.set_defaults(func=cmd_ablate)

    rnd = sub.add_parser("render", help="render a snapshot with a camera spec")
    rnd.add_argument("snapshot")
    rnd.add_argument("camera", help="camera spec JSON")
    rnd.add_argument("out", help="output PNG path")
    rnd.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="evaluate a snapshot against a dataset")
    ev.add_argument("snapshot")
    ev.add_argument("dataset", help="dataset spec JSON")
    ev.add_argument("--out", help="also write metrics JSON here")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
