"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (a flat JSON object of flag
names); explicit flags override config values. Each run writes a
``run.json`` next to its primary output capturing the fully resolved
configuration, seeds, and the mask-plan hash, so any number in any report
can be regenerated from that record alone. Failures print one line
``<category>: <message>`` on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, FlowcastError


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}")


def _run_record(args: argparse.Namespace, extra: dict | None = None) -> dict:
    payload = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    for key, value in payload.items():
        if isinstance(value, Path):
            payload[key] = str(value)
    payload["version"] = __version__
    if extra:
        payload.update(extra)
    return payload


def _write_run_record(target: Path, record: dict) -> None:
    if target.suffix:
        path = target.with_name(target.stem + ".run.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_data(data_dir: str):
    from .series import SplitManifest

    return SplitManifest.load(Path(data_dir) / "splits.json")


def _write_report_files(report, out_json: Path, title: str) -> None:
    from .report import metrics_figure, write_csv, write_table

    out_json.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_json)
    write_table(report, out_json.with_suffix(".txt"), title=title)
    write_csv(report, out_json.with_suffix(".csv"))
    metrics_figure(report, out_json.with_suffix(".png"))


def cmd_gen_data(args) -> int:
    from .synth import DynamicsSpec, gen_dataset

    spec = DynamicsSpec(
        kind=args.dynamics,
        amplitude=args.amplitude,
        period=args.period,
        rate=args.rate,
        noise_sd=args.noise_sd,
        shape=_parse_ints(args.shape),
        frames=args.frames,
        horizon=args.horizon,
        slot_count=args.slots,
    )
    out = Path(args.out)
    manifest = gen_dataset(args.n, spec, args.seed, out)
    _write_run_record(out, _run_record(args, {"splits": {
        "train": len(manifest.train), "val": len(manifest.val), "test": len(manifest.test),
    }}))
    print(f"wrote {args.n} patients under {out}")
    return 0


def cmd_make_masks(args) -> int:
    from .grid import GridSpec
    from .series import mask_plan_hash
    from .synth import make_masks

    manifest = _load_data(args.data)
    if manifest.grid is None:
        raise ConfigError("dataset manifest has no grid; cannot build slot masks")
    grid = GridSpec.from_dict(manifest.grid)
    plan = make_masks(manifest, args.split, grid, args.missing_prob, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    _write_run_record(out, _run_record(args, {"mask_plan_hash": mask_plan_hash(out)}))
    print(f"wrote mask plan for split {args.split} to {out}")
    return 0


def _train_config(args, manifest):
    from .conditioning import FourierSpec
    from .grid import GridSpec
    from .network import NetConfig
    from .training import TrainConfig

    dynamics = manifest.extra.get("dynamics", {})
    frames = int(dynamics.get("frames", args.frames or 0))
    if frames < 1:
        raise ConfigError("cannot infer the context frame count; pass --frames")
    shape = tuple(dynamics.get("shape", ())) or None

    grid = None
    if args.variant == "discrete" and not args.hide_times:
        if manifest.grid is None:
            raise ConfigError("discrete training needs a dataset grid")
        grid = GridSpec.from_dict(manifest.grid)
    in_frames = grid.K if grid is not None else frames

    fourier = FourierSpec(n_freqs=args.n_freqs)
    net = NetConfig(
        in_frames=in_frames,
        stem_channels=args.stem,
        blocks_per_scale=args.blocks,
        cond_dim=fourier.dim,
        film_hidden=args.film_hidden,
        spatial_shape=shape,
    )
    time_scale = args.time_scale if args.time_scale is not None else manifest.horizon
    return TrainConfig(
        variant=args.variant,
        epochs=args.epochs,
        net=net,
        fourier=fourier,
        grid=grid,
        seed=args.seed,
        lr=args.lr,
        lr_min=args.lr_min,
        batch_size=args.batch,
        weight_decay=args.weight_decay,
        sigma0=args.sigma0,
        n_steps_infer=args.nfe,
        train_missing_prob=args.train_missing_prob,
        hide_times=args.hide_times,
        time_scale=time_scale,
        aggregate=args.aggregate,
    )


def cmd_train(args) -> int:
    import torch

    from .series import MaskPlan, mask_plan_hash
    from .training import fit

    torch.use_deterministic_algorithms(True)
    manifest = _load_data(args.data)
    cfg = _train_config(args, manifest)
    val_plan = MaskPlan.load(args.masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = fit(args.data, manifest, cfg, val_plan, log_path=out / "metrics.jsonl")
    ckpt.save(out / "model.ckpt")
    _write_run_record(out, _run_record(args, {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "mask_plan_hash": mask_plan_hash(args.masks),
        "best_epoch": ckpt.epoch,
        "best_val_metrics": ckpt.val_metrics,
    }))
    print(
        f"trained {cfg.variant} model for {cfg.epochs} epochs; "
        f"best epoch {ckpt.epoch} val_nrmse {ckpt.val_metrics['val_nrmse']:.6f}"
    )
    return 0


def cmd_eval(args) -> int:
    import torch

    from .evaluate import ForecastModel, evaluate_split
    from .report import residual_figure
    from .series import MaskPlan, mask_plan_hash, read_series

    torch.use_deterministic_algorithms(True)
    manifest = _load_data(args.data)
    model = ForecastModel.from_checkpoint(args.ckpt)
    plan = MaskPlan.load(args.masks) if args.masks else None
    meta = {
        "checkpoint": Path(args.ckpt).name,
        "config_hash": model.header.get("config_hash"),
        "mask_plan_hash": mask_plan_hash(args.masks) if args.masks else None,
        "seed": model.header.get("train", {}).get("seed"),
    }
    report = evaluate_split(model, args.data, manifest, args.split, plan, args.nfe, meta=meta)
    out = Path(args.report)
    _write_report_files(report, out, title=f"{model.variant} model on {args.split}")

    pids = manifest.split(args.split)
    if pids:
        seq = read_series(Path(args.data) / pids[0])
        from .evaluate import observed_flags
        from .grid import GridSpec

        mask_grid = GridSpec.from_dict(manifest.grid) if manifest.grid else GridSpec(0.0, 1.0, 1)
        flags = observed_flags(seq, plan.masks[seq.patient_id] if plan else None, mask_grid)
        pred = model.predict(seq, flags, nfe=args.nfe)
        residual_figure(
            pred,
            seq.target.voxels,
            out.with_name(out.stem + "_residual.png"),
            out.with_name(out.stem + "_residual.pgm"),
        )
    _write_run_record(out, _run_record(args, {"meta": report.meta}))
    print(report.to_json(), end="")
    return 0


def cmd_baseline_lci(args) -> int:
    from .evaluate import lci_report
    from .series import MaskPlan, mask_plan_hash

    manifest = _load_data(args.data)
    plan = MaskPlan.load(args.masks) if args.masks else None
    meta = {"mask_plan_hash": mask_plan_hash(args.masks) if args.masks else None}
    report = lci_report(args.data, manifest, args.split, plan, meta=meta)
    if args.report:
        out = Path(args.report)
        _write_report_files(report, out, title=f"LCI baseline on {args.split}")
        _write_run_record(out, _run_record(args, {"meta": report.meta}))
    print(report.to_json(), end="")
    return 0


def cmd_forecast(args) -> int:
    import numpy as np
    import torch

    from .evaluate import ForecastModel, observed_flags
    from .grid import GridSpec
    from .report import mid_slice, residual_figure, write_pgm
    from .series import MaskPlan, Volume, read_series, write_volume

    torch.use_deterministic_algorithms(True)
    manifest = _load_data(args.data)
    model = ForecastModel.from_checkpoint(args.ckpt)
    seq = read_series(Path(args.data) / args.patient)
    plan = MaskPlan.load(args.masks) if args.masks else None
    mask_grid = GridSpec.from_dict(manifest.grid) if manifest.grid else GridSpec(0.0, 1.0, 1)
    flags = observed_flags(seq, plan.masks[seq.patient_id] if plan else None, mask_grid)
    pred = model.predict(seq, flags, nfe=args.nfe, target_time=args.target_time)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target_time = seq.target_time if args.target_time is None else args.target_time
    write_volume(
        Volume(np.asarray(pred, dtype=np.float32)),
        out,
        meta={"patient_id": seq.patient_id, "target_time": repr(float(target_time))},
    )
    write_pgm(mid_slice(pred), out / "prediction_slice.pgm", max_value=1.0)
    residual_figure(pred, seq.target.voxels, out / "residual.png", out / "residual.pgm")
    _write_run_record(out, _run_record(args, {
        "config_hash": model.header.get("config_hash"),
        "variant": model.variant,
    }))
    print(f"forecast for {args.patient} at t={target_time} written to {out}")
    return 0


def cmd_sweep(args) -> int:
    import torch

    from .evaluate import ForecastModel, sweep
    from .report import sweep_figure, write_csv
    from .series import MaskPlan, mask_plan_hash

    torch.use_deterministic_algorithms(True)
    manifest = _load_data(args.data)
    model = ForecastModel.from_checkpoint(args.ckpt)
    plan = MaskPlan.load(args.masks) if args.masks else None
    values: list = list(_parse_floats(args.values))
    if args.axis in ("nfe", "mask-order"):
        values = [int(v) for v in values]
    meta = {
        "checkpoint": Path(args.ckpt).name,
        "mask_plan_hash": mask_plan_hash(args.masks) if args.masks else None,
        "split": args.split,
    }
    reports = sweep(model, args.data, manifest, args.split, plan, args.axis, values, args.nfe, meta=meta)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = [rep.to_dict() for rep in reports]
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for metric in ("ssim", "nrmse"):
        sweep_figure(reports, metric, out.with_name(f"{out.stem}_{metric}.png"))
    for i, rep in enumerate(reports):
        write_csv(rep, out.with_name(f"{out.stem}_{i:02d}.csv"))
    _write_run_record(out, _run_record(args))
    print(f"swept {args.axis} over {values}: {len(reports)} reports -> {out}")
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Flow-matching forecasting of longitudinal 3D volume sequences.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = sub("gen-data", cmd_gen_data, "generate a synthetic longitudinal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--shape", type=str, default="16,16,16")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--dynamics", choices=("pulse", "drift", "growth"), default="pulse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--period", type=float, default=2.0)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--slots", type=int, default=None, help="slot-sampling mode: grid size")

    p = sub("make-masks", cmd_make_masks, "freeze per-patient observation masks for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--missing-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("train", cmd_train, "train a velocity-field model")
    p.add_argument("--variant", choices=("discrete", "continuous"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True, help="frozen validation mask plan")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--sigma0", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stem", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--n-freqs", type=int, default=8)
    p.add_argument("--film-hidden", type=int, default=64)
    p.add_argument("--nfe", type=int, default=10, help="integration steps for validation")
    p.add_argument("--train-missing-prob", type=float, default=0.0)
    p.add_argument("--hide-times", action="store_true")
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--aggregate", choices=("mean", "last"), default="mean")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub("eval", cmd_eval, "evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--masks", default=None)
    p.add_argument("--nfe", type=int, default=10)
    p.add_argument("--report", required=True)

    p = sub("baseline-lci", cmd_baseline_lci, "last-context-image baseline metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--masks", default=None)
    p.add_argument("--report", default=None)

    p = sub("forecast", cmd_forecast, "predict one patient's volume at a target time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--target-time", type=float, default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--nfe", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub("sweep", cmd_sweep, "re-evaluate a checkpoint along one axis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--masks", default=None)
    p.add_argument("--axis", choices=("nfe", "noise", "mask-order"), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--nfe", type=int, default=10, help="base integration steps")
    p.add_argument("--report", required=True)

    return parser, registry


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()

    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            parser.error("--config needs a file path")
        command = next((a for a in argv if not a.startswith("-")), None)
        if command in registry:
            try:
                overrides = json.loads(Path(argv[idx + 1]).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                print(f"config: cannot read {argv[idx + 1]}: {exc}", file=sys.stderr)
                return 2
            known = {action.dest for action in registry[command]._actions}
            mapped = {key.replace("-", "_"): val for key, val in overrides.items()}
            unknown = set(mapped) - known
            if unknown:
                print(f"config: unknown keys {sorted(unknown)}", file=sys.stderr)
                return 2
            registry[command].set_defaults(**mapped)
            for action in registry[command]._actions:
                if action.dest in mapped:
                    action.required = False

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FlowcastError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
