"""Evaluation harness: per-patient forecasts, metric reports, and sweeps.

A loaded checkpoint plus its training-time conventions form a
ForecastModel. Prediction always runs the same path: select the observed
context frames (a frame is observed iff the slot its timestamp quantizes
to is true in the mask plan), build the variant's source stack, integrate
the learned field, aggregate the transported stack. Reports carry both the
model's metrics and the last-context-image baseline computed on the exact
same observation pattern, so the two are always comparable row by row.

Sweeps re-evaluate one checkpoint along a single axis: integration step
count, a seeded Gaussian perturbation of the source stack (amplitude 0
reproduces the base report exactly), or zero-shot masking order, which
drops a growing number of frames from the earliest or the latest end of
the context window.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import FourierSpec, encode_flow_step, encode_times
from .errors import ConfigError, DataError, IntegrationDivergedError
from .flow import aggregate, integrate, interp_times
from .grid import GridSpec, grid_stack, quantize
from .metrics import SSIM_WINDOW, lci, metric_triple
from .network import VelocityNet, forward_stack, load_checkpoint
from .series import MaskPlan, SplitManifest, VolumeSequence, read_series

SWEEP_AXES = ("nfe", "noise", "mask-order")
MASK_ORDERS = ("earliest-first", "latest-first")


@dataclass(frozen=True)
class MetricReport:
    """Per-patient and aggregate metrics for one evaluation pass."""

    per_patient: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    lci_per_patient: dict[str, dict[str, float]]
    lci_aggregate: dict[str, float]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_patient": self.per_patient,
            "aggregate": self.aggregate,
            "lci_per_patient": self.lci_per_patient,
            "lci_aggregate": self.lci_aggregate,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            per_patient=d["per_patient"],
            aggregate=d["aggregate"],
            lci_per_patient=d["lci_per_patient"],
            lci_aggregate=d["lci_aggregate"],
            meta=d.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mean_metrics(rows: dict[str, dict[str, float]]) -> dict[str, float]:
    if not rows:
        raise DataError("cannot aggregate an empty report")
    keys = next(iter(rows.values())).keys()
    return {k: float(np.mean([r[k] for r in rows.values()])) for k in keys}


def build_report(
    per_patient: dict[str, dict[str, float]],
    lci_per_patient: dict[str, dict[str, float]],
    meta: dict,
) -> MetricReport:
    meta = dict(meta)
    meta.setdefault("ssim_window", SSIM_WINDOW)
    return MetricReport(
        per_patient=per_patient,
        aggregate=_mean_metrics(per_patient),
        lci_per_patient=lci_per_patient,
        lci_aggregate=_mean_metrics(lci_per_patient),
        meta=meta,
    )


def observed_flags(seq: VolumeSequence, plan_row: tuple[bool, ...] | None, grid: GridSpec) -> list[bool]:
    """Frame-level observation flags: frame i is observed iff its slot is."""
    if plan_row is None:
        return [True] * seq.n_contexts
    flags = [bool(plan_row[quantize(t, grid) - 1]) for t in seq.times]
    if not any(flags):
        raise DataError(f"mask row leaves patient {seq.patient_id} with no observed frame")
    return flags


def drop_order_flags(n_frames: int, order: str, n_masked: int) -> list[bool]:
    """Zero-shot masking pattern: drop ``n_masked`` frames from one end."""
    if order not in MASK_ORDERS:
        raise ConfigError(f"unknown mask order {order!r}, expected {MASK_ORDERS}")
    if not 0 <= n_masked < n_frames:
        raise ConfigError(f"can mask 0..{n_frames - 1} of {n_frames} frames, got {n_masked}")
    flags = [True] * n_frames
    if order == "earliest-first":
        for i in range(n_masked):
            flags[i] = False
    else:
        for i in range(n_masked):
            flags[n_frames - 1 - i] = False
    return flags


@dataclass
class ForecastModel:
    """A trained velocity field plus the conventions needed to drive it."""

    net: VelocityNet
    variant: str
    fourier: FourierSpec
    grid: GridSpec | None = None
    time_scale: float = 1.0
    hide_times: bool = False
    aggregate_mode: str = "mean"
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("discrete", "continuous"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "discrete" and self.grid is None and not self.hide_times:
            raise ConfigError("discrete variant needs a grid (or hidden-times mode)")

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "ForecastModel":
        net, header = load_checkpoint(path)
        train = header.get("train", {})
        grid = train.get("grid")
        return cls(
            net=net,
            variant=train.get("variant", "discrete"),
            fourier=FourierSpec.from_dict(train["fourier"]),
            grid=GridSpec.from_dict(grid) if grid else None,
            time_scale=float(train.get("time_scale", 1.0)),
            hide_times=bool(train.get("hide_times", False)),
            aggregate_mode=train.get("aggregate", "mean"),
            header=header,
        )

    @property
    def in_frames(self) -> int:
        return self.net.cfg.in_frames

    def _velocity(self):
        def vf(x: np.ndarray, code: np.ndarray) -> np.ndarray:
            return forward_stack(self.net, x.astype(np.float32), code)

        return vf

    def source_stack(
        self, seq: VolumeSequence, flags: list[bool]
    ) -> tuple[np.ndarray, np.ndarray]:
        """The variant's source stack and the (normalized) observed times."""
        frames = [fr for fr, keep in zip(seq.contexts, flags) if keep]
        if not frames:
            raise DataError(f"patient {seq.patient_id} has no observed frame")
        times = np.array([t for _, t in frames], dtype=np.float64) / self.time_scale
        if self.variant == "discrete":
            if self.hide_times:
                ranked = [(vol, float(i)) for i, (vol, _) in enumerate(frames)]
                rank_grid = GridSpec(g1=0.0, delta=1.0, K=self.in_frames)
                return grid_stack(ranked, rank_grid), times
            return grid_stack(frames, self.grid), times
        if len(frames) > self.in_frames:
            raise DataError(
                f"{len(frames)} observed frames exceed the network's {self.in_frames} input frames"
            )
        vols = [vol.voxels for vol, _ in frames]
        vols += [vols[-1]] * (self.in_frames - len(vols))
        return np.stack(vols), times

    def _cond_fn(self, seq: VolumeSequence, times: np.ndarray, target_time: float | None):
        if self.variant == "discrete":
            return lambda tau: encode_flow_step(tau, self.fourier)
        t_target = (seq.target_time if target_time is None else target_time) / self.time_scale
        return lambda tau: encode_times(interp_times(times, t_target, tau), self.fourier)

    def predict(
        self,
        seq: VolumeSequence,
        flags: list[bool],
        nfe: int,
        target_time: float | None = None,
        noise_sigma: float = 0.0,
        noise_seed: int | None = None,
    ) -> np.ndarray:
        x0, times = self.source_stack(seq, flags)
        if noise_sigma > 0.0:
            rng = np.random.default_rng(noise_seed)
            x0 = x0 + noise_sigma * rng.standard_normal(x0.shape)
        cond = self._cond_fn(seq, times, target_time)
        transported = integrate(self._velocity(), x0, cond, nfe)
        return aggregate(transported, self.aggregate_mode)

    def predict_batch(
        self,
        seqs: list[VolumeSequence],
        flags_list: list[list[bool]],
        nfe: int,
        noise_sigmas: list[float] | None = None,
        noise_seeds: list[int] | None = None,
        chunk: int = 32,
    ) -> list[np.ndarray]:
        """Transport several patients jointly (one network call per step).

        Same Euler scheme and float64 accumulation as the per-sample path;
        only the batching of network evaluations differs.
        """
        import torch

        out: list[np.ndarray] = []
        dtype = next(self.net.parameters()).dtype
        for start in range(0, len(seqs), chunk):
            group = list(range(start, min(start + chunk, len(seqs))))
            stacks, conds = [], []
            for i in group:
                x0, times = self.source_stack(seqs[i], flags_list[i])
                if noise_sigmas is not None and noise_sigmas[i] > 0.0:
                    rng = np.random.default_rng(noise_seeds[i] if noise_seeds else None)
                    x0 = x0 + noise_sigmas[i] * rng.standard_normal(x0.shape)
                stacks.append(x0)
                conds.append(self._cond_fn(seqs[i], times, None))
            x = np.stack(stacks).astype(np.float64)
            h = 1.0 / nfe
            for j in range(nfe):
                tau = j * h
                codes = np.stack([cond(tau) for cond in conds])
                with torch.no_grad():
                    v = self.net(
                        torch.from_numpy(x.astype(np.float32)),
                        torch.from_numpy(codes.astype(np.float32)),
                    ).numpy()
                x += h * v.astype(np.float64)
                if not np.all(np.isfinite(x)):
                    raise IntegrationDivergedError(f"non-finite state after step {j + 1}/{nfe}")
            out.extend(aggregate(x[k], self.aggregate_mode) for k in range(len(group)))
        return out


def _noise_seed(base_seed: int, patient_id: str, sigma: float) -> int:
    digest = hashlib.sha256(f"{base_seed}:{patient_id}:{repr(sigma)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def evaluate_sequences(
    model: ForecastModel,
    seqs: list[VolumeSequence],
    plan: MaskPlan | None,
    mask_grid: GridSpec,
    nfe: int,
    noise_sigma: float = 0.0,
    mask_override: tuple[str, int] | None = None,
    meta: dict | None = None,
) -> MetricReport:
    """Evaluate preloaded sequences; the core of every report in the package."""
    per_patient: dict[str, dict[str, float]] = {}
    lci_rows: dict[str, dict[str, float]] = {}
    noise_base = plan.seed if plan is not None else 0
    flags_list: list[list[bool]] = []
    for seq in seqs:
        if mask_override is not None:
            order, n_masked = mask_override
            flags_list.append(drop_order_flags(seq.n_contexts, order, n_masked))
        elif plan is not None:
            flags_list.append(observed_flags(seq, plan.masks[seq.patient_id], mask_grid))
        else:
            flags_list.append([True] * seq.n_contexts)
    preds = model.predict_batch(
        seqs,
        flags_list,
        nfe=nfe,
        noise_sigmas=[noise_sigma] * len(seqs),
        noise_seeds=[_noise_seed(noise_base, s.patient_id, noise_sigma) for s in seqs],
    )
    for seq, flags, pred in zip(seqs, flags_list, preds):
        per_patient[seq.patient_id] = metric_triple(pred, seq.target.voxels)
        lci_rows[seq.patient_id] = metric_triple(lci(seq, flags).voxels, seq.target.voxels)
    full_meta = {
        "variant": model.variant,
        "nfe": nfe,
        "aggregate": model.aggregate_mode,
        "noise_sigma": noise_sigma,
        "mask_override": list(mask_override) if mask_override else None,
        "hide_times": model.hide_times,
    }
    full_meta.update(meta or {})
    return build_report(per_patient, lci_rows, full_meta)


def evaluate_split(
    model: ForecastModel,
    root: str | Path,
    manifest: SplitManifest,
    split: str,
    plan: MaskPlan | None,
    nfe: int,
    noise_sigma: float = 0.0,
    mask_override: tuple[str, int] | None = None,
    meta: dict | None = None,
) -> MetricReport:
    seqs = [read_series(Path(root) / pid) for pid in manifest.split(split)]
    mask_grid = GridSpec.from_dict(manifest.grid) if manifest.grid else GridSpec(0.0, 1.0, 1)
    full_meta = {"split": split, "mask_plan_seed": plan.seed if plan else None}
    full_meta.update(meta or {})
    return evaluate_sequences(
        model, seqs, plan, mask_grid, nfe,
        noise_sigma=noise_sigma, mask_override=mask_override, meta=full_meta,
    )


def lci_report(
    root: str | Path,
    manifest: SplitManifest,
    split: str,
    plan: MaskPlan | None,
    meta: dict | None = None,
) -> MetricReport:
    """Standalone baseline report; rows equal the baseline rows of any
    model report evaluated on the same plan."""
    seqs = [read_series(Path(root) / pid) for pid in manifest.split(split)]
    mask_grid = GridSpec.from_dict(manifest.grid) if manifest.grid else GridSpec(0.0, 1.0, 1)
    rows: dict[str, dict[str, float]] = {}
    for seq in seqs:
        flags = observed_flags(seq, plan.masks[seq.patient_id] if plan else None, mask_grid)
        rows[seq.patient_id] = metric_triple(lci(seq, flags).voxels, seq.target.voxels)
    full_meta = {"model": "lci", "split": split, "mask_plan_seed": plan.seed if plan else None}
    full_meta.update(meta or {})
    return build_report(rows, rows, full_meta)


def sweep(
    model: ForecastModel,
    root: str | Path,
    manifest: SplitManifest,
    split: str,
    plan: MaskPlan | None,
    axis: str,
    values: list,
    nfe: int,
    meta: dict | None = None,
) -> list[MetricReport]:
    """Re-evaluate one checkpoint along a single axis.

    ``nfe``: values are integration step counts. ``noise``: values are
    source-perturbation amplitudes (0 reproduces the base report).
    ``mask-order``: values are masked-frame counts, each evaluated under
    both the earliest-first and latest-first protocols.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    reports = []
    for value in values:
        if axis == "nfe":
            rep = evaluate_split(
                model, root, manifest, split, plan, nfe=int(value),
                meta={**(meta or {}), "axis": axis, "value": int(value)},
            )
            reports.append(rep)
        elif axis == "noise":
            rep = evaluate_split(
                model, root, manifest, split, plan, nfe=nfe, noise_sigma=float(value),
                meta={**(meta or {}), "axis": axis, "value": float(value)},
            )
            reports.append(rep)
        else:
            for order in MASK_ORDERS:
                rep = evaluate_split(
                    model, root, manifest, split, plan=None, nfe=nfe,
                    mask_override=(order, int(value)),
                    meta={**(meta or {}), "axis": axis, "value": int(value), "order": order},
                )
                reports.append(rep)
    return reports
