"""Deterministic synthetic longitudinal volumes and frozen mask plans.

Each patient is a soft-edged ellipsoid whose geometry evolves in real
time: a pulsating radius, a linearly drifting center, or monotone growth.
Per-patient latents (base radius, phase, drift direction, brightness) are
drawn from the patient seed, so the target is only predictable from the
contexts together with their timestamps; this keeps timestamps informative
and the forecasting task non-trivial for time-aware models.

Timestamps are sorted uniform draws over the early part of the horizon and
the target falls in the top decile of the horizon, so the forecast gap is
real but the target position stays nearly fixed; the time-blind (grid)
variant needs that, since it carries no target-time conditioning. A slot
mode instead places contexts on a small uniform grid of candidate times
(distinct slots, target at the final slot) for protocols where only
explicit timestamps can disambiguate the phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .grid import GridSpec, quantize
from .series import MaskPlan, SplitManifest, Volume, VolumeSequence, read_series, write_series

KINDS = ("pulse", "drift", "growth")

# Fraction of the horizon available to context timestamps, and the window
# the target time is drawn from. The window is deliberately narrow: the
# grid variant carries no target-time conditioning, so a nearly fixed
# forecast position (as in protocols whose target is the next acquisition)
# keeps its task well-posed while timestamps still vary per patient.
CONTEXT_SPAN = 0.7
TARGET_WINDOW = (0.95, 1.0)


@dataclass(frozen=True)
class DynamicsSpec:
    kind: str = "pulse"
    amplitude: float = 0.3
    # Default period spans two horizons: at most half a pulse cycle fits in
    # [0, horizon], so scenes close in time stay close in content and the
    # target never aliases the earliest frames.
    period: float = 2.0
    rate: float = 0.5
    noise_sd: float = 0.01
    shape: tuple[int, int, int] = (16, 16, 16)
    frames: int = 8
    horizon: float = 1.0
    slot_count: int | None = None
    # Width of the per-patient phase distribution (radians). The full
    # circle makes scene content marginally time-invariant; narrower
    # spreads let absolute time carry content information on its own.
    phase_spread: float = 2.0 * np.pi

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dynamics kind {self.kind!r}, expected {KINDS}")
        if self.kind == "pulse" and self.period <= 0:
            raise ConfigError("pulse dynamics need a positive period")
        if any(s % 8 != 0 for s in self.shape):
            raise ConfigError(f"volume dims {self.shape} must be divisible by 8")
        if self.frames < 1:
            raise ConfigError("need at least one context frame")
        if self.horizon <= 0 or self.noise_sd < 0:
            raise ConfigError("horizon must be positive and noise_sd non-negative")
        if self.slot_count is not None and self.slot_count < self.frames + 1:
            raise ConfigError("slot_count must exceed the context frame count")
        if not 0.0 < self.phase_spread <= 2.0 * np.pi:
            raise ConfigError("phase_spread must lie in (0, 2*pi]")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "amplitude": self.amplitude,
            "period": self.period,
            "rate": self.rate,
            "noise_sd": self.noise_sd,
            "shape": list(self.shape),
            "frames": self.frames,
            "horizon": self.horizon,
            "slot_count": self.slot_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsSpec":
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


def _render_ellipsoid(
    shape: tuple[int, int, int],
    center: np.ndarray,
    radius: float,
    brightness: float,
    edge: float = 2.0,
) -> np.ndarray:
    """Soft-edged ball: intensity ramps from brightness to 0 across ~edge voxels."""
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    ramp = np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)
    return brightness * ramp


def _scene_at(spec: DynamicsSpec, latents: dict, t: float) -> np.ndarray:
    center = latents["center"]
    radius = latents["radius"]
    if spec.kind == "pulse":
        phase = 2.0 * np.pi * t / spec.period + latents["phase"]
        radius = radius * (1.0 + spec.amplitude * np.sin(phase))
    elif spec.kind == "drift":
        center = center + latents["direction"] * spec.rate * t * min(spec.shape)
    else:  # growth
        radius = radius * (1.0 + spec.rate * t)
    return _render_ellipsoid(spec.shape, center, radius, latents["brightness"])


def _draw_latents(spec: DynamicsSpec, rng: np.random.Generator) -> dict:
    """Per-patient scene parameters. Radius and phase carry the forecasting
    signal; center and brightness vary only mildly so they stay nuisance
    dimensions rather than dominating the task."""
    half = min(spec.shape) / 2.0
    center = np.array(spec.shape, dtype=np.float64) / 2.0
    center = center + rng.uniform(-0.02, 0.02, size=3) * min(spec.shape)
    return {
        "center": center,
        "radius": half * rng.uniform(0.40, 0.48),
        "phase": rng.uniform(0.0, spec.phase_spread),
        "direction": _unit(rng.standard_normal(3)),
        "brightness": rng.uniform(0.85, 1.0),
    }


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.array([1.0, 0.0, 0.0])


def _draw_times(spec: DynamicsSpec, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    if spec.slot_count is not None:
        # Contexts occupy distinct slots among the first K-1; the target is
        # a uniformly chosen later slot, so the forecast distance itself is
        # random and only visible through explicit timestamps.
        slot_times = np.linspace(0.0, spec.horizon, spec.slot_count)
        picks = np.sort(rng.choice(spec.slot_count - 1, size=spec.frames, replace=False))
        target_slot = int(rng.integers(picks[-1] + 1, spec.slot_count))
        return slot_times[picks], float(slot_times[target_slot])
    while True:
        times = np.sort(rng.uniform(0.0, CONTEXT_SPAN * spec.horizon, size=spec.frames))
        if spec.frames == 1 or np.min(np.diff(times)) > 1e-9:
            break
    target_time = rng.uniform(TARGET_WINDOW[0] * spec.horizon, TARGET_WINDOW[1] * spec.horizon)
    return times, float(target_time)


def render_oracle(spec: DynamicsSpec, seed: int, t: float) -> np.ndarray:
    """Noise-free scene for a patient at an arbitrary time (ground-truth probe)."""
    rng = np.random.default_rng(seed)
    latents = _draw_latents(spec, rng)
    return np.clip(_scene_at(spec, latents, t), 0.0, 1.0)


def gen_patient(spec: DynamicsSpec, seed: int, patient_id: str = "p0") -> VolumeSequence:
    """Render one patient; identical seeds give bit-identical sequences."""
    rng = np.random.default_rng(seed)
    latents = _draw_latents(spec, rng)
    times, target_time = _draw_times(spec, rng)

    def frame(t: float) -> Volume:
        img = _scene_at(spec, latents, t)
        if spec.noise_sd > 0:
            img = img + spec.noise_sd * rng.standard_normal(spec.shape)
        return Volume(np.clip(img, 0.0, 1.0).astype(np.float32))

    contexts = tuple((frame(t), float(t)) for t in times)
    target = frame(target_time)
    return VolumeSequence(
        contexts=contexts, target=target, target_time=target_time, patient_id=patient_id
    )


def dataset_grid(spec: DynamicsSpec) -> GridSpec:
    """Grid convention recorded with a dataset: K slots over the context span."""
    if spec.slot_count is not None:
        k = spec.slot_count
        return GridSpec(g1=0.0, delta=spec.horizon / (k - 1), K=k)
    k = spec.frames
    if k == 1:
        return GridSpec(g1=0.0, delta=spec.horizon, K=1)
    return GridSpec(g1=0.0, delta=CONTEXT_SPAN * spec.horizon / (k - 1), K=k)


def gen_dataset(
    n_patients: int, spec: DynamicsSpec, seed: int, out_dir: str | Path
) -> SplitManifest:
    """Write n patients plus a 60/20/20 split manifest (seeded shuffle)."""
    if n_patients < 3:
        raise ConfigError("need at least 3 patients to split 60/20/20")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patient_seeds = np.random.SeedSequence(seed).generate_state(n_patients)
    pids = []
    for i in range(n_patients):
        pid = f"p{i:04d}"
        seq = gen_patient(spec, int(patient_seeds[i]), patient_id=pid)
        write_series(seq, out_dir / pid)
        pids.append(pid)

    order = np.random.default_rng(seed).permutation(n_patients)
    n_train = int(round(0.6 * n_patients))
    n_val = int(round(0.2 * n_patients))
    shuffled = [pids[i] for i in order]
    manifest = SplitManifest(
        root=str(out_dir),
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
        grid=dataset_grid(spec).to_dict(),
        horizon=spec.horizon,
        extra={"dynamics": spec.to_dict(), "seed": seed, "patient_seeds": [int(s) for s in patient_seeds]},
    )
    manifest.save(out_dir / "splits.json")
    return manifest


def load_manifest(data_dir: str | Path) -> SplitManifest:
    return SplitManifest.load(Path(data_dir) / "splits.json")


def make_masks(
    manifest: SplitManifest,
    split: str,
    grid: GridSpec,
    missing_prob: float,
    seed: int,
) -> MaskPlan:
    """Frozen Bernoulli slot masks for one split.

    Each patient's row is resampled until at least one of their context
    frames lands in an observed slot, so carry-forward and the
    last-context baseline always have something to work with.
    """
    if not 0.0 <= missing_prob < 1.0:
        raise ConfigError(f"missing_prob must lie in [0, 1), got {missing_prob}")
    rng = np.random.default_rng(seed)
    root = Path(manifest.root)
    masks: dict[str, tuple[bool, ...]] = {}
    for pid in manifest.split(split):
        times = read_series(root / pid).times
        slots = [quantize(t, grid) - 1 for t in times]
        while True:
            row = rng.random(grid.K) >= missing_prob
            if any(row[s] for s in slots):
                break
        masks[pid] = tuple(bool(b) for b in row)
    if not masks:
        raise DataError(f"split {split!r} has no patients")
    return MaskPlan(split_name=split, seed=seed, masks=masks)
