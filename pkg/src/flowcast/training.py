"""Training loops for both variants, with frozen-mask validation.

Each step draws one flow step per batch element, interpolates the source
stack toward the broadcast target, and regresses the network's output onto
the constant path velocity. Optimization is AdamW under a cosine-annealed
learning rate. Validation runs every epoch on the frozen mask plan (masks
resampled at validation time would make best-epoch selection arbitrary),
and the returned checkpoint is the epoch with the lowest validation NRMSE.

Training-time missingness is data augmentation: each sample's slot mask is
redrawn per step from a seeded stream, with at least one frame always kept.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import FourierSpec, encode_flow_step, encode_times
from .errors import ConfigError, TrainingDivergedError
from .evaluate import ForecastModel, evaluate_sequences
from .flow import broadcast_target, interp_times
from .grid import GridSpec, grid_stack
from .network import NetConfig, VelocityNet, init_network, save_checkpoint
from .series import MaskPlan, SplitManifest, VolumeSequence, read_series


@dataclass(frozen=True)
class TrainConfig:
    variant: str
    epochs: int
    net: NetConfig
    fourier: FourierSpec = field(default_factory=FourierSpec)
    grid: GridSpec | None = None
    seed: int = 0
    lr: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 4
    weight_decay: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    sigma0: float = 0.0
    n_steps_infer: int = 10
    train_missing_prob: float = 0.0
    hide_times: bool = False
    time_scale: float = 1.0
    aggregate: str = "mean"

    def __post_init__(self):
        if self.variant not in ("discrete", "continuous"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.sigma0 < 0 or not 0.0 <= self.train_missing_prob < 1.0:
            raise ConfigError("sigma0 >= 0 and train_missing_prob in [0, 1) required")
        if self.variant == "discrete" and self.grid is None and not self.hide_times:
            raise ConfigError("discrete training needs a grid (or hide_times)")
        if self.hide_times and self.variant != "discrete":
            raise ConfigError("hide_times only applies to the discrete variant")
        if self.net.cond_dim != self.fourier.dim:
            raise ConfigError(
                f"net cond_dim {self.net.cond_dim} != fourier embedding dim {self.fourier.dim}"
            )
        if self.variant == "discrete" and self.grid is not None and self.grid.K != self.net.in_frames:
            raise ConfigError("discrete variant needs net.in_frames == grid.K")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "epochs": self.epochs,
            "net": self.net.to_dict(),
            "fourier": self.fourier.to_dict(),
            "grid": self.grid.to_dict() if self.grid else None,
            "seed": self.seed,
            "lr": self.lr,
            "lr_min": self.lr_min,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "sigma0": self.sigma0,
            "n_steps_infer": self.n_steps_infer,
            "train_missing_prob": self.train_missing_prob,
            "hide_times": self.hide_times,
            "time_scale": self.time_scale,
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            variant=d["variant"],
            epochs=int(d["epochs"]),
            net=NetConfig.from_dict(d["net"]),
            fourier=FourierSpec.from_dict(d["fourier"]),
            grid=GridSpec.from_dict(d["grid"]) if d.get("grid") else None,
            seed=int(d["seed"]),
            lr=float(d["lr"]),
            lr_min=float(d["lr_min"]),
            batch_size=int(d["batch_size"]),
            weight_decay=float(d["weight_decay"]),
            adam_betas=tuple(d["adam_betas"]),
            adam_eps=float(d["adam_eps"]),
            sigma0=float(d["sigma0"]),
            n_steps_infer=int(d["n_steps_infer"]),
            train_missing_prob=float(d["train_missing_prob"]),
            hide_times=bool(d["hide_times"]),
            time_scale=float(d["time_scale"]),
            aggregate=d["aggregate"],
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    net: VelocityNet
    cfg: TrainConfig
    epoch: int
    val_metrics: dict[str, float]
    config_hash: str

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            self.net,
            path,
            extra={
                "train": self.cfg.to_dict(),
                "epoch": self.epoch,
                "val_metrics": self.val_metrics,
                "config_hash": self.config_hash,
            },
        )

    def model(self) -> ForecastModel:
        return ForecastModel(
            net=self.net,
            variant=self.cfg.variant,
            fourier=self.cfg.fourier,
            grid=self.cfg.grid,
            time_scale=self.cfg.time_scale,
            hide_times=self.cfg.hide_times,
            aggregate_mode=self.cfg.aggregate,
        )


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step total_steps."""
    if total_steps <= 0:
        return lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def _sample_mask(seq: VolumeSequence, missing_prob: float, rng: np.random.Generator) -> list[bool]:
    if missing_prob <= 0:
        return [True] * seq.n_contexts
    while True:
        flags = list(rng.random(seq.n_contexts) >= missing_prob)
        if any(flags):
            return flags


def prepare_sample(seq: VolumeSequence, flags: list[bool], cfg: TrainConfig) -> dict:
    """Source stack, broadcast target, and the times feeding the conditioning."""
    frames = [fr for fr, keep in zip(seq.contexts, flags) if keep]
    times = np.array([t for _, t in frames], dtype=np.float64) / cfg.time_scale
    if cfg.variant == "discrete":
        if cfg.hide_times:
            ranked = [(vol, float(i)) for i, (vol, _) in enumerate(frames)]
            x0 = grid_stack(ranked, GridSpec(0.0, 1.0, cfg.net.in_frames))
        else:
            x0 = grid_stack(frames, cfg.grid)
    else:
        if len(frames) > cfg.net.in_frames:
            raise ConfigError(
                f"{len(frames)} observed frames exceed the network's {cfg.net.in_frames} inputs"
            )
        vols = [vol.voxels for vol, _ in frames]
        vols += [vols[-1]] * (cfg.net.in_frames - len(vols))
        x0 = np.stack(vols)
    x1 = broadcast_target(seq.target.voxels, cfg.net.in_frames)
    return {
        "x0": x0.astype(np.float32),
        "x1": x1.astype(np.float32),
        "times": times,
        "t_target": seq.target_time / cfg.time_scale,
    }


def _train_step(
    net: VelocityNet,
    optimizer: torch.optim.Optimizer,
    samples: list[dict],
    cfg: TrainConfig,
    gen: torch.Generator,
    lr_now: float,
) -> float:
    x0 = torch.from_numpy(np.stack([s["x0"] for s in samples]))
    x1 = torch.from_numpy(np.stack([s["x1"] for s in samples]))
    taus = torch.rand(len(samples), generator=gen)
    t_wide = taus[:, None, None, None, None]
    x_tau = (1.0 - t_wide) * x0 + t_wide * x1
    if cfg.sigma0 > 0:
        x_tau = x_tau + cfg.sigma0 * torch.randn(x0.shape, generator=gen)

    codes = np.stack(
        [
            _cond_code(cfg, float(taus[i]), samples[i]["times"], samples[i]["t_target"])
            for i in range(len(samples))
        ]
    )
    code_t = torch.from_numpy(codes.astype(np.float32))

    pred = net(x_tau, code_t)
    loss = torch.mean((pred - (x1 - x0)) ** 2)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss {float(loss)}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for group in optimizer.param_groups:
        group["lr"] = lr_now
    optimizer.step()
    return float(loss.detach())


def _cond_code(cfg: TrainConfig, tau: float, times: np.ndarray, t_target: float) -> np.ndarray:
    if cfg.variant == "discrete":
        return encode_flow_step(tau, cfg.fourier)
    return encode_times(interp_times(times, t_target, tau), cfg.fourier)


def train_step_discrete(
    net: VelocityNet,
    optimizer: torch.optim.Optimizer,
    samples: list[dict],
    cfg: TrainConfig,
    gen: torch.Generator,
    lr_now: float | None = None,
) -> float:
    """One optimization step of the grid variant; returns the scalar loss."""
    if cfg.variant != "discrete":
        raise ConfigError("train_step_discrete needs a discrete config")
    return _train_step(net, optimizer, samples, cfg, gen, lr_now if lr_now is not None else cfg.lr)


def train_step_continuous(
    net: VelocityNet,
    optimizer: torch.optim.Optimizer,
    samples: list[dict],
    cfg: TrainConfig,
    gen: torch.Generator,
    lr_now: float | None = None,
) -> float:
    """One optimization step of the timestamp-conditioned variant."""
    if cfg.variant != "continuous":
        raise ConfigError("train_step_continuous needs a continuous config")
    return _train_step(net, optimizer, samples, cfg, gen, lr_now if lr_now is not None else cfg.lr)


def fit(
    root: str | Path,
    manifest: SplitManifest,
    cfg: TrainConfig,
    val_plan: MaskPlan,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Train for cfg.epochs and return the best-validation-NRMSE checkpoint.

    Writes one JSON line per epoch (epoch 0 is the untrained network) with
    the train loss, validation metrics, and the learning rate in effect.
    Identical seeds, config, and plans reproduce the log bit-for-bit.
    """
    root = Path(root)
    train_seqs = [read_series(root / pid) for pid in manifest.split("train")]
    val_seqs = [read_series(root / pid) for pid in manifest.split(val_plan.split_name)]
    mask_grid = GridSpec.from_dict(manifest.grid) if manifest.grid else GridSpec(0.0, 1.0, 1)

    ss = np.random.SeedSequence(cfg.seed)
    ss_shuffle, ss_masks, ss_torch = ss.spawn(3)
    rng_shuffle = np.random.default_rng(ss_shuffle)
    rng_masks = np.random.default_rng(ss_masks)
    gen = torch.Generator().manual_seed(int(ss_torch.generate_state(1)[0]))

    net = init_network(cfg.net, cfg.seed)
    optimizer = torch.optim.AdamW(
        net.parameters(),
        lr=cfg.lr,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    step_fn = train_step_discrete if cfg.variant == "discrete" else train_step_continuous

    steps_per_epoch = max(1, math.ceil(len(train_seqs) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    config_hash = cfg.config_hash()

    def validate() -> dict[str, float]:
        model = ForecastModel(
            net=net, variant=cfg.variant, fourier=cfg.fourier, grid=cfg.grid,
            time_scale=cfg.time_scale, hide_times=cfg.hide_times, aggregate_mode=cfg.aggregate,
        )
        report = evaluate_sequences(model, val_seqs, val_plan, mask_grid, cfg.n_steps_infer)
        return {f"val_{k}": v for k, v in report.aggregate.items()}

    log_lines: list[dict] = []
    val_metrics = validate()
    best = {
        "epoch": 0,
        "val_metrics": val_metrics,
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
    }
    log_lines.append({"epoch": 0, "train_loss": None, **val_metrics, "lr": cfg.lr})

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(len(train_seqs))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            samples = []
            for i in idx:
                seq = train_seqs[i]
                flags = _sample_mask(seq, cfg.train_missing_prob, rng_masks)
                samples.append(prepare_sample(seq, flags, cfg))
            lr_now = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            epoch_losses.append(step_fn(net, optimizer, samples, cfg, gen, lr_now))
            step += 1
        val_metrics = validate()
        log_lines.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                **val_metrics,
                "lr": cosine_lr(step - 1, total_steps, cfg.lr, cfg.lr_min),
            }
        )
        if val_metrics["val_nrmse"] < best["val_metrics"]["val_nrmse"]:
            best = {
                "epoch": epoch,
                "val_metrics": val_metrics,
                "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
            }

    if log_path is not None:
        text = "".join(json.dumps(line, sort_keys=True) + "\n" for line in log_lines)
        Path(log_path).write_text(text)

    net.load_state_dict(best["state"])
    return Checkpoint(
        net=net,
        cfg=cfg,
        epoch=best["epoch"],
        val_metrics=best["val_metrics"],
        config_hash=config_hash,
    )
