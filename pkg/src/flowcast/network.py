"""Residual 3D conv U-Net velocity field with feature-wise time conditioning.

Context frames enter as channels of one joint volume: a 1x1x1 stem mixes
the T input frames, four scales of residual blocks with group norm and
SiLU follow (stride-2 convs down, trilinear upsample + conv and
concatenated skips up), and a two-conv head emits one channel per output
frame, so the T per-frame transports are produced jointly in a single
pass. Modulation parameters for every block come from one FilmHead over
the conditioning code.

The final 1x1x1 conv and all modulation outputs are zero-initialized, so a
fresh network is the zero velocity field and integration starts out as the
identity transport.

Checkpoints are a single file: one compact JSON header line (config,
parameter count, byte length, plus any run metadata), a newline, then the
parameters flattened in declaration order as float32 little-endian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import FilmHead
from .errors import ConfigError, FormatError, ShapeError

N_SCALES = 4
DOWN_FACTOR = 2 ** (N_SCALES - 1)


@dataclass(frozen=True)
class NetConfig:
    in_frames: int
    stem_channels: int = 8
    expansion_rates: tuple[int, ...] = (1, 1, 2, 4)
    blocks_per_scale: int = 1
    norm_groups: int = 8
    cond_dim: int = 16
    film_hidden: int = 64
    single_out_channel: bool = False
    use_attention: bool = False
    spatial_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.in_frames < 1:
            raise ConfigError("need at least one input frame")
        if len(self.expansion_rates) != N_SCALES:
            raise ConfigError(f"exactly {N_SCALES} scales are supported")
        if self.stem_channels < 1 or self.blocks_per_scale < 1:
            raise ConfigError("stem_channels and blocks_per_scale must be positive")
        for w in self.widths:
            g = min(self.norm_groups, w)
            if w % g != 0:
                raise ConfigError(f"channel width {w} not divisible by group count {g}")
        if self.spatial_shape is not None:
            object.__setattr__(self, "spatial_shape", tuple(int(s) for s in self.spatial_shape))
            if any(s % DOWN_FACTOR != 0 for s in self.spatial_shape):
                raise ConfigError(
                    f"spatial dims {self.spatial_shape} must be divisible by {DOWN_FACTOR}"
                )
        object.__setattr__(self, "expansion_rates", tuple(int(r) for r in self.expansion_rates))

    @property
    def widths(self) -> list[int]:
        return [self.stem_channels * r for r in self.expansion_rates]

    @property
    def out_frames(self) -> int:
        return 1 if self.single_out_channel else self.in_frames

    def groups_for(self, width: int) -> int:
        return min(self.norm_groups, width)

    def block_widths(self) -> list[int]:
        """Output width of every residual block, in forward order."""
        w = self.widths
        enc = [w[s] for s in range(N_SCALES) for _ in range(self.blocks_per_scale)]
        dec = [w[s] for s in range(N_SCALES - 2, -1, -1) for _ in range(self.blocks_per_scale)]
        return enc + dec

    def to_dict(self) -> dict:
        return {
            "in_frames": self.in_frames,
            "stem_channels": self.stem_channels,
            "expansion_rates": list(self.expansion_rates),
            "blocks_per_scale": self.blocks_per_scale,
            "norm_groups": self.norm_groups,
            "cond_dim": self.cond_dim,
            "film_hidden": self.film_hidden,
            "single_out_channel": self.single_out_channel,
            "use_attention": self.use_attention,
            "spatial_shape": list(self.spatial_shape) if self.spatial_shape else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            in_frames=int(d["in_frames"]),
            stem_channels=int(d["stem_channels"]),
            expansion_rates=tuple(d["expansion_rates"]),
            blocks_per_scale=int(d["blocks_per_scale"]),
            norm_groups=int(d["norm_groups"]),
            cond_dim=int(d["cond_dim"]),
            film_hidden=int(d["film_hidden"]),
            single_out_channel=bool(d.get("single_out_channel", False)),
            use_attention=bool(d.get("use_attention", False)),
            spatial_shape=tuple(d["spatial_shape"]) if d.get("spatial_shape") else None,
        )


class ResBlock3d(nn.Module):
    """conv-norm-modulate-SiLU-conv-norm with an additive skip.

    The modulation sits after the first norm: (1 + alpha) * gn(a) + beta + a
    where a is the first conv's output. The skip uses a 1x1x1 projection
    when the input and output widths differ.
    """

    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.gn1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, cout)
        self.proj = nn.Conv3d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        a = self.conv1(x)
        g = self.gn1(a)
        g = (1.0 + alpha[:, :, None, None, None]) * g + beta[:, :, None, None, None] + a
        h = self.conv2(F.silu(g))
        h = self.gn2(h)
        skip = self.proj(x) if self.proj is not None else x
        return h + skip


class VelocityNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        if cfg.use_attention:
            raise ConfigError(
                "the windowed-attention bottleneck is not implemented; "
                "set use_attention=False"
            )
        self.cfg = cfg
        w = cfg.widths
        bps = cfg.blocks_per_scale

        self.stem = nn.Conv3d(cfg.in_frames, w[0], 1)
        self.enc_blocks = nn.ModuleList(
            nn.ModuleList(ResBlock3d(w[s], w[s], cfg.groups_for(w[s])) for _ in range(bps))
            for s in range(N_SCALES)
        )
        self.downs = nn.ModuleList(
            nn.Conv3d(w[s], w[s + 1], 3, stride=2, padding=1) for s in range(N_SCALES - 1)
        )
        self.up_convs = nn.ModuleList(
            nn.Conv3d(w[s + 1], w[s], 3, padding=1) for s in range(N_SCALES - 2, -1, -1)
        )
        self.dec_blocks = nn.ModuleList()
        for s in range(N_SCALES - 2, -1, -1):
            blocks = [ResBlock3d(2 * w[s], w[s], cfg.groups_for(w[s]))]
            blocks += [ResBlock3d(w[s], w[s], cfg.groups_for(w[s])) for _ in range(bps - 1)]
            self.dec_blocks.append(nn.ModuleList(blocks))
        self.head_conv = nn.Conv3d(w[0], w[0], 3, padding=1)
        self.head_out = nn.Conv3d(w[0], cfg.out_frames, 1)
        self.film = FilmHead(cfg.cond_dim, cfg.block_widths(), hidden=cfg.film_hidden)

    def forward(self, x: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_frames:
            raise ShapeError(
                f"expected input (B, {self.cfg.in_frames}, H, D, W), got {tuple(x.shape)}"
            )
        if any(s % DOWN_FACTOR != 0 for s in x.shape[2:]):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {DOWN_FACTOR}"
            )
        pairs = iter(self.film(code))

        h = self.stem(x)
        skips = []
        for s in range(N_SCALES):
            for block in self.enc_blocks[s]:
                h = block(h, *next(pairs))
            if s < N_SCALES - 1:
                skips.append(h)
                h = self.downs[s](h)
        for i, s in enumerate(range(N_SCALES - 2, -1, -1)):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = self.up_convs[i](h)
            h = torch.cat([h, skips[s]], dim=1)
            for block in self.dec_blocks[i]:
                h = block(h, *next(pairs))
        out = self.head_out(F.silu(self.head_conv(h)))
        if self.cfg.single_out_channel:
            out = out.expand(-1, self.cfg.in_frames, -1, -1, -1)
        return out


def init_network(cfg: NetConfig, seed: int) -> VelocityNet:
    """Build a network with seeded fan-in uniform conv/linear weights.

    Biases start at zero; the modulation head outputs and the final 1x1x1
    conv are re-zeroed so the fresh network is the zero velocity field.
    Identical seeds give bit-identical parameters.
    """
    net = VelocityNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv3d, nn.Linear)):
                fan_in = module.weight.shape[1] * math.prod(module.weight.shape[2:])
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        for head in net.film.heads:
            head.weight.zero_()
            head.bias.zero_()
        net.head_out.weight.zero_()
        net.head_out.bias.zero_()
    return net


def expected_param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count, independent of module introspection."""

    def conv(cin, cout, k):
        return cin * cout * k**3 + cout

    def block(cin, cout):
        n = conv(cin, cout, 3) + 2 * cout  # conv1 + gn1
        n += conv(cout, cout, 3) + 2 * cout  # conv2 + gn2
        if cin != cout:
            n += conv(cin, cout, 1)
        return n

    w = cfg.widths
    bps = cfg.blocks_per_scale
    total = conv(cfg.in_frames, w[0], 1)
    for s in range(N_SCALES):
        total += bps * block(w[s], w[s])
    for s in range(N_SCALES - 1):
        total += conv(w[s], w[s + 1], 3)
    for s in range(N_SCALES - 2, -1, -1):
        total += conv(w[s + 1], w[s], 3)
        total += block(2 * w[s], w[s]) + (bps - 1) * block(w[s], w[s])
    total += conv(w[0], w[0], 3) + conv(w[0], cfg.out_frames, 1)
    total += cfg.cond_dim * cfg.film_hidden + cfg.film_hidden
    for bw in cfg.block_widths():
        total += cfg.film_hidden * 2 * bw + 2 * bw
    return total


def forward_stack(net: VelocityNet, stack: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Single-sample forward: (T, H, D, W) stack + code vector -> velocity stack."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(np.ascontiguousarray(stack), dtype=dtype)[None]
        c = torch.as_tensor(np.asarray(code), dtype=dtype)[None]
        return net(x, c)[0].numpy().copy()


def velocity_loss_gradients(
    net: VelocityNet, stack: np.ndarray, code: np.ndarray, u: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the mean squared velocity error
    with respect to every parameter, including the conditioning head."""
    dtype = next(net.parameters()).dtype
    net.zero_grad(set_to_none=True)
    x = torch.as_tensor(np.ascontiguousarray(stack), dtype=dtype)[None]
    c = torch.as_tensor(np.asarray(code), dtype=dtype)[None]
    target = torch.as_tensor(np.ascontiguousarray(u), dtype=dtype)[None]
    pred = net(x, c)
    loss = torch.mean((pred - target) ** 2)
    loss.backward()
    grads = {}
    for name, p in net.named_parameters():
        grads[name] = (
            p.grad.detach().numpy().copy()
            if p.grad is not None
            else np.zeros(tuple(p.shape), dtype=np.float64)
        )
    return grads


def parameter_blob(net: VelocityNet) -> bytes:
    return b"".join(
        p.detach().cpu().numpy().astype("<f4").tobytes(order="C") for p in net.parameters()
    )


def save_checkpoint(net: VelocityNet, path: str | Path, extra: dict | None = None) -> None:
    blob = parameter_blob(net)
    header = {
        "net": net.cfg.to_dict(),
        "param_count": sum(p.numel() for p in net.parameters()),
        "byte_length": len(blob),
    }
    if extra:
        overlap = set(extra) & set(header)
        if overlap:
            raise ConfigError(f"checkpoint extra keys collide with header: {overlap}")
        header.update(extra)
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob)


def load_checkpoint(path: str | Path) -> tuple[VelocityNet, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint has no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    blob = raw[nl + 1 :]
    if len(blob) != header["byte_length"]:
        raise FormatError(
            f"checkpoint blob length {len(blob)} != header byte_length {header['byte_length']}"
        )
    cfg = NetConfig.from_dict(header["net"])
    net = VelocityNet(cfg)
    count = sum(p.numel() for p in net.parameters())
    if count != header["param_count"]:
        raise FormatError(
            f"checkpoint parameter count {header['param_count']} != config's {count}"
        )
    if count * 4 != len(blob):
        raise FormatError("checkpoint blob length inconsistent with parameter count")
    flat = np.frombuffer(blob, dtype="<f4")
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            chunk = flat[offset : offset + n].reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(chunk.copy()))
            offset += n
    return net, header
