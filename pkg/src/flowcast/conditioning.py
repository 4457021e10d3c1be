"""Time conditioning: Fourier features, sequence encoding, FiLM parameters.

Scalar flow steps and real-valued timestamps are mapped to sinusoidal
features over octave-spaced frequencies. A variable-length time vector is
reduced by the arithmetic mean of its per-entry features, which keeps the
code dimension fixed and the encoding permutation-invariant. A small MLP
head turns the code into per-block (scale, shift) pairs for feature-wise
modulation inside the velocity network; the modulation is applied as

    (1 + scale) * groupnorm(h) + shift + h

so zero-initialized head outputs start every block at plain norm-plus-skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError, ShapeError


def octave_frequencies(n_freqs: int, base: float = 1.0) -> np.ndarray:
    """Frequencies base * 2**k for k = 0..n_freqs-1."""
    if n_freqs < 1:
        raise ConfigError(f"need at least one frequency, got {n_freqs}")
    return base * np.exp2(np.arange(n_freqs, dtype=np.float64))


@dataclass(frozen=True)
class FourierSpec:
    """Frequency bank for time features; embedding dimension is 2 * n_freqs."""

    n_freqs: int = 8
    freqs: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        freqs = self.freqs
        if freqs is None:
            freqs = octave_frequencies(self.n_freqs)
        freqs = np.asarray(freqs, dtype=np.float64)
        if len(freqs) != self.n_freqs:
            raise ConfigError("freqs length must equal n_freqs")
        if np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
            raise ConfigError("frequencies must be positive and strictly increasing")
        f = freqs.copy()
        f.flags.writeable = False
        object.__setattr__(self, "freqs", f)

    @property
    def dim(self) -> int:
        return 2 * self.n_freqs

    def to_dict(self) -> dict:
        return {"n_freqs": self.n_freqs, "freqs": [repr(float(f)) for f in self.freqs]}

    @classmethod
    def from_dict(cls, d: dict) -> "FourierSpec":
        return cls(
            n_freqs=int(d["n_freqs"]),
            freqs=np.array([float(f) for f in d["freqs"]]),
        )


def fourier_features(t: float, spec: FourierSpec) -> np.ndarray:
    """[sin(2*pi*f_k*t) ... , cos(2*pi*f_k*t) ...], sin block then cos block."""
    if not np.isfinite(t):
        raise DataError(f"cannot encode non-finite time {t}")
    angles = 2.0 * np.pi * spec.freqs * float(t)
    return np.concatenate([np.sin(angles), np.cos(angles)])


def encode_times(times: np.ndarray, spec: FourierSpec) -> np.ndarray:
    """Mean of per-entry features; dimension independent of the entry count."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise DataError("cannot encode an empty time vector")
    angles = 2.0 * np.pi * np.outer(times, spec.freqs)
    return np.concatenate([np.sin(angles).mean(axis=0), np.cos(angles).mean(axis=0)])


def encode_flow_step(tau: float, spec: FourierSpec) -> np.ndarray:
    """Features of the scalar flow step; the discrete variant's only conditioning."""
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"flow step must lie in [0, 1], got {tau}")
    return fourier_features(tau, spec)


@dataclass(frozen=True)
class FilmParams:
    """Raw per-block modulation outputs; the applied scale is 1 + alpha."""

    alpha: np.ndarray
    beta: np.ndarray


class FilmHead(nn.Module):
    """Two-layer head mapping a conditioning code to per-block (alpha, beta).

    A shared affine+SiLU trunk feeds one zero-initialized linear per block,
    so modulation starts at identity and each block's pair matches its
    channel width.
    """

    def __init__(self, code_dim: int, layer_widths: list[int], hidden: int = 64):
        super().__init__()
        if code_dim < 1 or hidden < 1:
            raise ConfigError("code and hidden dims must be positive")
        self.code_dim = code_dim
        self.layer_widths = list(layer_widths)
        self.trunk = nn.Linear(code_dim, hidden)
        self.act = nn.SiLU()
        self.heads = nn.ModuleList(nn.Linear(hidden, 2 * w) for w in layer_widths)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, code: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        if code.shape[-1] != self.code_dim:
            raise ShapeError(
                f"conditioning code dim {code.shape[-1]} != expected {self.code_dim}"
            )
        h = self.act(self.trunk(code))
        out = []
        for head, w in zip(self.heads, self.layer_widths):
            ab = head(h)
            out.append((ab[..., :w], ab[..., w:]))
        return out


def film_from_code(code: np.ndarray, head: FilmHead) -> list[FilmParams]:
    """Evaluate the head on one code vector, returning numpy parameter pairs."""
    dtype = next(head.parameters()).dtype
    with torch.no_grad():
        pairs = head(torch.as_tensor(np.asarray(code), dtype=dtype))
    return [FilmParams(alpha=a.numpy().copy(), beta=b.numpy().copy()) for a, b in pairs]
