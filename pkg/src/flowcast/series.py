"""Core data types for longitudinal volume series and their on-disk format.

A patient directory holds exactly two files:

``manifest.json``
    ``{"patient_id", "shape": [H, D, W], "timestamps": [...], "target_time",
    "byte_order": "LE", "dtype": "f32"}``. Timestamps and the target time are
    stored as decimal strings (``repr`` of the float) so re-reading them
    reproduces the exact same binary64 values.

``volumes.f32``
    The context volumes concatenated in timestamp order followed by the
    target volume, each row-major (H outermost, W innermost), IEEE-754
    binary32 little-endian.

Every other module consumes volumes through these types; nothing else
re-reads the raw bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

_DTYPE_TAG = "f32"
_BYTE_ORDER_TAG = "LE"


def _freeze(voxels: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(voxels, dtype=np.float32)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """A dense 3D intensity volume, shape (H, D, W), float32.

    Values are expected to be normalized to [0, 1] at rest; only finiteness
    is enforced so intermediate arithmetic results can be wrapped too.
    """

    voxels: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive dims, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "voxels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class VolumeSequence:
    """One patient's ordered context volumes plus the forecasting target.

    ``contexts`` is a list of (Volume, timestamp) with strictly increasing
    non-negative timestamps; all volumes share one shape. In forecasting
    mode (the default) the target time must not precede the last context;
    pass ``allow_past_target=True`` to relax this for interpolation targets.
    """

    contexts: tuple[tuple[Volume, float], ...]
    target: Volume
    target_time: float
    patient_id: str
    allow_past_target: bool = False

    def __post_init__(self):
        contexts = tuple((v, float(t)) for v, t in self.contexts)
        if not contexts:
            raise DataError("sequence needs at least one context volume")
        times = [t for _, t in contexts]
        if times[0] < 0:
            raise DataError("timestamps must be non-negative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"timestamps must be strictly increasing, got {times}")
        shape = contexts[0][0].shape
        for vol, _ in contexts:
            if vol.shape != shape:
                raise ShapeError("all context volumes must share one shape")
        if self.target.shape != shape:
            raise ShapeError("target volume shape differs from contexts")
        if not self.allow_past_target and self.target_time < times[-1]:
            raise DataError(
                f"target_time {self.target_time} precedes last context {times[-1]}"
            )
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "target_time", float(self.target_time))

    @property
    def n_contexts(self) -> int:
        return len(self.contexts)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.target.shape

    @property
    def times(self) -> np.ndarray:
        return np.array([t for _, t in self.contexts], dtype=np.float64)

    def context_stack(self) -> np.ndarray:
        """Context voxels stacked along a leading axis, shape (T, H, D, W)."""
        return np.stack([v.voxels for v, _ in self.contexts])


def write_series(seq: VolumeSequence, dir_path: str | Path) -> None:
    """Write ``manifest.json`` and ``volumes.f32`` for one patient."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "patient_id": seq.patient_id,
        "shape": list(seq.shape),
        "timestamps": [repr(t) for _, t in seq.contexts],
        "target_time": repr(seq.target_time),
        "byte_order": _BYTE_ORDER_TAG,
        "dtype": _DTYPE_TAG,
    }
    (dir_path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    blob = bytearray()
    for vol, _ in seq.contexts:
        blob += vol.voxels.astype("<f4").tobytes(order="C")
    blob += seq.target.voxels.astype("<f4").tobytes(order="C")
    (dir_path / "volumes.f32").write_bytes(bytes(blob))


def read_series(dir_path: str | Path, allow_past_target: bool = False) -> VolumeSequence:
    """Inverse of :func:`write_series`, validating blob length and ordering."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / "manifest.json"
    blob_path = dir_path / "volumes.f32"
    if not manifest_path.is_file() or not blob_path.is_file():
        raise FormatError(f"missing manifest.json or volumes.f32 under {dir_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != _DTYPE_TAG:
        raise FormatError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    if manifest.get("byte_order") != _BYTE_ORDER_TAG:
        raise FormatError(f"unsupported byte-order tag {manifest.get('byte_order')!r}")
    shape = tuple(int(s) for s in manifest["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"bad shape in manifest: {shape}")
    times = [float(t) for t in manifest["timestamps"]]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise FormatError(f"manifest timestamps not strictly increasing: {times}")
    n_frames = len(times) + 1
    voxels_per = int(np.prod(shape))
    expected = n_frames * voxels_per * 4
    blob = blob_path.read_bytes()
    if len(blob) != expected:
        raise FormatError(
            f"volumes.f32 length {len(blob)} != expected {expected} "
            f"({n_frames} frames of {voxels_per} voxels)"
        )
    flat = np.frombuffer(blob, dtype="<f4").reshape(n_frames, *shape)
    contexts = tuple((Volume(flat[i]), times[i]) for i in range(len(times)))
    return VolumeSequence(
        contexts=contexts,
        target=Volume(flat[-1]),
        target_time=float(manifest["target_time"]),
        patient_id=str(manifest["patient_id"]),
        allow_past_target=allow_past_target,
    )


def write_volume(vol: Volume, dir_path: str | Path, meta: dict | None = None) -> None:
    """Write a single volume as ``volume.f32`` + ``volume.json`` (same format tags)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(vol.shape),
        "byte_order": _BYTE_ORDER_TAG,
        "dtype": _DTYPE_TAG,
    }
    if meta:
        header.update(meta)
    (dir_path / "volume.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    (dir_path / "volume.f32").write_bytes(vol.voxels.astype("<f4").tobytes(order="C"))


def read_volume(dir_path: str | Path) -> Volume:
    dir_path = Path(dir_path)
    header = json.loads((dir_path / "volume.json").read_text())
    if header.get("dtype") != _DTYPE_TAG:
        raise FormatError(f"unsupported dtype tag {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    blob = (dir_path / "volume.f32").read_bytes()
    if len(blob) != int(np.prod(shape)) * 4:
        raise FormatError("volume.f32 length does not match header shape")
    return Volume(np.frombuffer(blob, dtype="<f4").reshape(shape))


@dataclass(frozen=True)
class MaskPlan:
    """Frozen per-patient observation masks for one split.

    ``masks`` maps patient id to a boolean vector over the dataset grid's
    slots (true = observed). A context frame counts as observed iff the
    slot its timestamp quantizes to is true. Plans are written once and
    reloaded byte-for-byte so every evaluation of a split sees identical
    missingness.
    """

    split_name: str
    seed: int
    masks: dict[str, tuple[bool, ...]]

    def __post_init__(self):
        masks = {pid: tuple(bool(b) for b in row) for pid, row in self.masks.items()}
        for pid, row in masks.items():
            if not any(row):
                raise DataError(f"mask row for {pid} has no observed slot")
        object.__setattr__(self, "masks", masks)

    def to_json(self) -> str:
        payload = {
            "split": self.split_name,
            "seed": self.seed,
            "masks": {pid: list(row) for pid, row in sorted(self.masks.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MaskPlan":
        payload = json.loads(Path(path).read_text())
        return cls(
            split_name=payload["split"],
            seed=int(payload["seed"]),
            masks={pid: tuple(row) for pid, row in payload["masks"].items()},
        )


def mask_plan_hash(path: str | Path) -> str:
    """SHA-256 of the plan file bytes; recorded in every report."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class SplitManifest:
    """Dataset split listing plus the grid/horizon conventions used to build it."""

    root: str
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    grid: dict | None = None
    horizon: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        splits = [tuple(self.train), tuple(self.val), tuple(self.test)]
        object.__setattr__(self, "train", splits[0])
        object.__setattr__(self, "val", splits[1])
        object.__setattr__(self, "test", splits[2])
        all_ids = [pid for s in splits for pid in s]
        if len(set(all_ids)) != len(all_ids):
            raise DataError("split manifests must be disjoint")

    def split(self, name: str) -> tuple[str, ...]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}, expected train/val/test") from None

    def save(self, path: str | Path) -> None:
        payload = {
            "root": self.root,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "grid": self.grid,
            "horizon": self.horizon,
            "extra": self.extra,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        payload = json.loads(Path(path).read_text())
        return cls(
            root=payload["root"],
            train=tuple(payload["train"]),
            val=tuple(payload["val"]),
            test=tuple(payload["test"]),
            grid=payload.get("grid"),
            horizon=float(payload.get("horizon", 1.0)),
            extra=payload.get("extra", {}),
        )


def load_split_sequences(
    root: str | Path, manifest: SplitManifest, split: str
) -> list[VolumeSequence]:
    root = Path(root)
    return [read_series(root / pid) for pid in manifest.split(split)]
