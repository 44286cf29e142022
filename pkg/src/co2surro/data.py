"""Data model, min-max scaling, patch/window sampling and the on-disk dataset format.

A simulation is a time-ordered stack of four co-located 2D fields:
CO2 concentration, porosity, velocity-x and velocity-y. Everything
downstream (compression, prediction, evaluation) consumes these stacks
as float32 arrays of shape (T, 4, H, W).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIELD_NAMES = ("concentration", "porosity", "velocity_x", "velocity_y")
LATENT_FIELD_NAMES = ("latent_0", "latent_1", "latent_2", "latent_3")
N_FIELDS = len(FIELD_NAMES)
HISTORY = 3  # timesteps stacked into the 12-channel predictor input

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1
DTYPE_TAG = "float32-le"
LAYOUT_TAG = "timestep-major, field-major, row-major"


class DatasetError(Exception):
    """Raised for malformed dataset directories or manifests."""


@dataclass
class FieldSnapshot:
    """One timestep of the 4-field physical state on an H x W grid."""

    concentration: np.ndarray
    porosity: np.ndarray
    velocity_x: np.ndarray
    velocity_y: np.ndarray

    def validate(self) -> None:
        shape = self.concentration.shape
        for name in FIELD_NAMES:
            grid = getattr(self, name)
            if grid.ndim != 2:
                raise ValueError(f"{name} must be a 2D grid, got ndim={grid.ndim}")
            if grid.shape != shape:
                raise ValueError(f"{name} shape {grid.shape} != {shape}")
            if not np.all(np.isfinite(grid)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.porosity < 0.0) or np.any(self.porosity > 1.0):
            raise ValueError("porosity outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.concentration.shape

    def to_array(self) -> np.ndarray:
        """Stack fields to (4, H, W) in the contractual field order."""
        return np.stack([getattr(self, name) for name in FIELD_NAMES], axis=0)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FieldSnapshot":
        if arr.ndim != 3 or arr.shape[0] != N_FIELDS:
            raise ValueError(f"expected (4, H, W) array, got {arr.shape}")
        return cls(*(np.asarray(arr[i]) for i in range(N_FIELDS)))


@dataclass
class SimulationSeries:
    """Ordered snapshots of one simulation plus grid/time metadata."""

    snapshots: list[FieldSnapshot]
    dx: float
    dt_snapshot: float
    sim_id: str
    seed: int

    def validate(self) -> None:
        if len(self.snapshots) < HISTORY + 1:
            raise ValueError(
                f"series {self.sim_id} needs >= {HISTORY + 1} snapshots, has {len(self.snapshots)}"
            )
        shape = self.snapshots[0].shape
        for snap in self.snapshots:
            if snap.shape != shape:
                raise ValueError(f"series {self.sim_id} has inconsistent grid shapes")
            snap.validate()

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def shape(self) -> tuple[int, int]:
        return self.snapshots[0].shape

    def to_array(self) -> np.ndarray:
        """Stack to (T, 4, H, W) float32."""
        return np.stack([s.to_array() for s in self.snapshots], axis=0).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray, dx: float, dt_snapshot: float, sim_id: str, seed: int) -> "SimulationSeries":
        snaps = [FieldSnapshot.from_array(arr[t]) for t in range(arr.shape[0])]
        return cls(snaps, dx=dx, dt_snapshot=dt_snapshot, sim_id=sim_id, seed=seed)


@dataclass
class ScalerParams:
    """Per-field global min/max for reversible [0, 1] scaling.

    Degenerate fields (max == min) are flagged and scale to all-zeros.
    """

    mins: np.ndarray  # (4,)
    maxs: np.ndarray  # (4,)

    def __post_init__(self) -> None:
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != (N_FIELDS,) or self.maxs.shape != (N_FIELDS,):
            raise ValueError("scaler params must hold one (min, max) pair per field")
        if np.any(self.maxs < self.mins):
            raise ValueError("scaler max < min")

    @property
    def degenerate(self) -> np.ndarray:
        return self.maxs == self.mins

    def to_dict(self) -> dict:
        return {
            "field_order": list(FIELD_NAMES),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.array(d["mins"]), np.array(d["maxs"]))


@dataclass
class WindowSample:
    """One training window: 3 stacked history snapshots and T target snapshots.

    Index record only; `input` / `targets` gather the pixels lazily from the
    scaled base array so that thousands of overlapping windows do not
    duplicate the dataset in memory.
    """

    series_array: np.ndarray = field(repr=False)  # scaled (T, 4, H, W)
    sim_id: str
    t_start: int  # index of the oldest history snapshot
    row: int
    col: int
    size: int
    horizon: int

    @property
    def input(self) -> np.ndarray:
        """(12, size, size): history snapshots stacked oldest-first, field-major inside each step."""
        r, c, s = self.row, self.col, self.size
        window = self.series_array[self.t_start : self.t_start + HISTORY, :, r : r + s, c : c + s]
        return window.reshape(HISTORY * N_FIELDS, s, s)

    @property
    def targets(self) -> np.ndarray:
        """(horizon, 4, size, size)."""
        r, c, s = self.row, self.col, self.size
        t0 = self.t_start + HISTORY
        return self.series_array[t0 : t0 + self.horizon, :, r : r + s, c : c + s]


def fit_scaler(train_series: list[SimulationSeries]) -> ScalerParams:
    """Global per-field extrema over every snapshot of the training split."""
    if not train_series:
        raise ValueError("cannot fit a scaler on an empty training split")
    mins = np.full(N_FIELDS, np.inf)
    maxs = np.full(N_FIELDS, -np.inf)
    for series in train_series:
        arr = series.to_array()
        mins = np.minimum(mins, arr.min(axis=(0, 2, 3)))
        maxs = np.maximum(maxs, arr.max(axis=(0, 2, 3)))
    return ScalerParams(mins, maxs)


def _spans(params: ScalerParams) -> np.ndarray:
    spans = params.maxs - params.mins
    return np.where(params.degenerate, 1.0, spans)  # degenerate fields divide by 1, map to 0


def apply_scaler(arr: np.ndarray, params: ScalerParams) -> np.ndarray:
    """Scale a (..., 4, H, W) array to [0, 1] per field. Degenerate fields map to zeros."""
    arr = np.asarray(arr)
    if arr.shape[-3] != N_FIELDS:
        raise ValueError(f"expected {N_FIELDS} fields on axis -3, got {arr.shape[-3]}")
    mins = params.mins.reshape(N_FIELDS, 1, 1)
    spans = _spans(params).reshape(N_FIELDS, 1, 1)
    scaled = (arr.astype(np.float64) - mins) / spans
    scaled[..., params.degenerate, :, :] = 0.0
    return scaled.astype(np.float32)


def invert_scaler(scaled: np.ndarray, params: ScalerParams, clip: bool = False) -> np.ndarray:
    """Inverse of `apply_scaler`. Out-of-range values are extrapolated linearly
    unless `clip` is set (surrogate overshoot is kept visible by default)."""
    scaled = np.asarray(scaled)
    if scaled.shape[-3] != N_FIELDS:
        raise ValueError(f"expected {N_FIELDS} fields on axis -3, got {scaled.shape[-3]}")
    vals = scaled.astype(np.float64)
    if clip:
        vals = np.clip(vals, 0.0, 1.0)
    mins = params.mins.reshape(N_FIELDS, 1, 1)
    spans = _spans(params).reshape(N_FIELDS, 1, 1)
    out = vals * spans + mins
    out[..., params.degenerate, :, :] = params.mins[params.degenerate].reshape(-1, 1, 1)
    return out.astype(np.float32)


def scale_snapshot(snapshot: FieldSnapshot, params: ScalerParams) -> FieldSnapshot:
    return FieldSnapshot.from_array(apply_scaler(snapshot.to_array(), params))


def unscale_snapshot(snapshot: FieldSnapshot, params: ScalerParams, clip: bool = False) -> FieldSnapshot:
    return FieldSnapshot.from_array(invert_scaler(snapshot.to_array(), params, clip=clip))


def patch_origins(height: int, width: int, patch_size: int, stride: int | None = None) -> list[tuple[int, int]]:
    """Uniform grid of patch origins covering the domain.

    Default stride is non-overlapping tiling; the last row/column of origins
    is shifted inward so every patch lies fully inside the domain.
    """
    if patch_size > min(height, width):
        raise ValueError(f"patch_size {patch_size} exceeds domain {height}x{width}")
    stride = patch_size if stride is None else stride
    if stride <= 0:
        raise ValueError("stride must be positive")

    def axis_origins(extent: int) -> list[int]:
        origins = list(range(0, extent - patch_size + 1, stride))
        if origins[-1] != extent - patch_size:
            origins.append(extent - patch_size)
        return origins

    return [(r, c) for r in axis_origins(height) for c in axis_origins(width)]


def sample_patches(
    series: SimulationSeries | np.ndarray,
    params: ScalerParams | None,
    patch_size: int,
    horizon: int = 1,
    stride: int | None = None,
    divisor: int = 16,
    sim_id: str = "",
) -> list[WindowSample]:
    """Every valid temporal window at every origin of a uniform spatial layout.

    `series` may be a SimulationSeries (scaled here with `params`) or an
    already-scaled (T, 4, H, W) array (pass `params=None`). Temporal windows
    whose horizon would run past the series end are skipped.
    """
    if isinstance(series, SimulationSeries):
        arr = apply_scaler(series.to_array(), params) if params is not None else series.to_array()
        sim_id = series.sim_id
    else:
        arr = np.asarray(series)
    n_steps, _, height, width = arr.shape
    if patch_size % divisor != 0:
        raise ValueError(f"patch_size {patch_size} not divisible by network divisor {divisor}")
    origins = patch_origins(height, width, patch_size, stride)
    samples = []
    for t_start in range(n_steps - HISTORY - horizon + 1):
        for r, c in origins:
            samples.append(
                WindowSample(
                    series_array=arr,
                    sim_id=sim_id,
                    t_start=t_start,
                    row=r,
                    col=c,
                    size=patch_size,
                    horizon=horizon,
                )
            )
    return samples


# --------------------------------------------------------------------------
# On-disk format: human-readable manifest + one raw float32 blob per series.
# --------------------------------------------------------------------------

def write_dataset(series_list: list[SimulationSeries], path: str | Path, latent: bool = False,
                  validate: bool = True) -> None:
    """`validate=False` admits latent stacks and model predictions, whose
    values legitimately fall outside the physical-field invariants."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for series in series_list:
        if validate:
            series.validate()
        arr = series.to_array()
        fname = f"{series.sim_id}.bin"
        arr.astype("<f4").tofile(path / fname)
        entries.append(
            {
                "sim_id": series.sim_id,
                "file": fname,
                "n_snapshots": int(arr.shape[0]),
                "height": int(arr.shape[2]),
                "width": int(arr.shape[3]),
                "dx": float(series.dx),
                "dt_snapshot": float(series.dt_snapshot),
                "seed": int(series.seed),
            }
        )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "field_order": list(LATENT_FIELD_NAMES if latent else FIELD_NAMES),
        "latent": bool(latent),
        "dtype": DTYPE_TAG,
        "layout": LAYOUT_TAG,
        "simulations": entries,
    }
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    expected = list(LATENT_FIELD_NAMES if manifest.get("latent") else FIELD_NAMES)
    if manifest.get("field_order") != expected:
        raise DatasetError(
            f"manifest field order {manifest.get('field_order')} does not match the contract {expected}"
        )
    if manifest.get("dtype") != DTYPE_TAG:
        raise DatasetError(f"unsupported dtype {manifest.get('dtype')}")
    return manifest


def read_dataset(path: str | Path) -> list[SimulationSeries]:
    """Bit-exact inverse of `write_dataset`."""
    path = Path(path)
    manifest = read_manifest(path)
    series_list = []
    for entry in manifest["simulations"]:
        n, h, w = entry["n_snapshots"], entry["height"], entry["width"]
        expected_bytes = n * N_FIELDS * h * w * struct.calcsize("<f")
        blob_path = path / entry["file"]
        if not blob_path.exists():
            raise DatasetError(f"simulation {entry['sim_id']}: missing payload {entry['file']}")
        actual = blob_path.stat().st_size
        if actual != expected_bytes:
            raise DatasetError(
                f"simulation {entry['sim_id']}: payload size mismatch "
                f"(expected {expected_bytes} bytes, found {actual})"
            )
        arr = np.fromfile(blob_path, dtype="<f4").reshape(n, N_FIELDS, h, w)
        series_list.append(
            SimulationSeries.from_array(
                arr,
                dx=entry["dx"],
                dt_snapshot=entry["dt_snapshot"],
                sim_id=entry["sim_id"],
                seed=entry["seed"],
            )
        )
    return series_list


def split_series(series_list: list[SimulationSeries], train_ids: list[str], val_ids: list[str]):
    """Split by whole simulation; ids must be disjoint and present."""
    if set(train_ids) & set(val_ids):
        raise ValueError("train/validation simulation ids overlap")
    by_id = {s.sim_id: s for s in series_list}
    missing = [i for i in list(train_ids) + list(val_ids) if i not in by_id]
    if missing:
        raise ValueError(f"unknown simulation ids in split: {missing}")
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]
