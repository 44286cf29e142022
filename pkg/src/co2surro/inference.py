"""Autoregressive time marching for both pipelines.

ROM: scale -> encode once -> march in latent space -> decode every latent
prediction -> invert scaling. Grid-size-invariant (GSI): march directly on
the scaled physical domain. Both return the same PredictedSeries contract.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import HISTORY, N_FIELDS, ScalerParams, apply_scaler, invert_scaler
from .metrics import PCC_THRESHOLD_DEFAULT, below_threshold, pcc


@dataclass
class RolloutRequest:
    initial_window: np.ndarray          # (3, 4, H, W) physical, unscaled
    n_steps: int
    pipeline: str                       # "rom" | "gsi"
    predictor: torch.nn.Module
    scaler: ScalerParams
    compression: torch.nn.Module | None = None
    clip_scaled: bool = False           # clip outputs to [0,1] in scaled space (off by default:
                                        # out-of-range bright spots stay visible)
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        window = np.asarray(self.initial_window)
        if window.shape[:2] != (HISTORY, N_FIELDS):
            raise ValueError(f"initial window must be ({HISTORY}, {N_FIELDS}, H, W), got {window.shape}")
        if self.n_steps < 1:
            raise ValueError("n_steps >= 1")
        if self.pipeline not in ("rom", "gsi"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.pipeline == "rom" and self.compression is None:
            raise ValueError("rom pipeline needs a compression model")


@dataclass
class PredictedSeries:
    snapshots: np.ndarray               # (n_steps, 4, H, W) physical units
    provenance: dict

    def __len__(self) -> int:
        return len(self.snapshots)


def _march(model: torch.nn.Module, window: torch.Tensor, n_steps: int,
           clip: bool = False) -> list[torch.Tensor]:
    """Slide a 3-snapshot window forward n_steps, feeding predictions back in.
    `window` is (1, 12, H, W); returns the list of (4, H, W) predictions."""
    preds = []
    with torch.no_grad():
        for step in range(n_steps):
            out = model(window)
            if not torch.isfinite(out).all():
                raise FloatingPointError(f"non-finite prediction at step {step + 1}")
            if clip:
                out = out.clamp(0.0, 1.0)
            preds.append(out[0])
            window = torch.cat([window[:, N_FIELDS:], out], dim=1)
    return preds


def _stack_window(window_scaled: np.ndarray) -> torch.Tensor:
    """(3, 4, H, W) scaled history -> (1, 12, H, W) oldest-first input tensor."""
    h, w = window_scaled.shape[-2:]
    stacked = window_scaled.reshape(HISTORY * N_FIELDS, h, w)
    return torch.from_numpy(np.ascontiguousarray(stacked, dtype=np.float32)).unsqueeze(0)


def gsi_predict(request: RolloutRequest) -> PredictedSeries:
    """Grid-size-invariant rollout on the full physical domain."""
    request.validate()
    if request.pipeline != "gsi":
        raise ValueError("gsi_predict requires pipeline='gsi'")
    t0 = time.perf_counter()
    scaled = apply_scaler(np.asarray(request.initial_window), request.scaler)
    request.predictor.eval()
    preds = _march(request.predictor, _stack_window(scaled), request.n_steps, request.clip_scaled)
    scaled_preds = torch.stack(preds).numpy()
    physical = invert_scaler(scaled_preds, request.scaler)
    provenance = {
        "pipeline": "gsi",
        "n_steps": request.n_steps,
        "wall_s": time.perf_counter() - t0,
        **request.provenance,
    }
    return PredictedSeries(snapshots=physical, provenance=provenance)


def rom_predict(request: RolloutRequest) -> PredictedSeries:
    """ROM rollout: the three initial snapshots are encoded once, the whole
    march happens in latent space, and every latent prediction is decoded."""
    request.validate()
    if request.pipeline != "rom":
        raise ValueError("rom_predict requires pipeline='rom'")
    comp = request.compression
    if getattr(comp.spec, "latent_channels", N_FIELDS) != N_FIELDS:
        raise ValueError("latent channel count does not match the predictor field contract")
    t0 = time.perf_counter()
    scaled = apply_scaler(np.asarray(request.initial_window), request.scaler)
    comp.eval()
    request.predictor.eval()
    with torch.no_grad():
        hist = torch.from_numpy(np.ascontiguousarray(scaled, dtype=np.float32))
        latents = comp.encode(hist)                    # (3, 4, H/4, W/4)
        h, w = latents.shape[-2:]
        window = latents.reshape(1, HISTORY * N_FIELDS, h, w)
        latent_preds = _march(request.predictor, window, request.n_steps, request.clip_scaled)
        decoded = comp.decode(torch.stack(latent_preds)).numpy()
    physical = invert_scaler(decoded, request.scaler)
    provenance = {
        "pipeline": "rom",
        "n_steps": request.n_steps,
        "latent_shape": (h, w),
        "wall_s": time.perf_counter() - t0,
        **request.provenance,
    }
    return PredictedSeries(snapshots=physical, provenance=provenance)


def predict(request: RolloutRequest) -> PredictedSeries:
    return rom_predict(request) if request.pipeline == "rom" else gsi_predict(request)


def predict_window_then_handoff(
    request: RolloutRequest,
    truth: np.ndarray,
    threshold: float = PCC_THRESHOLD_DEFAULT,
    metric=pcc,
) -> tuple[PredictedSeries, int]:
    """Evaluation-mode rollout that stops at the first step where the metric
    drops below `threshold` on any field (an undefined metric counts as below).

    `truth` holds the aligned ground-truth snapshots, physical units,
    shape (n_steps, 4, H, W). Returns the predictions up to and including the
    stopping step plus the 1-based stop step (n_steps when never triggered).
    """
    request.validate()
    truth = np.asarray(truth)
    if truth.shape[0] < request.n_steps:
        raise ValueError("ground truth shorter than the requested horizon")
    full = predict(request)
    truth_scaled = apply_scaler(truth[: request.n_steps], request.scaler)
    pred_scaled = apply_scaler(full.snapshots, request.scaler)
    stop_step = request.n_steps
    for step in range(request.n_steps):
        values = [metric(pred_scaled[step, f], truth_scaled[step, f]) for f in range(N_FIELDS)]
        if any(below_threshold(v, threshold) for v in values):
            stop_step = step + 1
            break
    trimmed = PredictedSeries(
        snapshots=full.snapshots[:stop_step],
        provenance={**full.provenance, "stop_step": stop_step, "threshold": threshold},
    )
    return trimmed, stop_step
