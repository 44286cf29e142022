"""Picklable training probes for memory/time profiling.

`profile_run` spawns a fresh process per probe, so these entry points live at
module level and take plain-dict payloads. The setup stage loads and windows
the data (excluded from the memory baseline); the run stage builds the model
and trains, which is the footprint the table reports.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import inference as inf_mod
from . import metrics as metrics_mod
from . import predictors as pred_mod


def stage_windows(payload: dict) -> dict:
    """Child-process setup: load the dataset, scale, and build window samples."""
    series = data_mod.read_dataset(payload["dataset"])
    params = data_mod.ScalerParams.from_dict(payload["scaler"])
    samples = []
    for s in series[: payload.get("n_series", 2)]:
        arr = data_mod.apply_scaler(s.to_array(), params)
        if payload.get("latent_shaped"):
            arr = arr[:, :, :: 4, :: 4].copy()  # latent-resolution probe (4x per dimension)
        patch = payload["patch"] or arr.shape[-2]
        samples.extend(
            data_mod.sample_patches(arr, None, patch, horizon=payload["horizon"],
                                    divisor=payload["divisor"], sim_id=s.sim_id)
        )
    rng = np.random.default_rng(0)
    keep = rng.permutation(len(samples))[: payload["samples"]]
    return {**payload, "windows": [samples[i] for i in keep]}


def train_probe(staged: dict) -> None:
    """Short training run whose peak memory stands in for the full regime."""
    spec = pred_mod.PredictorSpec(variant=staged["variant"], depth=staged["depth"],
                                  base_width=staged["base_width"])
    model = pred_mod.build_predictor(spec, seed=0)
    cfg = pred_mod.TrainConfig(epochs=staged["epochs"], batch_size=staged["batch_size"], seed=0)
    windows = staged["windows"]
    if staged["horizon"] == 1:
        pred_mod.train_one_step(model, windows, windows[:2], pred_mod.LossConfig(), cfg)
    else:
        pred_mod.train_rollout(model, windows, windows[:2],
                               pred_mod.RolloutConfig(horizon=staged["horizon"]),
                               pred_mod.LossConfig(), cfg)


def probe_payload(cfg, regime: str, variant: str, horizon: int = 1) -> dict:
    """Probe description for one profiling row of a run config."""
    p = cfg.predictor
    spec = pred_mod.PredictorSpec(variant=variant, depth=p.depth, base_width=p.base_width)
    return {
        "dataset": str(Path(cfg.data.path) if cfg.data.path else cfg.run_dir / "dataset"),
        "scaler": json.loads((cfg.run_dir / "scaler.json").read_text()),
        "variant": variant,
        "depth": p.depth,
        "base_width": p.base_width,
        "divisor": spec.divisor,
        "patch": None if regime in ("whole", "rom") else p.patch_size,
        "latent_shaped": regime == "rom",
        "horizon": horizon,
        "epochs": cfg.profile.epochs,
        "batch_size": cfg.profile.batch_size,
        "samples": cfg.profile.samples,
    }


def inference_wall(cfg, variant: str) -> tuple[float, int]:
    """Wall time of one full-domain autoregressive rollout (timing only,
    untrained weights)."""
    series = data_mod.read_dataset(Path(cfg.data.path) if cfg.data.path else cfg.run_dir / "dataset")
    s = series[0]
    params = data_mod.ScalerParams.from_dict(json.loads((cfg.run_dir / "scaler.json").read_text()))
    spec = pred_mod.PredictorSpec(variant=variant, depth=cfg.predictor.depth,
                                  base_width=cfg.predictor.base_width)
    model = pred_mod.build_predictor(spec, seed=0)
    n_steps = cfg.profile.inference_steps or (len(s) - data_mod.HISTORY)
    request = inf_mod.RolloutRequest(
        initial_window=s.to_array()[: data_mod.HISTORY], n_steps=n_steps,
        pipeline="gsi", predictor=model, scaler=params,
    )
    t0 = time.perf_counter()
    with torch.no_grad():
        inf_mod.gsi_predict(request)
    return time.perf_counter() - t0, n_steps


PROFILE_ROWS = (
    ("whole_unet", "whole", "unet", 1),
    ("whole_unetpp", "whole", "unetpp", 1),
    ("rom_unet", "rom", "unet", 1),
    ("rom_unetpp", "rom", "unetpp", 1),
    ("gsi_unet", "gsi", "unet", 1),
    ("gsi_unet_rollT8", "gsi", "unet", 8),
    ("gsi_unetpp", "gsi", "unetpp", 1),
    ("gsi_unetpp_rollT8", "gsi", "unetpp", 8),
)


def profile_table(cfg) -> list[dict]:
    rows = []
    for method, regime, variant, horizon in PROFILE_ROWS:
        payload = probe_payload(cfg, regime, variant, horizon)
        record = metrics_mod.profile_run(train_probe, payload, setup=stage_windows)
        infer_s, n_steps = inference_wall(cfg, variant)
        spec = pred_mod.PredictorSpec(variant=variant, depth=cfg.predictor.depth,
                                      base_width=cfg.predictor.base_width)
        rows.append({
            "method": method,
            "total_parameters": pred_mod.count_parameters(spec),
            "train_peak_memory_mb": round(record.peak_memory_bytes / 2 ** 20, 1),
            "host_memory_proxy": record.host_memory_proxy,
            "train_wall_s": round(record.wall_s, 2),
            "inference_wall_s": round(infer_s, 2),
            "inference_steps": n_steps,
        })
    return rows
