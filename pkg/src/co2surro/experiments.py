"""Config-driven experiment stages behind the CLI.

Every stage reads a RunConfig (YAML file plus dotted-key overrides), writes
its artifacts under `<output_root>/<name>/`, and appends an event to the
run manifest so each output file is reachable from it. Re-running a stage
with the same config and seeds reproduces the same metric values.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import compression as comp_mod
from . import data as data_mod
from . import inference as inf_mod
from . import metrics as metrics_mod
from . import predictors as pred_mod
from . import solver as solver_mod


class ConfigError(Exception):
    """Bad or inconsistent run configuration (CLI exit code 1)."""


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class DataSection:
    path: str | None = None          # pre-existing dataset directory
    n_sims: int = 10
    base_seed: int = 100
    solver: dict = field(default_factory=dict)  # SolverConfig overrides


@dataclass
class SplitSection:
    n_train: int = 8
    train_ids: list | None = None
    val_ids: list | None = None


@dataclass
class CompressionSection:
    kind: str = "none"               # ae | aae | none
    widths: list = field(default_factory=lambda: list(comp_mod.DEFAULT_WIDTHS))
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    lr_autoencoder: float = 5e-4
    lr_discriminator: float = 2.5e-4
    lr_generator: float = 5e-4
    disc_updates_per_generator: int = 2
    snapshot_stride: int = 1         # subsample snapshots for compression training


@dataclass
class PredictorSection:
    variant: str = "unet"
    depth: int = 5
    base_width: int = 32
    patch_size: int = 64
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    samples_per_epoch: int | None = None
    lambda_schedule: list | None = None   # None = pipeline/variant default
    rollout_horizon: int = 1
    rollout_epochs: int = 3
    rollout_lr: float = 3e-4
    rollout_samples_per_epoch: int | None = None


@dataclass
class EvaluationSection:
    n_steps: int | None = None       # None = all available timesteps
    with_ssim: bool = True


@dataclass
class ProfileSection:
    epochs: int = 1
    batch_size: int = 8
    samples: int = 24
    inference_steps: int | None = None


@dataclass
class RunConfig:
    name: str = "run"
    output_root: str = "runs"
    seed: int = 0
    pipeline: str = "gsi"            # gsi | rom | whole-domain-baseline
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    compression: CompressionSection = field(default_factory=CompressionSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    profile: ProfileSection = field(default_factory=ProfileSection)

    def __post_init__(self) -> None:
        if self.pipeline not in ("gsi", "rom", "whole-domain-baseline"):
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.compression.kind not in ("ae", "aae", "none"):
            raise ConfigError(f"unknown compression kind {self.compression.kind!r}")
        if self.pipeline == "rom" and self.compression.kind == "none":
            raise ConfigError("rom pipeline requires compression 'ae' or 'aae'")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.name

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_name(self) -> str:
        p = self.predictor
        if self.pipeline == "rom":
            return f"rom_{self.compression.kind}_{p.variant}"
        roll = f"_rollT{p.rollout_horizon}" if p.rollout_horizon > 1 else ""
        if self.pipeline == "whole-domain-baseline":
            return f"baseline_whole_{p.variant}"
        return f"gsi_{p.variant}{roll}"


def _build_section(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context} section must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> RunConfig:
    payload = dict(payload or {})
    sections = {
        "data": DataSection,
        "split": SplitSection,
        "compression": CompressionSection,
        "predictor": PredictorSection,
        "evaluation": EvaluationSection,
        "profile": ProfileSection,
    }
    kwargs = {}
    for key, value in payload.items():
        if key in sections:
            kwargs[key] = _build_section(sections[key], value, key)
        elif key in ("name", "output_root", "seed", "pipeline"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: list[str] | None = None, output_root: str | None = None) -> RunConfig:
    """YAML config -> RunConfig. `overrides` are dotted key=value strings
    (CLI flags take precedence over config keys); `output_root` outranks both."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-mapping key {part!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    if output_root is not None:
        payload["output_root"] = output_root
    return config_from_dict(payload)


def default_lambda_schedule(pipeline: str, variant: str):
    if pipeline == "rom":
        return pred_mod.ROM_LAMBDA_SCHEDULE
    if variant == "unetpp":
        return pred_mod.GSI_UNETPP_LAMBDA_SCHEDULE
    return pred_mod.GSI_UNET_LAMBDA_SCHEDULE


# --------------------------------------------------------------------------
# Run manifest
# --------------------------------------------------------------------------

class RunManifest:
    """Append-only JSONL event log; every artifact the run produced is
    reachable from here."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "run_manifest.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, stage: str, config_hash: str, **details) -> None:
        event = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "stage": stage,
                 "config_hash": config_hash, **details}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(event) + "\n")

    def events(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _snapshot_config(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config_snapshot.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def dataset_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data.path) if cfg.data.path else cfg.run_dir / "dataset"


def cmd_generate(cfg: RunConfig) -> Path:
    _snapshot_config(cfg)
    out = dataset_dir(cfg)
    solver_cfg = solver_mod.SolverConfig(**cfg.data.solver)
    seeds = [cfg.data.base_seed + i for i in range(cfg.data.n_sims)]
    series = solver_mod.generate_dataset(cfg.data.n_sims, solver_cfg, seeds=seeds)
    data_mod.write_dataset(series, out)
    RunManifest(cfg.run_dir).append(
        "generate", cfg.hash(), dataset=str(out),
        dataset_hash=_file_hash(out / data_mod.MANIFEST_NAME),
        n_sims=cfg.data.n_sims, seeds=seeds,
    )
    return out


def resolve_dataset(cfg: RunConfig) -> tuple[list, Path]:
    path = dataset_dir(cfg)
    if not (path / data_mod.MANIFEST_NAME).exists():
        raise ConfigError(f"dataset not found at {path}; run `generate` first or set data.path")
    return data_mod.read_dataset(path), path


def resolve_split(cfg: RunConfig, series: list) -> tuple[list, list]:
    split = cfg.split
    ids = [s.sim_id for s in series]
    if split.train_ids or split.val_ids:
        if not (split.train_ids and split.val_ids):
            raise ConfigError("set both split.train_ids and split.val_ids or neither")
        return data_mod.split_series(series, split.train_ids, split.val_ids)
    if not 0 < split.n_train < len(ids):
        raise ConfigError(f"split.n_train={split.n_train} must leave at least one validation sim")
    return data_mod.split_series(series, ids[: split.n_train], ids[split.n_train :])


def _scaler_path(cfg: RunConfig) -> Path:
    return cfg.run_dir / "scaler.json"


def fit_or_load_scaler(cfg: RunConfig, train_series: list) -> data_mod.ScalerParams:
    path = _scaler_path(cfg)
    if path.exists():
        return data_mod.ScalerParams.from_dict(json.loads(path.read_text()))
    params = data_mod.fit_scaler(train_series)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params.to_dict(), indent=2))
    return params


def _scaled_stack(series_list: list, params) -> np.ndarray:
    return np.concatenate([data_mod.apply_scaler(s.to_array(), params) for s in series_list])


def compression_ckpt_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.run_dir / "checkpoints" / f"{kind}.pt"


def cmd_train_compression(cfg: RunConfig, kind: str | None = None) -> Path:
    """Train the AE or AAE on training-split snapshots and write both the
    checkpoint and the encoded-latent dataset for every simulation."""
    kind = kind or cfg.compression.kind
    if kind not in ("ae", "aae"):
        raise ConfigError("train-compression requires compression kind 'ae' or 'aae'")
    _snapshot_config(cfg)
    series, ds_path = resolve_dataset(cfg)
    train_series, val_series = resolve_split(cfg, series)
    params = fit_or_load_scaler(cfg, train_series)
    stride = max(1, cfg.compression.snapshot_stride)
    train_data = _scaled_stack(train_series, params)[::stride]
    val_data = _scaled_stack(val_series, params)[::stride]

    c = cfg.compression
    train_cfg = comp_mod.CompressionTrainConfig(
        lr=c.lr, lr_autoencoder=c.lr_autoencoder, lr_discriminator=c.lr_discriminator,
        lr_generator=c.lr_generator, disc_updates_per_generator=c.disc_updates_per_generator,
        epochs=c.epochs, batch_size=c.batch_size, seed=cfg.seed,
    )
    spec = comp_mod.CompressionSpec(widths=tuple(c.widths), adversarial=(kind == "aae"))
    t0 = time.perf_counter()
    if kind == "ae":
        model, history = comp_mod.train_ae(train_data, val_data, train_cfg, spec)
    else:
        model, _, history = comp_mod.train_aae(train_data, val_data, train_cfg, spec)
    wall = time.perf_counter() - t0

    ckpt = compression_ckpt_path(cfg, kind)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    comp_mod.save_checkpoint(ckpt, model, train_cfg, extra={"history": {
        k: v for k, v in history.items() if k != "best_state"}})

    latents_dir = cfg.run_dir / "latents" / kind
    latent_series = []
    for s in series:
        scaled = data_mod.apply_scaler(s.to_array(), params)
        latent = comp_mod.encode_dataset(model, scaled, batch_size=c.batch_size)
        latent_series.append(data_mod.SimulationSeries.from_array(
            latent, dx=s.dx, dt_snapshot=s.dt_snapshot, sim_id=s.sim_id, seed=s.seed))
    data_mod.write_dataset(latent_series, latents_dir, latent=True, validate=False)

    RunManifest(cfg.run_dir).append(
        "train-compression", cfg.hash(), kind=kind, checkpoint=str(ckpt),
        checkpoint_hash=_file_hash(ckpt), latents=str(latents_dir),
        dataset_hash=_file_hash(ds_path / data_mod.MANIFEST_NAME),
        val_mse=history["best_val_mse"], wall_s=wall,
    )
    return ckpt


def predictor_ckpt_path(cfg: RunConfig, model_name: str | None = None, onestep: bool = False) -> Path:
    name = model_name or cfg.model_name()
    suffix = "_onestep" if onestep else ""
    return cfg.run_dir / "checkpoints" / f"{name}{suffix}.pt"


def _predictor_training_series(cfg: RunConfig, series, params):
    """Scaled (or latent) arrays plus the patch size for the configured pipeline."""
    if cfg.pipeline == "rom":
        latents_dir = cfg.run_dir / "latents" / cfg.compression.kind
        if not (latents_dir / data_mod.MANIFEST_NAME).exists():
            raise ConfigError(f"latent dataset missing at {latents_dir}; run train-compression first")
        latent_series = data_mod.read_dataset(latents_dir)
        arrays = {s.sim_id: s.to_array() for s in latent_series}
        sample_height = next(iter(arrays.values())).shape[-2]
        return arrays, sample_height  # whole latent domain
    arrays = {s.sim_id: data_mod.apply_scaler(s.to_array(), params) for s in series}
    if cfg.pipeline == "whole-domain-baseline":
        sample_height = next(iter(arrays.values())).shape[-2]
        return arrays, sample_height
    return arrays, cfg.predictor.patch_size


def _windows(arrays: dict, sim_ids: list[str], patch: int, horizon: int, divisor: int):
    samples = []
    for sim_id in sim_ids:
        samples.extend(
            data_mod.sample_patches(arrays[sim_id], None, patch, horizon=horizon,
                                    divisor=divisor, sim_id=sim_id)
        )
    return samples


def cmd_train_predictor(cfg: RunConfig) -> Path:
    """One-step training, then optional rollout training initialised from it."""
    _snapshot_config(cfg)
    series, ds_path = resolve_dataset(cfg)
    train_series, val_series = resolve_split(cfg, series)
    params = fit_or_load_scaler(cfg, train_series)
    arrays, patch = _predictor_training_series(cfg, series, params)

    p = cfg.predictor
    spec = pred_mod.PredictorSpec(variant=p.variant, depth=p.depth, base_width=p.base_width)
    schedule = (tuple(map(tuple, p.lambda_schedule)) if p.lambda_schedule is not None
                else default_lambda_schedule(cfg.pipeline, p.variant))
    loss_cfg = pred_mod.LossConfig(schedule)
    train_ids = [s.sim_id for s in train_series]
    val_ids = [s.sim_id for s in val_series]

    model = pred_mod.build_predictor(spec, seed=cfg.seed)
    model_name = cfg.model_name()
    manifest = RunManifest(cfg.run_dir)
    t0 = time.perf_counter()

    one_step_cfg = pred_mod.TrainConfig(
        epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=cfg.seed,
        samples_per_epoch=p.samples_per_epoch,
    )
    train_w = _windows(arrays, train_ids, patch, 1, spec.divisor)
    val_w = _windows(arrays, val_ids, patch, 1, spec.divisor)
    if not train_w or not val_w:
        raise ConfigError("no training/validation windows; check snapshot counts and patch size")
    history = pred_mod.train_one_step(model, train_w, val_w, loss_cfg, one_step_cfg)
    onestep_ckpt = predictor_ckpt_path(cfg, model_name, onestep=p.rollout_horizon > 1)
    onestep_ckpt.parent.mkdir(parents=True, exist_ok=True)
    _save_predictor(onestep_ckpt, model, spec, one_step_cfg, cfg, history, model_name)

    if p.rollout_horizon > 1:
        rollout_cfg = pred_mod.RolloutConfig(
            horizon=p.rollout_horizon,
            init_state={k: v.clone() for k, v in model.state_dict().items()},
        )
        roll_train_cfg = pred_mod.TrainConfig(
            epochs=p.rollout_epochs, batch_size=max(1, p.batch_size // 2), lr=p.rollout_lr,
            seed=cfg.seed, samples_per_epoch=p.rollout_samples_per_epoch,
        )
        train_wT = _windows(arrays, train_ids, patch, p.rollout_horizon, spec.divisor)
        val_wT = _windows(arrays, val_ids, patch, p.rollout_horizon, spec.divisor)
        if not train_wT or not val_wT:
            raise ConfigError(
                f"no horizon-{p.rollout_horizon} windows; series need at least "
                f"{data_mod.HISTORY + p.rollout_horizon + 1} snapshots"
            )
        history = pred_mod.train_rollout(model, train_wT, val_wT, rollout_cfg, loss_cfg, roll_train_cfg)
        final_ckpt = predictor_ckpt_path(cfg, model_name)
        _save_predictor(final_ckpt, model, spec, roll_train_cfg, cfg, history, model_name,
                        extra={"curriculum_from": str(onestep_ckpt)})
    else:
        final_ckpt = onestep_ckpt

    manifest.append(
        "train-predictor", cfg.hash(), model=model_name, checkpoint=str(final_ckpt),
        checkpoint_hash=_file_hash(final_ckpt),
        dataset_hash=_file_hash(ds_path / data_mod.MANIFEST_NAME),
        best_val_loss=history["best_val_loss"], wall_s=time.perf_counter() - t0,
    )
    return final_ckpt


def _save_predictor(path, model, spec, train_cfg, cfg: RunConfig, history, model_name, extra=None):
    payload_extra = {
        "pipeline": cfg.pipeline,
        "model_name": model_name,
        "compression_kind": cfg.compression.kind,
        "compression_ckpt": (
            str(compression_ckpt_path(cfg, cfg.compression.kind)) if cfg.pipeline == "rom" else None
        ),
        "lambda_trace": history["lambda"],
        "history": {k: v for k, v in history.items() if k not in ("best_state", "lambda")},
    }
    if extra:
        payload_extra.update(extra)
    pred_mod.save_checkpoint(path, model, spec, train_config=train_cfg,
                             epoch=len(history["lambda"]), extra=payload_extra)


def predictions_dir(cfg: RunConfig, model_name: str) -> Path:
    return cfg.run_dir / "predictions" / model_name


def cmd_infer(cfg: RunConfig, model_name: str | None = None) -> Path:
    """Batch inference: autoregressive rollout per simulation from its first
    three snapshots, written in the dataset format plus a provenance sidecar."""
    model_name = model_name or cfg.model_name()
    series, ds_path = resolve_dataset(cfg)
    train_series, _ = resolve_split(cfg, series)
    params = fit_or_load_scaler(cfg, train_series)
    ckpt_path = predictor_ckpt_path(cfg, model_name)
    if not ckpt_path.exists():
        raise ConfigError(f"missing checkpoint {ckpt_path}")
    model, payload = pred_mod.load_checkpoint(ckpt_path)
    pipeline = payload.get("pipeline", cfg.pipeline)
    pipeline_kind = "rom" if pipeline == "rom" else "gsi"
    comp_model = None
    if pipeline == "rom":
        comp_ckpt = payload.get("compression_ckpt")
        if not comp_ckpt or not Path(comp_ckpt).exists():
            raise ConfigError(f"missing compression checkpoint for {model_name}")
        comp_model, _ = comp_mod.load_checkpoint(comp_ckpt)

    out_dir = predictions_dir(cfg, model_name)
    predicted = []
    wall0 = time.perf_counter()
    for s in series:
        arr = s.to_array()
        n_steps = cfg.evaluation.n_steps or (len(s) - data_mod.HISTORY)
        if n_steps > len(s) - data_mod.HISTORY:
            raise ConfigError(f"evaluation.n_steps={n_steps} exceeds series length of {s.sim_id}")
        request = inf_mod.RolloutRequest(
            initial_window=arr[: data_mod.HISTORY],
            n_steps=n_steps,
            pipeline=pipeline_kind,
            predictor=model,
            scaler=params,
            compression=comp_model,
            provenance={"model": model_name, "sim_id": s.sim_id},
        )
        result = inf_mod.predict(request)
        predicted.append(data_mod.SimulationSeries.from_array(
            result.snapshots, dx=s.dx, dt_snapshot=s.dt_snapshot, sim_id=s.sim_id, seed=s.seed))
    data_mod.write_dataset(predicted, out_dir, validate=False)
    sidecar = {
        "model": model_name,
        "checkpoint": str(ckpt_path),
        "checkpoint_hash": _file_hash(ckpt_path),
        "dataset": str(ds_path),
        "dataset_hash": _file_hash(ds_path / data_mod.MANIFEST_NAME),
        "config_hash": cfg.hash(),
        "wall_s": time.perf_counter() - wall0,
    }
    (out_dir / "provenance.json").write_text(json.dumps(sidecar, indent=2))
    RunManifest(cfg.run_dir).append("infer", cfg.hash(), model=model_name,
                                    predictions=str(out_dir), **{"wall_s": sidecar["wall_s"]})
    return out_dir


def cmd_evaluate(cfg: RunConfig, model_names: list[str] | None = None):
    """Metric report + plots + summary tables for one or more models."""
    series, _ = resolve_dataset(cfg)
    train_series, val_series = resolve_split(cfg, series)
    params = fit_or_load_scaler(cfg, train_series)
    splits = {s.sim_id: "train" for s in train_series}
    splits.update({s.sim_id: "validation" for s in val_series})
    names = model_names or [cfg.model_name()]

    frames = []
    for name in names:
        pred_dir = predictions_dir(cfg, name)
        if not (pred_dir / data_mod.MANIFEST_NAME).exists():
            raise ConfigError(f"no predictions for model {name!r} at {pred_dir}; run infer first")
        for pred_series in data_mod.read_dataset(pred_dir):
            truth = next(s for s in series if s.sim_id == pred_series.sim_id)
            n = len(pred_series)
            truth_scaled = data_mod.apply_scaler(
                truth.to_array()[data_mod.HISTORY : data_mod.HISTORY + n], params)
            pred_scaled = data_mod.apply_scaler(pred_series.to_array(), params)
            frames.append(metrics_mod.evaluate_prediction(
                pred_scaled, truth_scaled, sim_id=pred_series.sim_id, model=name,
                split=splits[pred_series.sim_id], first_timestep=data_mod.HISTORY,
                with_ssim=cfg.evaluation.with_ssim,
            ))
    import pandas as pd

    report = pd.concat(frames, ignore_index=True)
    reports_dir = cfg.run_dir / "reports"
    plots_dir = cfg.run_dir / "plots"
    reports_dir.mkdir(parents=True, exist_ok=True)
    plots_dir.mkdir(parents=True, exist_ok=True)
    report_path = reports_dir / "report.csv"
    metrics_mod.save_report(report, report_path)
    t1, t2 = metrics_mod.summary_tables(report)
    t1.to_csv(reports_dir / "summary_pcc_ssim.csv", index=False)
    t2.to_csv(reports_dir / "summary_mse_area.csv", index=False)
    merged = metrics_mod.merged_summary(report)
    merged.to_csv(reports_dir / "summary.csv", index=False)
    with open(reports_dir / "summary.txt", "w") as fh:
        fh.write(f"# {metrics_mod.REPORT_HEADER}\n\n")
        fh.write("PCC / SSIM per field (validation, final timestep)\n")
        fh.write(t1.to_string(index=False, float_format=lambda v: f"{v:.3f}") + "\n\n")
        fh.write("MSE and CO2-area error quartiles (validation, final timestep)\n")
        fh.write(t2.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n")
    for split in ("validation", "train"):
        if (report["split"] == split).any():
            metrics_mod.plot_curves(report, plots_dir / f"pcc_{split}.png", split=split)
    RunManifest(cfg.run_dir).append(
        "evaluate", cfg.hash(), models=names, report=str(report_path),
        report_hash=_file_hash(report_path),
        summaries=[str(reports_dir / "summary_pcc_ssim.csv"), str(reports_dir / "summary_mse_area.csv"),
                   str(reports_dir / "summary.csv"), str(reports_dir / "summary.txt")],
        plots=[str(p) for p in sorted(plots_dir.glob("*.png"))],
    )
    return report


def cmd_profile(cfg: RunConfig):
    """Memory/time table across training regimes (whole-domain vs patch GSI
    vs ROM-latent) plus parameter counts and inference timing."""
    from . import profile_targets

    series, _ = resolve_dataset(cfg)
    train_series, _ = resolve_split(cfg, series)
    fit_or_load_scaler(cfg, train_series)

    rows = profile_targets.profile_table(cfg)
    import pandas as pd

    table = pd.DataFrame(rows)
    reports_dir = cfg.run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    out = reports_dir / "profile.csv"
    table.to_csv(out, index=False)
    with open(reports_dir / "profile.txt", "w") as fh:
        fh.write(table.to_string(index=False) + "\n")
    RunManifest(cfg.run_dir).append("profile", cfg.hash(), table=str(out))
    return table


REPRODUCE_MODELS = (
    ("rom_ae_unet", {"pipeline": "rom", "compression": "ae", "variant": "unet", "rollout": 1}),
    ("rom_ae_unetpp", {"pipeline": "rom", "compression": "ae", "variant": "unetpp", "rollout": 1}),
    ("rom_aae_unet", {"pipeline": "rom", "compression": "aae", "variant": "unet", "rollout": 1}),
    ("rom_aae_unetpp", {"pipeline": "rom", "compression": "aae", "variant": "unetpp", "rollout": 1}),
    ("gsi_unet", {"pipeline": "gsi", "compression": "none", "variant": "unet", "rollout": 1}),
    ("gsi_unet_rollT8", {"pipeline": "gsi", "compression": "none", "variant": "unet", "rollout": 8}),
    ("gsi_unetpp", {"pipeline": "gsi", "compression": "none", "variant": "unetpp", "rollout": 1}),
    ("gsi_unetpp_rollT8", {"pipeline": "gsi", "compression": "none", "variant": "unetpp", "rollout": 8}),
    ("baseline_whole_unetpp", {"pipeline": "whole-domain-baseline", "compression": "none",
                               "variant": "unetpp", "rollout": 1}),
)


def variant_config(cfg: RunConfig, spec: dict) -> RunConfig:
    return replace(
        cfg,
        pipeline=spec["pipeline"],
        compression=replace(cfg.compression, kind=spec["compression"]),
        predictor=replace(cfg.predictor, variant=spec["variant"],
                          rollout_horizon=spec["rollout"], lambda_schedule=None),
    )


def cmd_reproduce_all(cfg: RunConfig):
    """The full eight-model comparison (4 ROMs + 4 grid-size-invariant) plus
    the whole-domain baseline, merged into one report."""
    _snapshot_config(cfg)
    stage_t0 = time.perf_counter()
    if not (dataset_dir(cfg) / data_mod.MANIFEST_NAME).exists():
        if cfg.data.path:
            raise ConfigError(f"dataset not found at {cfg.data.path}")
        cmd_generate(cfg)
    series, _ = resolve_dataset(cfg)
    train_series, _ = resolve_split(cfg, series)
    fit_or_load_scaler(cfg, train_series)

    for kind in ("ae", "aae"):
        cmd_train_compression(cfg, kind)
    names = []
    for name, spec in REPRODUCE_MODELS:
        sub = variant_config(cfg, spec)
        cmd_train_predictor(sub)
        cmd_infer(sub, name)
        names.append(name)
    report = cmd_evaluate(cfg, names)
    RunManifest(cfg.run_dir).append("reproduce-all", cfg.hash(), models=names,
                                    wall_s=time.perf_counter() - stage_t0)
    return report
