"""Convolutional autoencoder compression: plain (AE) and adversarial (AAE) training.

The encoder halves each spatial dimension twice (4x reduction per dimension);
with 4 latent channels the element-count compression ratio is exactly 16:1.
Classical down/up-sampling round-trips are provided as baselines.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import N_FIELDS
from .predictors import TrainingDivergedError

LOG_FLOOR = 1e-7  # numerical floor inside adversarial log terms

# Interior widths tuned so the AE (encoder + decoder) lands within 2% of the
# published 854,728-parameter budget; recorded in config because only the
# layer count, kernels and strides are pinned elsewhere.
DEFAULT_WIDTHS = (64, 160, 192, 128)


@dataclass
class CompressionSpec:
    widths: tuple = DEFAULT_WIDTHS
    latent_channels: int = 4
    in_channels: int = N_FIELDS
    adversarial: bool = False  # AAE: no activation on the encoder output

    @property
    def reduction(self) -> int:
        return 4  # two stride-2 stages

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _check_divisible(x: torch.Tensor, reduction: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % reduction or w % reduction:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {reduction}")


def _init_relu_chain(layers: nn.Sequential) -> None:
    """Kaiming-ReLU init with zero biases. The default conv init shrinks the
    signal roughly 2x per layer; five layers of that starves the sigmoid
    bottleneck and the latent collapses before training can use it."""
    for layer in layers:
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)


class Encoder(nn.Module):
    """Five layers: 3x3/s1, 2x2/s2, 3x3/s1, 2x2/s2, 3x3/s1 to the latent channels.

    The plain-AE encoder ends with a sigmoid so latents live in (0, 1); the
    adversarial encoder has no final activation (the prior match handles range).
    """

    def __init__(self, spec: CompressionSpec):
        super().__init__()
        a, b, c, d = spec.widths
        self.spec = spec
        self.layers = nn.Sequential(
            nn.Conv2d(spec.in_channels, a, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(a, b, 2, stride=2), nn.ReLU(inplace=True),
            nn.Conv2d(b, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c, d, 2, stride=2), nn.ReLU(inplace=True),
            nn.Conv2d(d, spec.latent_channels, 3, padding=1),
        )
        _init_relu_chain(self.layers)

    def forward(self, x):
        _check_divisible(x, self.spec.reduction)
        z = self.layers(x)
        return z if self.spec.adversarial else torch.sigmoid(z)


class Decoder(nn.Module):
    """Mirror of the encoder with two 2x transposed-conv upsampling stages."""

    def __init__(self, spec: CompressionSpec):
        super().__init__()
        a, b, c, d = spec.widths
        self.layers = nn.Sequential(
            nn.Conv2d(spec.latent_channels, d, 3, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(d, c, 2, stride=2), nn.ReLU(inplace=True),
            nn.Conv2d(c, b, 3, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(b, a, 2, stride=2), nn.ReLU(inplace=True),
            nn.Conv2d(a, spec.in_channels, 3, padding=1),
        )
        _init_relu_chain(self.layers)

    def forward(self, z):
        return torch.sigmoid(self.layers(z))


class Autoencoder(nn.Module):
    def __init__(self, spec: CompressionSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class Discriminator(nn.Module):
    """Two convolutional layers over the latent grid, globally pooled to one logit."""

    def __init__(self, latent_channels: int = 4, hidden: int = 16):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def forward(self, z):
        return self.conv(z).mean(dim=(1, 2, 3))  # (B,) logits


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class CompressionTrainConfig:
    # plain AE settings
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    # adversarial settings
    lr_autoencoder: float = 5e-4
    lr_discriminator: float = 2.5e-4
    lr_generator: float = 5e-4
    adversarial_betas: tuple = (0.5, 0.999)
    disc_updates_per_generator: int = 2
    collapse_threshold: float = 1e-4  # epoch-mean discriminator loss below this = collapse
    # shared
    epochs: int = 40
    batch_size: int = 16
    lr_drop: tuple | None = None  # (epoch, factor): one-step decay for CPU-budget runs
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self) -> None:
        if min(self.lr, self.lr_autoencoder, self.lr_discriminator, self.lr_generator) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_drop is not None:
            epoch, factor = self.lr_drop
            if epoch < 0 or factor <= 0:
                raise ValueError("lr_drop must be (epoch >= 0, factor > 0)")


def _as_tensor(arr: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).to(device)


def _recon_mse(model, data, batch_size, device) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = _as_tensor(data[start : start + batch_size], device)
            total += ((model(x) - x) ** 2).mean().item() * len(x)
    model.train()
    return total / len(data)


def train_ae(
    train_data: np.ndarray,
    val_data: np.ndarray,
    config: CompressionTrainConfig,
    spec: CompressionSpec | None = None,
) -> tuple[Autoencoder, dict]:
    """Plain reconstruction training on scaled (N, 4, H, W) snapshots.

    Records per-epoch train/validation MSE and restores the best-validation
    weights before returning.
    """
    spec = spec or CompressionSpec(adversarial=False)
    device = torch.device(config.device)
    torch.manual_seed(config.seed)
    model = Autoencoder(spec).to(device).train()
    optim = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))
    rng = np.random.default_rng(config.seed)
    history: dict = {"train_mse": [], "val_mse": []}
    best_val, best_state = float("inf"), None
    for epoch in range(config.epochs):
        if config.lr_drop is not None and epoch == config.lr_drop[0]:
            for group in optim.param_groups:
                group["lr"] *= config.lr_drop[1]
        order = rng.permutation(len(train_data))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            x = _as_tensor(train_data[order[start : start + config.batch_size]], device)
            optim.zero_grad()
            loss = ((model(x) - x) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optim.step()
            epoch_loss += loss.item() * len(x)
            seen += len(x)
        val_mse = _recon_mse(model, val_data, config.batch_size, device)
        history["train_mse"].append(epoch_loss / seen)
        history["val_mse"].append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_val_mse"] = best_val
    return model, history


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_FLOOR))


def generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective: -log D(G(x)) with a clamped log."""
    return -_clamped_log(torch.sigmoid(fake_logits)).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on prior samples (real) vs encoded latents (fake)."""
    real = torch.sigmoid(real_logits)
    fake = torch.sigmoid(fake_logits)
    return -(_clamped_log(real).mean() + _clamped_log(1.0 - fake).mean())


def train_aae(
    train_data: np.ndarray,
    val_data: np.ndarray,
    config: CompressionTrainConfig,
    spec: CompressionSpec | None = None,
    step_recorder: list | None = None,
) -> tuple[Autoencoder, Discriminator, dict]:
    """Adversarial training: per batch one reconstruction step, then
    `disc_updates_per_generator` discriminator steps against standard-normal
    prior samples, then one generator (encoder) step.

    If the epoch-mean discriminator loss collapses below the configured
    threshold the event is logged and training continues on the
    reconstruction loss alone. `step_recorder`, when given, receives the
    sequence of update kinds for loop-order verification.
    """
    spec = spec or CompressionSpec(adversarial=True)
    if not spec.adversarial:
        raise ValueError("train_aae requires an adversarial spec (no encoder output activation)")
    device = torch.device(config.device)
    torch.manual_seed(config.seed)
    model = Autoencoder(spec).to(device).train()
    disc = Discriminator(spec.latent_channels).to(device).train()
    opt_ae = torch.optim.Adam(model.parameters(), lr=config.lr_autoencoder, betas=tuple(config.adversarial_betas))
    opt_disc = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator, betas=tuple(config.adversarial_betas))
    opt_gen = torch.optim.Adam(model.encoder.parameters(), lr=config.lr_generator, betas=tuple(config.adversarial_betas))
    rng = np.random.default_rng(config.seed)
    history: dict = {"train_mse": [], "val_mse": [], "disc_loss": [], "gen_loss": [], "events": []}
    adversarial_active = True
    best_val, best_state = float("inf"), None
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_data))
        sums = {"recon": 0.0, "disc": 0.0, "gen": 0.0}
        seen = disc_steps = gen_steps = 0
        for start in range(0, len(order), config.batch_size):
            x = _as_tensor(train_data[order[start : start + config.batch_size]], device)

            opt_ae.zero_grad()
            recon = ((model(x) - x) ** 2).mean()
            if not torch.isfinite(recon):
                raise TrainingDivergedError(f"non-finite reconstruction loss at epoch {epoch}")
            recon.backward()
            opt_ae.step()
            if step_recorder is not None:
                step_recorder.append("recon")
            sums["recon"] += recon.item() * len(x)
            seen += len(x)

            if adversarial_active:
                for _ in range(config.disc_updates_per_generator):
                    opt_disc.zero_grad()
                    with torch.no_grad():
                        fake = model.encode(x)
                    real = torch.randn_like(fake)
                    d_loss = discriminator_loss(disc(real), disc(fake))
                    d_loss.backward()
                    opt_disc.step()
                    if step_recorder is not None:
                        step_recorder.append("disc")
                    sums["disc"] += d_loss.item()
                    disc_steps += 1

                opt_gen.zero_grad()
                g_loss = generator_loss(disc(model.encode(x)))
                g_loss.backward()
                opt_gen.step()
                if step_recorder is not None:
                    step_recorder.append("gen")
                sums["gen"] += g_loss.item()
                gen_steps += 1

        val_mse = _recon_mse(model, val_data, config.batch_size, device)
        history["train_mse"].append(sums["recon"] / seen)
        history["val_mse"].append(val_mse)
        history["disc_loss"].append(sums["disc"] / disc_steps if disc_steps else float("nan"))
        history["gen_loss"].append(sums["gen"] / gen_steps if gen_steps else float("nan"))
        if adversarial_active and disc_steps and sums["disc"] / disc_steps < config.collapse_threshold:
            adversarial_active = False
            history["events"].append(
                {"epoch": epoch, "event": "discriminator_collapse",
                 "detail": "encoder no longer fools the discriminator; continuing on reconstruction loss"}
            )
        if val_mse < best_val:
            best_val = val_mse
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_val_mse"] = best_val
    return model, disc, history


def latent_moments(model: Autoencoder, data: np.ndarray, batch_size: int = 32, device="cpu") -> tuple[float, float]:
    """Mean and std of the encoded latents over a dataset."""
    model.eval()
    zs = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = _as_tensor(data[start : start + batch_size], device)
            zs.append(model.encode(x).cpu().numpy())
    z = np.concatenate(zs)
    return float(z.mean()), float(z.std())


def encode_dataset(model: Autoencoder, data: np.ndarray, batch_size: int = 32, device="cpu") -> np.ndarray:
    """Encode scaled (N, 4, H, W) snapshots to (N, 4, H/4, W/4) latents."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = _as_tensor(data[start : start + batch_size], device)
            out.append(model.encode(x).cpu().numpy().astype(np.float32))
    return np.concatenate(out)


def decode_dataset(model: Autoencoder, latents: np.ndarray, batch_size: int = 32, device="cpu") -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(latents), batch_size):
            z = _as_tensor(latents[start : start + batch_size], device)
            out.append(model.decode(z).cpu().numpy().astype(np.float32))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# Classical round-trip baselines
# --------------------------------------------------------------------------

BASELINE_METHODS = ("area_bicubic", "gaussian_pyramid")


def baseline_roundtrip(snapshot: np.ndarray, method: str) -> np.ndarray:
    """4x-per-dimension down/up round-trip of a (4, H, W) snapshot with a
    classical image-resampling method, for MSE comparison against the AE."""
    import cv2

    arr = np.asarray(snapshot, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError("expected a (fields, H, W) snapshot")
    h, w = arr.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by 4")
    out = np.empty_like(arr)
    for f in range(arr.shape[0]):
        img = arr[f]
        if method == "area_bicubic":
            small = cv2.resize(img, (w // 4, h // 4), interpolation=cv2.INTER_AREA)
            out[f] = cv2.resize(small, (w, h), interpolation=cv2.INTER_CUBIC)
        elif method == "gaussian_pyramid":
            small = cv2.pyrDown(cv2.pyrDown(img))
            out[f] = cv2.pyrUp(cv2.pyrUp(small))
        else:
            raise ValueError(f"unknown baseline method {method!r}; options: {BASELINE_METHODS}")
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, model: Autoencoder, config: CompressionTrainConfig | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": 1,
        "kind": "compression",
        "spec": model.spec.to_dict(),
        "spec_hash": model.spec.hash(),
        "train_config": asdict(config) if config is not None else None,
        "rng_state": torch.get_rng_state(),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[Autoencoder, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    spec = CompressionSpec(**{**payload["spec"], "widths": tuple(payload["spec"]["widths"])})
    if payload.get("spec_hash") != spec.hash():
        raise ValueError(f"checkpoint spec hash mismatch in {path}")
    model = Autoencoder(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
