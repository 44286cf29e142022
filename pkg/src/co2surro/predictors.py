"""UNet and UNet++ predictors, boundary-weighted loss, one-step and rollout training.

Both networks are fully convolutional (zero 'same' padding, 2x2 max-pool,
2x transposed-conv upsampling), so one weight set accepts any input whose
spatial dims are divisible by 2^(depth-1). Spatial convolutions carry no
bias: a zero input region then stays exactly zero through every level,
which keeps patch-trained and full-domain inference consistent away from
boundaries. The final 1x1 convolution keeps its bias.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import HISTORY, N_FIELDS


class TrainingDivergedError(Exception):
    """Non-finite loss encountered; carries the offending epoch."""


@dataclass
class PredictorSpec:
    variant: str = "unet"          # "unet" | "unetpp"
    depth: int = 5                 # number of resolution levels
    base_width: int = 32           # channels at the top level, doubling per level
    in_channels: int = HISTORY * N_FIELDS
    out_channels: int = N_FIELDS

    def __post_init__(self) -> None:
        if self.variant not in ("unet", "unetpp"):
            raise ValueError(f"unknown predictor variant {self.variant!r}")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2 ** i for i in range(self.depth))

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class DoubleConv(nn.Module):
    """Two 3x3 same convolutions with ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


def _check_divisible(x: torch.Tensor, divisor: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % divisor or w % divisor:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {divisor}")


class UNet(nn.Module):
    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        ch = spec.widths
        self.pool = nn.MaxPool2d(2)
        self.encoders = nn.ModuleList(
            [DoubleConv(spec.in_channels, ch[0])]
            + [DoubleConv(ch[i - 1], ch[i]) for i in range(1, spec.depth)]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2, bias=False) for i in range(spec.depth - 1)]
        )
        self.decoders = nn.ModuleList([DoubleConv(2 * ch[i], ch[i]) for i in range(spec.depth - 1)])
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.spec.divisor)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips[-1]
        for i in reversed(range(self.spec.depth - 1)):
            x = self.decoders[i](torch.cat([skips[i], self.ups[i](x)], dim=1))
        return self.head(x)


class UNetPP(nn.Module):
    """Nested UNet: dense decoder nodes, single output head (no deep supervision).

    Node (i, j) concatenates all previous nodes at level i with the
    upsampled node (i+1, j-1); its block reduces back to the level width.
    """

    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        ch = spec.widths
        depth = spec.depth
        self.pool = nn.MaxPool2d(2)
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for i in range(depth):
            self.blocks[f"b{i}_0"] = DoubleConv(spec.in_channels if i == 0 else ch[i - 1], ch[i])
        for i in range(depth - 1):
            for j in range(1, depth - i):
                self.ups[f"u{i}_{j}"] = nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2, bias=False)
                self.blocks[f"b{i}_{j}"] = DoubleConv((j + 1) * ch[i], ch[i])
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.spec.divisor)
        depth = self.spec.depth
        nodes: dict[tuple[int, int], torch.Tensor] = {}
        for i in range(depth):
            nodes[(i, 0)] = self.blocks[f"b{i}_0"](x if i == 0 else self.pool(nodes[(i - 1, 0)]))
        for j in range(1, depth):
            for i in range(depth - j):
                up = self.ups[f"u{i}_{j}"](nodes[(i + 1, j - 1)])
                cat = torch.cat([nodes[(i, k)] for k in range(j)] + [up], dim=1)
                nodes[(i, j)] = self.blocks[f"b{i}_{j}"](cat)
        return self.head(nodes[(0, depth - 1)])


def build_predictor(spec: PredictorSpec, seed: int | None = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(spec) if spec.variant == "unet" else UNetPP(spec)


def count_parameters(spec: PredictorSpec) -> int:
    """Analytic weight + bias count for a spec (spatial convs are bias-free)."""
    ch = spec.widths
    depth = spec.depth

    def block(cin, cout):
        return 9 * cin * cout + 9 * cout * cout

    total = block(spec.in_channels, ch[0])
    total += sum(block(ch[i - 1], ch[i]) for i in range(1, depth))
    if spec.variant == "unet":
        total += sum(4 * ch[i + 1] * ch[i] for i in range(depth - 1))
        total += sum(block(2 * ch[i], ch[i]) for i in range(depth - 1))
    else:
        for i in range(depth - 1):
            for j in range(1, depth - i):
                total += 4 * ch[i + 1] * ch[i]
                total += block((j + 1) * ch[i], ch[i])
    total += ch[0] * spec.out_channels + spec.out_channels  # 1x1 head keeps its bias
    return total


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

_ring_cache: dict[tuple[int, int, str], torch.Tensor] = {}


def ring_mask(height: int, width: int, device="cpu") -> torch.Tensor:
    """Boolean mask of the outer 1-pixel boundary of an H x W domain."""
    key = (height, width, str(device))
    if key not in _ring_cache:
        mask = torch.zeros(height, width, dtype=torch.bool, device=device)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        _ring_cache[key] = mask
    return _ring_cache[key]


def boundary_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE restricted to the outer 1-pixel ring, normalised by ring element count."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = ring_mask(pred.shape[-2], pred.shape[-1], pred.device)
    diff = pred - target
    return (diff * diff)[..., mask].mean()


def boundary_weighted_loss(pred: torch.Tensor, target: torch.Tensor, lam: float) -> torch.Tensor:
    """MSE over the whole domain plus lam times the MSE over its boundary ring."""
    if lam < 0:
        raise ValueError("boundary weight must be non-negative")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    loss = (diff * diff).mean()
    if lam > 0:
        loss = loss + lam * boundary_mse(pred, target)
    return loss


@dataclass
class LossConfig:
    """Step schedule for the boundary multiplier: list of (epoch, value) pairs.

    The multiplier at epoch e is the value of the last entry with epoch <= e
    (zero before the first entry). An empty schedule keeps it at zero.
    """

    lambda_schedule: tuple = ()

    def __post_init__(self) -> None:
        sched = tuple((int(e), float(v)) for e, v in self.lambda_schedule)
        epochs = [e for e, _ in sched]
        values = [v for _, v in sched]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("schedule values must be non-decreasing")
        if any(v < 0 for v in values):
            raise ValueError("boundary weights must be non-negative")
        self.lambda_schedule = sched

    def lambda_at(self, epoch: int) -> float:
        lam = 0.0
        for e, v in self.lambda_schedule:
            if epoch >= e:
                lam = v
            else:
                break
        return lam


ROM_LAMBDA_SCHEDULE = ((0, 0.0), (100, 0.5), (200, 1.0))
GSI_UNET_LAMBDA_SCHEDULE = ((0, 0.0), (50, 0.5), (100, 1.0))
GSI_UNETPP_LAMBDA_SCHEDULE = ((0, 0.0), (15, 0.5), (65, 1.0))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    device: str = "cpu"
    samples_per_epoch: int | None = None  # subsample training windows per epoch (CPU budgets)


@dataclass
class RolloutConfig:
    horizon: int = 8
    init_state: dict | None = None  # one-step weights for curriculum initialisation

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("rollout horizon must be >= 1")


def _batch_tensors(samples, indices, device) -> tuple[torch.Tensor, torch.Tensor]:
    xs = np.stack([samples[i].input for i in indices])
    ys = np.stack([samples[i].targets for i in indices])
    return (
        torch.from_numpy(xs).to(device),
        torch.from_numpy(ys).to(device),
    )


def _epoch_indices(n: int, rng: np.random.Generator, limit: int | None) -> np.ndarray:
    order = rng.permutation(n)
    return order[:limit] if limit else order


def rollout_loss(
    model: nn.Module,
    window: torch.Tensor,
    targets: torch.Tensor,
    lam: float,
    step_hook=None,
) -> torch.Tensor:
    """Mean boundary-weighted loss over an autoregressive chain.

    The model is applied `targets.shape[1]` times, each step feeding its own
    prediction back into the sliding 3-snapshot window; gradients flow through
    the whole chain.
    """
    horizon = targets.shape[1]
    losses = []
    for t in range(horizon):
        pred = model(window)
        if step_hook is not None:
            step_hook(t)
        losses.append(boundary_weighted_loss(pred, targets[:, t], lam))
        if t + 1 < horizon:
            window = torch.cat([window[:, N_FIELDS:], pred], dim=1)
    return torch.stack(losses).mean()


def _evaluate(model, samples, lam, batch_size, device, horizon) -> tuple[float, float]:
    model.eval()
    total, ring, count = 0.0, 0.0, 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            idx = range(start, min(start + batch_size, len(samples)))
            x, y = _batch_tensors(samples, list(idx), device)
            if horizon == 1:
                pred = model(x)
                total += boundary_weighted_loss(pred, y[:, 0], lam).item() * len(x)
                ring += boundary_mse(pred, y[:, 0]).item() * len(x)
            else:
                total += rollout_loss(model, x, y, lam).item() * len(x)
                ring += 0.0
            count += len(x)
    model.train()
    return total / count, ring / count if count else 0.0


def train_one_step(
    model: nn.Module,
    train_samples: list,
    val_samples: list,
    loss_config: LossConfig,
    config: TrainConfig,
) -> dict:
    """Single-timestep training with the boundary-multiplier schedule.

    Returns a history dict; the best-validation weights are restored into
    the model before returning and kept under history["best_state"].
    """
    if any(s.horizon != 1 for s in train_samples):
        raise ValueError("one-step training requires horizon-1 samples")
    return _train(model, train_samples, val_samples, loss_config, config, horizon=1)


def train_rollout(
    model: nn.Module,
    train_samples: list,
    val_samples: list,
    rollout_config: RolloutConfig,
    loss_config: LossConfig,
    config: TrainConfig,
    step_hook=None,
) -> dict:
    """Rollout training: the per-sample loss is the mean of the boundary-weighted
    losses over `horizon` self-fed predictions (curriculum: initialise from the
    one-step weights in `rollout_config.init_state`)."""
    horizon = rollout_config.horizon
    if any(s.horizon != horizon for s in train_samples):
        raise ValueError(f"rollout training requires horizon-{horizon} samples")
    if rollout_config.init_state is not None:
        model.load_state_dict(rollout_config.init_state)
    return _train(model, train_samples, val_samples, loss_config, config,
                  horizon=horizon, step_hook=step_hook)


def _train(model, train_samples, val_samples, loss_config, config, horizon, step_hook=None) -> dict:
    if config.epochs > 0 and (not train_samples or not val_samples):
        raise ValueError("training requires non-empty train and validation sample lists")
    device = torch.device(config.device)
    model.to(device).train()
    torch.manual_seed(config.seed)
    optim = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))
    rng = np.random.default_rng(config.seed)
    history: dict = {
        "lambda": [], "train_loss": [], "val_loss": [],
        "train_boundary_mse": [], "val_boundary_mse": [],
    }
    best_val, best_state = float("inf"), None
    for epoch in range(config.epochs):
        lam = loss_config.lambda_at(epoch)
        indices = _epoch_indices(len(train_samples), rng, config.samples_per_epoch)
        epoch_loss, epoch_ring, seen = 0.0, 0.0, 0
        for start in range(0, len(indices), config.batch_size):
            batch = indices[start : start + config.batch_size]
            x, y = _batch_tensors(train_samples, batch, device)
            optim.zero_grad()
            if horizon == 1:
                pred = model(x)
                loss = boundary_weighted_loss(pred, y[:, 0], lam)
                with torch.no_grad():
                    epoch_ring += boundary_mse(pred, y[:, 0]).item() * len(batch)
            else:
                loss = rollout_loss(model, x, y, lam, step_hook=step_hook)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optim.step()
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        val_loss, val_ring = _evaluate(model, val_samples, lam, config.batch_size, device, horizon)
        history["lambda"].append(lam)
        history["train_loss"].append(epoch_loss / max(seen, 1))
        history["train_boundary_mse"].append(epoch_ring / max(seen, 1))
        history["val_loss"].append(val_loss)
        history["val_boundary_mse"].append(val_ring)
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_state"] = best_state
    history["best_val_loss"] = best_val
    return history


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: nn.Module, spec: PredictorSpec, train_config=None,
                    epoch: int | None = None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "predictor",
        "spec": spec.to_dict(),
        "spec_hash": spec.hash(),
        "width_schedule": list(spec.widths),
        "train_config": asdict(train_config) if train_config is not None else None,
        "epoch": epoch,
        "rng_state": torch.get_rng_state(),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[nn.Module, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    spec = PredictorSpec(**payload["spec"])
    if payload.get("spec_hash") != spec.hash():
        raise ValueError(f"checkpoint spec hash mismatch in {path}")
    model = build_predictor(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# --------------------------------------------------------------------------
# Patch / full-domain consistency probe
# --------------------------------------------------------------------------

def patch_full_consistency(
    model: nn.Module,
    patch: torch.Tensor,
    embed_size: int,
    offset: tuple[int, int] | None = None,
    central: int = 32,
) -> float:
    """Max abs difference, over the central region of the patch, between the
    patch-only prediction and the prediction on the patch embedded at a
    pooling-aligned offset inside a zero-background field of `embed_size`."""
    if patch.dim() != 3:
        raise ValueError("patch must be (C, H, W)")
    c, h, w = patch.shape
    div = model.spec.divisor
    if offset is None:
        offset = (((embed_size - h) // 2) // div * div, ((embed_size - w) // 2) // div * div)
    r0, c0 = offset
    if r0 % div or c0 % div:
        raise ValueError(f"embedding offset must be divisible by {div}")
    full = torch.zeros(c, embed_size, embed_size, dtype=patch.dtype)
    full[:, r0 : r0 + h, c0 : c0 + w] = patch
    model.eval()
    with torch.no_grad():
        pred_patch = model(patch.unsqueeze(0))[0]
        pred_full = model(full.unsqueeze(0))[0, :, r0 : r0 + h, c0 : c0 + w]
    rs = (h - central) // 2
    cs = (w - central) // 2
    diff = (pred_patch - pred_full)[:, rs : rs + central, cs : cs + central]
    return float(diff.abs().max())
