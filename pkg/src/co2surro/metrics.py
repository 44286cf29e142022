"""Field-comparison metrics, per-timestep aggregation, summary tables and profiling.

All metrics are computed on min-max scaled fields so thresholds are
comparable across fields; every persisted report states this in its header.
PCC of a constant (zero-variance) field is undefined and returned as NaN;
threshold checks treat NaN as below any threshold.
"""

from __future__ import annotations

import multiprocessing as mp
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .data import FIELD_NAMES

PCC_THRESHOLD_DEFAULT = 0.75
REPORT_HEADER = "metrics computed on min-max scaled fields"


def _check_same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation coefficient. NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    if x.size < 2:
        raise ValueError("pcc needs at least 2 elements")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd * xd).sum()) * np.sqrt((yd * yd).sum())
    if denom == 0.0:
        return float("nan")
    return float((xd * yd).sum() / denom)


def below_threshold(value: float, threshold: float) -> bool:
    """Threshold check that treats an undefined (NaN) metric as a failure."""
    return bool(np.isnan(value) or value < threshold)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kern = np.outer(g, g)
    return kern / kern.sum()


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Structural similarity with Gaussian local statistics.

    Local means/variances/covariance come from a normalised Gaussian window
    applied in valid mode (only full windows contribute), and the result is
    the mean of the per-pixel similarity map.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    if min(x.shape) < win_size:
        raise ValueError(f"grid {x.shape} smaller than the {win_size}x{win_size} window")
    kern = _gaussian_kernel(win_size, sigma)

    def filt(a: np.ndarray) -> np.ndarray:
        windows = sliding_window_view(a, (win_size, win_size))
        return np.tensordot(windows, kern, axes=([2, 3], [0, 1]))

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def area_co2_error(y_true: np.ndarray, y_pred: np.ndarray, threshold: float = 0.5) -> float:
    """Signed percentage difference in pixels strictly above the concentration
    threshold: 100 * (A(true) - A(pred)) / N."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    _check_same_shape(y_true, y_pred)
    a_true = int(np.count_nonzero(y_true > threshold))
    a_pred = int(np.count_nonzero(y_pred > threshold))
    return 100.0 * (a_true - a_pred) / y_true.size


# --------------------------------------------------------------------------
# Report assembly
# --------------------------------------------------------------------------

def evaluate_prediction(
    pred_scaled: np.ndarray,
    true_scaled: np.ndarray,
    sim_id: str,
    model: str = "",
    split: str = "",
    first_timestep: int = 0,
    with_ssim: bool = True,
) -> pd.DataFrame:
    """Per-timestep metric rows for one predicted series.

    `pred_scaled` and `true_scaled` are aligned (n, 4, H, W) scaled stacks.
    Returns one row per timestep with per-field pcc/ssim/mse columns and
    the concentration area error.
    """
    pred_scaled = np.asarray(pred_scaled)
    true_scaled = np.asarray(true_scaled)
    _check_same_shape(pred_scaled, true_scaled)
    rows = []
    for t in range(pred_scaled.shape[0]):
        row: dict = {
            "model": model,
            "sim_id": sim_id,
            "split": split,
            "timestep": first_timestep + t,
        }
        for f, name in enumerate(FIELD_NAMES):
            row[f"pcc_{name}"] = pcc(pred_scaled[t, f], true_scaled[t, f])
            # schema is fixed; skipping ssim (it is the slow one) leaves NaN
            row[f"ssim_{name}"] = (
                ssim(pred_scaled[t, f], true_scaled[t, f]) if with_ssim else float("nan")
            )
            row[f"mse_{name}"] = mse(pred_scaled[t, f], true_scaled[t, f])
        row["area_error"] = area_co2_error(true_scaled[t, 0], pred_scaled[t, 0])
        rows.append(row)
    return pd.DataFrame(rows)


def per_timestep_curves(report: pd.DataFrame, split: str | None = None, metric: str = "pcc") -> pd.DataFrame:
    """Mean metric per field vs timestep, averaged over the simulations of a split."""
    df = report if split is None else report[report["split"] == split]
    if df.empty:
        raise ValueError(f"no rows for split {split!r}")
    cols = [f"{metric}_{name}" for name in FIELD_NAMES]
    lengths = df.groupby("sim_id")["timestep"].count().unique()
    if len(lengths) > 1:
        raise ValueError(f"misaligned series lengths in report: {sorted(lengths)}")
    return df.groupby("timestep")[cols].mean()


def summary_tables(report: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Final-timestep summaries over validation simulations.

    Returns (per-field PCC/SSIM table, MSE + area-error quartile table),
    one row per model. Quartiles use linear interpolation on the sorted
    per-simulation area errors.
    """
    val = report[report["split"] == "validation"]
    if val.empty:
        raise ValueError("summary requires at least one validation simulation")
    last = val[val["timestep"] == val["timestep"].max()]
    t1_rows, t2_rows = [], []
    for model, group in last.groupby("model", sort=False):
        row1: dict = {"model": model}
        for name in FIELD_NAMES:
            row1[f"pcc_{name}"] = group[f"pcc_{name}"].mean()
            row1[f"ssim_{name}"] = group[f"ssim_{name}"].mean()
        t1_rows.append(row1)
        errors = group["area_error"].to_numpy()
        mse_all = group[[f"mse_{name}" for name in FIELD_NAMES]].to_numpy().mean()
        t2_rows.append(
            {
                "model": model,
                "mse": mse_all,
                "area_error_q1": float(np.percentile(errors, 25)),
                "area_error_median": float(np.percentile(errors, 50)),
                "area_error_q3": float(np.percentile(errors, 75)),
            }
        )
    return pd.DataFrame(t1_rows), pd.DataFrame(t2_rows)


def merged_summary(report: pd.DataFrame) -> pd.DataFrame:
    """Machine-readable summary: one row per model, eight metric columns
    (per-field PCC and SSIM) plus MSE and the three area-error quartiles."""
    t1, t2 = summary_tables(report)
    return t1.merge(t2, on="model")


def save_report(report: pd.DataFrame, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {REPORT_HEADER}\n")
        report.to_csv(fh, index=False)


def load_report(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def plot_curves(
    report: pd.DataFrame,
    out_path,
    split: str = "validation",
    metric: str = "pcc",
    threshold: float | None = PCC_THRESHOLD_DEFAULT,
) -> None:
    """Per-field metric-vs-timestep curves, one panel per field, one line per model."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(FIELD_NAMES), figsize=(4 * len(FIELD_NAMES), 3.2), sharey=True)
    df = report[report["split"] == split]
    for ax, name in zip(axes, FIELD_NAMES):
        for model, group in df.groupby("model", sort=False):
            curve = group.groupby("timestep")[f"{metric}_{name}"].mean()
            ax.plot(curve.index, curve.values, label=model)
        if threshold is not None:
            ax.axhline(threshold, color="grey", ls="--", lw=0.8)
            ax.axhspan(ax.get_ylim()[0] if ax.get_ylim()[0] < threshold else 0.0, threshold,
                       color="grey", alpha=0.15)
        ax.set_title(name)
        ax.set_xlabel("timestep")
    axes[0].set_ylabel(metric.upper())
    axes[0].legend(fontsize=7)
    fig.suptitle(f"{metric.upper()} per field ({split}); {REPORT_HEADER}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


# --------------------------------------------------------------------------
# Memory/time profiling
# --------------------------------------------------------------------------

@dataclass
class ProfileRecord:
    wall_s: float
    peak_memory_bytes: int
    host_memory_proxy: bool  # True when no device instrumentation was available
    parameter_count: int | None = None
    inference_wall_s: float | None = None
    inference_steps: int | None = None

    def validate(self) -> None:
        if self.wall_s < 0 or self.peak_memory_bytes < 0:
            raise ValueError("profile values must be non-negative")


def _profile_worker(conn, fn, args, kwargs, setup) -> None:
    import resource

    import psutil

    if setup is not None:
        payload = setup(*args, **kwargs)
        args, kwargs = (payload,), {}
    baseline = psutil.Process().memory_info().rss
    t0 = time.perf_counter()
    fn(*args, **kwargs)
    wall = time.perf_counter() - t0
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024  # kB on Linux
    conn.send((wall, max(peak - baseline, 0)))
    conn.close()


def profile_run(fn, *args, in_process: bool = False, setup=None, **kwargs) -> ProfileRecord:
    """Run `fn(*args, **kwargs)` and record wall time and peak memory.

    With a CUDA device the run happens in-process and the peak is the device
    allocator's high-water mark. Otherwise the run happens in a fresh spawned
    process and the peak is the child's RSS high-water mark above its
    post-setup baseline (a host-memory proxy, flagged as such). When `setup`
    is given it runs first in the child, its result becomes fn's argument, and
    the memory baseline is taken after it, so data staging does not count
    against the run. `fn`, `setup` and the arguments must be picklable unless
    `in_process` is set.
    """
    import torch

    if torch.cuda.is_available():
        if setup is not None:
            args, kwargs = (setup(*args, **kwargs),), {}
        torch.cuda.reset_peak_memory_stats()
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        wall = time.perf_counter() - t0
        return ProfileRecord(wall, int(torch.cuda.max_memory_allocated()), host_memory_proxy=False)

    if in_process:
        import psutil

        if setup is not None:
            args, kwargs = (setup(*args, **kwargs),), {}
        proc = psutil.Process()
        before = proc.memory_info().rss
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        wall = time.perf_counter() - t0
        return ProfileRecord(wall, max(proc.memory_info().rss - before, 0), host_memory_proxy=True)

    ctx = mp.get_context("spawn")
    parent, child = ctx.Pipe()
    proc = ctx.Process(target=_profile_worker, args=(child, fn, args, kwargs, setup))
    proc.start()
    try:
        wall, peak = parent.recv()
    except EOFError as exc:
        proc.join()
        raise RuntimeError(f"profiled run died (exit code {proc.exitcode})") from exc
    proc.join()
    if proc.exitcode != 0:
        raise RuntimeError(f"profiled run failed with exit code {proc.exitcode}")
    return ProfileRecord(wall, int(peak), host_memory_proxy=True)
