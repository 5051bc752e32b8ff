"""Matrix-valued evolve rates, EOS-relative evolve rate series, PCA projection
of those series, and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateData, IndexOutOfRange, InvalidParams, ShapeMismatch
from .trajectory import Trajectory

SIGN_EPS = 1e-12


@dataclass(frozen=True)
class RerSeries:
    """Per-step EOS-relative evolve-rate maps: matrices[t] is a D x D grid, t = 0..T-1."""

    matrices: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.float64)
        if m.ndim != 3 or m.shape[0] < 1 or m.shape[1] != m.shape[2]:
            raise ShapeMismatch(f"matrices must be (T, D, D), got {m.shape}")
        if not np.isfinite(m).all():
            raise ShapeMismatch("matrices must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "matrices", m)

    @property
    def n_steps(self) -> int:
        return self.matrices.shape[0]

    @property
    def map_dim(self) -> int:
        return self.matrices.shape[1]


def evolve_rate_map(traj: Trajectory, token: int, step: int) -> np.ndarray:
    """Entrywise difference of token's maps at consecutive frames (token is 1-based)."""
    if not 1 <= token <= traj.n_tokens:
        raise IndexOutOfRange(f"token {token} outside [1, {traj.n_tokens}]")
    if not 0 <= step <= traj.n_steps - 1:
        raise IndexOutOfRange(f"step {step} outside [0, {traj.n_steps - 1}]")
    return traj.maps[step + 1, token - 1] - traj.maps[step, token - 1]


def rer_eos(traj: Trajectory, step: int) -> np.ndarray:
    """EOS evolve-rate map minus the entrywise mean of the non-EOS evolve-rate maps."""
    if not 0 <= step <= traj.n_steps - 1:
        raise IndexOutOfRange(f"step {step} outside [0, {traj.n_steps - 1}]")
    delta = traj.maps[step + 1] - traj.maps[step]
    e = traj.eos_index - 1
    others = np.delete(delta, e, axis=0)
    return delta[e] - others.mean(axis=0)


def rer_series(traj: Trajectory) -> RerSeries:
    """EOS-relative evolve-rate maps for every step of the trajectory."""
    mats = np.stack([rer_eos(traj, t) for t in range(traj.n_steps)])
    return RerSeries(matrices=mats, sample_id=traj.sample_id)


def average_series(series: list[RerSeries], sample_id: str = "mean") -> RerSeries:
    """Stepwise mean of several series (same T and D); supports per-class averaging."""
    if not series:
        raise DegenerateData("need at least one series to average")
    shape = series[0].matrices.shape
    for s in series[1:]:
        if s.matrices.shape != shape:
            raise ShapeMismatch(f"series shapes differ: {s.matrices.shape} vs {shape}")
    return RerSeries(matrices=np.mean([s.matrices for s in series], axis=0), sample_id=sample_id)


@dataclass(frozen=True)
class PcaProjection:
    """Top-2 principal basis (rows orthonormal), its explained variance, and the
    series projected into that plane, one 2-D point per step."""

    components: np.ndarray
    explained_variance: np.ndarray
    trajectory: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64)
        traj = np.asarray(self.trajectory, dtype=np.float64)
        if comp.ndim != 2 or comp.shape[0] != 2:
            raise ShapeMismatch(f"components must be (2, D*D), got {comp.shape}")
        if ev.shape != (2,):
            raise ShapeMismatch(f"explained_variance must have 2 entries, got {ev.shape}")
        if traj.ndim != 2 or traj.shape[1] != 2:
            raise ShapeMismatch(f"trajectory must be (T, 2), got {traj.shape}")
        for a in (comp, ev, traj):
            a.setflags(write=False)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "explained_variance", ev)
        object.__setattr__(self, "trajectory", traj)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # deterministic orientation: first coordinate of visible magnitude is positive
    out = components.copy()
    for row in out:
        for v in row:
            if abs(v) > SIGN_EPS:
                if v < 0:
                    row *= -1.0
                break
    return out


def pca_project(series: list[RerSeries]) -> list[PcaProjection]:
    """Fit one shared 2-D basis on all step vectors pooled across the input series,
    then project every series into it.

    The basis is the top-2 right singular vectors of the centered pooled data;
    explained variance is the squared singular values over (n - 1).
    """
    if not series:
        raise DegenerateData("no series given")
    d = series[0].map_dim
    for s in series:
        if s.map_dim != d:
            raise ShapeMismatch(f"map dims differ: {s.map_dim} vs {d}")
    flat = np.concatenate([s.matrices.reshape(s.n_steps, -1) for s in series])
    n = flat.shape[0]
    if n < 2:
        raise DegenerateData(f"need at least 2 pooled step vectors, got {n}")
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[0] ** 2 / (n - 1) <= 0.0:
        raise DegenerateData("pooled variance is zero")
    components = _fix_signs(vt[:2])
    if components.shape[0] < 2:
        raise DegenerateData("fewer than 2 principal directions available")
    variance = svals[:2] ** 2 / (n - 1)
    out = []
    for s in series:
        coords = (s.matrices.reshape(s.n_steps, -1) - mean) @ components.T
        out.append(
            PcaProjection(
                components=components,
                explained_variance=variance,
                trajectory=coords,
                sample_id=s.sample_id,
            )
        )
    return out


def mean_step_length(proj: PcaProjection) -> float:
    """Average Euclidean distance between consecutive projected points."""
    pts = proj.trajectory
    if pts.shape[0] < 2:
        raise DegenerateData("trajectory has fewer than 2 points")
    return float(np.mean(np.linalg.norm(pts[1:] - pts[:-1], axis=1)))


def export_rer_heatmaps(series: RerSeries, path, raster: bool = False) -> dict:
    """Write one D x D CSV grid per step plus a min/max sidecar into a directory.

    Values are formatted with 9 significant digits; a decoded grid compares
    equal for values representable at that precision.  With raster=True a
    combined PNG is also written (needs matplotlib) using a diverging scale
    centered at 0.
    """
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(series.n_steps - 1)))
    grid_paths = []
    for t in range(series.n_steps):
        p = out_dir / f"step_{t:0{width}d}.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            for row in series.matrices[t]:
                w.writerow([f"{v:.9g}" for v in row])
        grid_paths.append(p)
    minmax_path = out_dir / "minmax.csv"
    with minmax_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "min", "max"])
        for t in range(series.n_steps):
            w.writerow([t, f"{series.matrices[t].min():.9g}", f"{series.matrices[t].max():.9g}"])
    result = {"grids": grid_paths, "minmax": minmax_path, "raster": None}
    if raster:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError as exc:
            raise InvalidParams("raster export requires matplotlib (install extra 'raster')") from exc
        t_total = series.n_steps
        ncols = min(t_total, 5)
        nrows = (t_total + ncols - 1) // ncols
        limit = float(np.abs(series.matrices).max())
        if limit == 0.0:
            limit = 1.0
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False)
        for t in range(nrows * ncols):
            ax = axes[t // ncols][t % ncols]
            if t < t_total:
                ax.imshow(series.matrices[t], cmap="RdBu_r", vmin=-limit, vmax=limit)
                ax.set_title(f"step {t}", fontsize=8)
            ax.axis("off")
        raster_path = out_dir / "heatmaps.png"
        fig.savefig(raster_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        result["raster"] = raster_path
    return result


def load_heatmap_grid(path) -> np.ndarray:
    """Read back a CSV grid written by export_rer_heatmaps."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh)]
    return np.array(rows, dtype=np.float64)


__all__ = [
    "RerSeries",
    "PcaProjection",
    "evolve_rate_map",
    "rer_eos",
    "rer_series",
    "average_series",
    "pca_project",
    "mean_step_length",
    "export_rer_heatmaps",
    "load_heatmap_grid",
]
