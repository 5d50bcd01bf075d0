"""Dataset ingestion, preprocessing, and synthetic scenario generators.

CSV conventions: RFC-4180-style quoting, UTF-8, '.' decimal point. Floats
are written with 17 significant digits so a save/load round trip is
bit-exact. Trajectory files carry one trajectory per line as a JSON array
of [x, y] pairs.

The scenario generators are fixed, versioned approximations (their exact
published parameters are not available); acceptance thresholds elsewhere
in the test suite are tied to GENERATOR_VERSION, so changing any constant
here means bumping it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .model import Dataset

__all__ = [
    "GENERATOR_VERSION",
    "Trajectory",
    "ScenarioSpec",
    "load_csv",
    "save_csv",
    "standardize_rows",
    "resample_trajectory",
    "canonicalize_direction",
    "read_trajectories",
    "generate_scenario",
    "read_labels_csv",
    "write_labels_csv",
]

GENERATOR_VERSION = 1

# S1-like generator constants: Gaussian clusters with sparse low-rank
# covariance in an informative subspace, pure-noise coordinates appended
S1_CLUSTERS = 5
S1_LATENT_DIM = 4
S1_MEAN_SCALE = 1.1
S1_LOADING_SCALE = 1.2
S1_LOADING_DENSITY = 0.35
S1_NOISE_SD = 0.6

# S2-like generator constants: unbalanced phase-shifted sinusoid clusters
# over d time points with heteroscedastic noise, rows standardized
S2_WEIGHTS = (0.55, 0.25, 0.12, 0.05, 0.03)
S2_CYCLES = 2.0
S2_PHASE_JITTER = 0.03
S2_NOISE_LO = 0.15
S2_NOISE_HI = 0.55


@dataclass
class Trajectory:
    points: np.ndarray  # (m, 2), m >= 2

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("a trajectory is an (m, 2) array of points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("trajectory has non-finite coordinates")


@dataclass
class ScenarioSpec:
    scenario: str                     # "s1" | "s2"
    n: int = 1000
    d: int = 50
    clusters: int = S1_CLUSTERS
    noise_features: int = 30
    weights: tuple | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.scenario not in ("s1", "s2"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 1 or self.d < 2 or self.clusters < 1:
            raise ValueError("scenario needs n >= 1, d >= 2, clusters >= 1")
        if self.scenario == "s1" and not 0 <= self.noise_features < self.d:
            raise ValueError("noise_features must lie in [0, d)")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.clusters,) or np.any(w <= 0):
                raise ValueError("weights must be positive, one per cluster")


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def load_csv(path, label_column: str | None = None,
             header: bool | None = None) -> Dataset:
    """Parse a numeric CSV into a Dataset.

    ``header=None`` sniffs: if any cell of the first row fails float
    parsing, the row is treated as a header. ``label_column`` names the
    column split off as integer truth labels (requires a header). Ragged
    rows, non-numeric cells, and non-finite values are rejected with the
    offending row and column named.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or all(not row for row in rows):
        raise ValueError(f"{path}: empty file")

    def try_parse(cell):
        try:
            return float(cell)
        except ValueError:
            return None

    names = None
    first = rows[0]
    if header is True or (header is None
                          and any(try_parse(c) is None for c in first)):
        names = [c.strip() for c in first]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: header but no data rows")

    label_idx = None
    if label_column is not None:
        if names is None or label_column not in names:
            raise ValueError(f"{path}: no column named {label_column!r}")
        label_idx = names.index(label_column)

    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(
                f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            v = try_parse(cell)
            if v is None:
                raise ValueError(
                    f"{path}: row {i + 1}, column {j + 1}: "
                    f"non-numeric cell {cell!r}")
            if not np.isfinite(v):
                raise ValueError(
                    f"{path}: row {i + 1}, column {j + 1}: "
                    f"non-finite value {cell!r}")
            values[i, j] = v

    labels = None
    if label_idx is not None:
        labels = values[:, label_idx].astype(int)
        values = np.delete(values, label_idx, axis=1)
    return Dataset(y=values, labels=labels)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(path, data: Dataset, label_column: str | None = None) -> None:
    """Write the dataset with 17-significant-digit floats; when
    ``label_column`` is given (and labels exist) a header row is emitted
    and the labels become the final column."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if label_column is not None and data.labels is not None:
            writer.writerow([f"x{j}" for j in range(data.d)] + [label_column])
            for row, lab in zip(data.y, data.labels):
                writer.writerow([_fmt(v) for v in row] + [int(lab)])
        else:
            for row in data.y:
                writer.writerow([_fmt(v) for v in row])


def read_labels_csv(path) -> np.ndarray:
    """Labels from a `row,label` CSV (as written by the cluster command) or
    from a single-column file of integers."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty label file")
    if rows[0] == ["row", "label"]:
        body = rows[1:]
        if not body:
            raise ValueError(f"{path}: no label rows")
        order = np.argsort([int(r[0]) for r in body])
        return np.array([int(body[i][1]) for i in order])
    if any(len(r) != 1 for r in rows):
        raise ValueError(f"{path}: expected `row,label` header or one column")
    return np.array([int(r[0]) for r in rows])


def write_labels_csv(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("row,label\n")
        for i, lab in enumerate(labels):
            fh.write(f"{i},{int(lab)}\n")


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def standardize_rows(data: Dataset) -> Dataset:
    """Scale each row to zero mean and unit variance (sample-variance, n-1
    denominator). Constant rows cannot be standardized and are reported as
    an error listing their indices."""
    if data.d < 2:
        raise ValueError("row standardization needs at least 2 columns")
    sd = data.y.std(axis=1, ddof=1)
    bad = np.flatnonzero(sd == 0.0)
    if bad.size:
        raise ValueError(f"constant rows cannot be standardized: "
                         f"indices {bad.tolist()}")
    y = (data.y - data.y.mean(axis=1, keepdims=True)) / sd[:, None]
    return Dataset(y=y, labels=None if data.labels is None
                   else data.labels.copy())


def resample_trajectory(traj: Trajectory, target_len: int = 50) -> np.ndarray:
    """Arc-length-uniform linear resampling to ``target_len`` points,
    endpoints preserved exactly; returns the flattened (x1, y1, x2, y2, ...)
    vector of length 2 * target_len."""
    pts = traj.points
    if pts.shape[0] < 2:
        raise ValueError("resampling needs at least 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        out = np.tile(pts[0], (target_len, 1))
        return out.ravel()
    targets = np.linspace(0.0, total, target_len)
    x = np.interp(targets, cum, pts[:, 0])
    y = np.interp(targets, cum, pts[:, 1])
    out = np.column_stack([x, y])
    out[0], out[-1] = pts[0], pts[-1]
    return out.ravel()


def canonicalize_direction(traj: Trajectory, center) -> Trajectory:
    """Reverse the trajectory when that puts the endpoint nearer to
    ``center`` first; exact ties keep the original order."""
    center = np.asarray(center, dtype=float)
    d_start = np.linalg.norm(traj.points[0] - center)
    d_end = np.linalg.norm(traj.points[-1] - center)
    if d_end < d_start:
        return Trajectory(points=traj.points[::-1].copy())
    return Trajectory(points=traj.points.copy())


def read_trajectories(path) -> list[Trajectory]:
    """One trajectory per line, each a JSON array of [x, y] pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                pairs = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {i + 1}: bad JSON: {exc}") from exc
            out.append(Trajectory(points=np.asarray(pairs, dtype=float)))
    return out


# --------------------------------------------------------------------------
# scenario generators
# --------------------------------------------------------------------------

def _draw_labels(rng, n, weights):
    labels = rng.choice(len(weights), size=n, p=weights)
    return labels


def _generate_s1(spec: ScenarioSpec, rng) -> Dataset:
    informative = spec.d - spec.noise_features
    if informative < S1_LATENT_DIM:
        raise ValueError(
            f"s1 needs at least {S1_LATENT_DIM} informative features")
    weights = (np.full(spec.clusters, 1.0 / spec.clusters)
               if spec.weights is None
               else np.asarray(spec.weights, float) / np.sum(spec.weights))
    means = S1_MEAN_SCALE * rng.standard_normal((spec.clusters, informative))
    loadings = []
    for _ in range(spec.clusters):
        mask = rng.random((informative, S1_LATENT_DIM)) < S1_LOADING_DENSITY
        W = S1_LOADING_SCALE * rng.standard_normal(
            (informative, S1_LATENT_DIM)) * mask
        loadings.append(W)
    labels = _draw_labels(rng, spec.n, weights)
    y = np.empty((spec.n, spec.d))
    for k in range(spec.clusters):
        sel = labels == k
        m = int(sel.sum())
        factors = rng.standard_normal((m, S1_LATENT_DIM))
        y[sel, :informative] = (means[k] + factors @ loadings[k].T
                                + S1_NOISE_SD * rng.standard_normal((m, informative)))
    if spec.noise_features:
        y[:, informative:] = rng.standard_normal((spec.n, spec.noise_features))
    return Dataset(y=y, labels=labels + 1)


def _generate_s2(spec: ScenarioSpec, rng) -> Dataset:
    weights = np.asarray(S2_WEIGHTS if spec.weights is None else spec.weights,
                         dtype=float)
    if weights.size != spec.clusters:
        raise ValueError("weights length must equal the cluster count")
    weights = weights / weights.sum()
    labels = _draw_labels(rng, spec.n, weights)
    t = np.arange(spec.d) / spec.d
    phases = np.arange(spec.clusters) / spec.clusters
    noise_sd = np.linspace(S2_NOISE_LO, S2_NOISE_HI, spec.d)
    amp = np.exp(0.3 * rng.standard_normal(spec.n))
    jitter = S2_PHASE_JITTER * rng.standard_normal(spec.n)
    y = (amp[:, None]
         * np.sin(2.0 * np.pi * (S2_CYCLES * t[None, :]
                                 + phases[labels][:, None]
                                 + jitter[:, None]))
         + noise_sd[None, :] * rng.standard_normal((spec.n, spec.d)))
    data = standardize_rows(Dataset(y=y))
    return Dataset(y=data.y, labels=labels + 1)


def generate_scenario(spec: ScenarioSpec) -> Dataset:
    """Synthetic benchmark data, deterministic per seed; labels are
    1-based. ``s1``: well-separated sparse-covariance Gaussian clusters
    plus pure-noise features. ``s2``: unbalanced non-Gaussian clusters of
    phase-shifted sinusoids, rows standardized."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.scenario == "s1":
        return _generate_s1(spec, rng)
    return _generate_s2(spec, rng)
