"""Probabilistic occupancy mapping of a binary terrain variable.

A terrain is a grid of fine cells (resolution ``r_M`` metres per cell),
each either "interesting" (label 1) or not (label 0). UAVs observe square
patches whose size grows with altitude while per-cell accuracy drops, and
the observations are fused into per-cell posterior probabilities by
Bayesian log-odds updates. Map uncertainty is scored with a class-weighted
Shannon entropy so that planners can prefer the interesting class.

Conventions: arrays are indexed ``[row, col]`` with row 0 at the southern
edge and column 0 at the western edge; positions are ``(x east, y north,
z altitude)`` in metres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    InvalidMeasurementError,
    InvalidPositionError,
)

# Posterior probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR] when
# read, so log-odds stay finite and fusion remains exactly commutative.
PROB_FLOOR = 1e-4


@dataclass
class GroundTruthMap:
    """Binary reference terrain: 1 marks the interesting class."""

    cells: np.ndarray  # (H, W), values in {0, 1}
    resolution: float  # metres per cell

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2 or self.cells.shape[0] < 1 or self.cells.shape[1] < 1:
            raise ConfigurationError("ground truth map needs a non-empty 2D cell grid")
        if not np.isin(self.cells, (0, 1)).all():
            raise ConfigurationError("ground truth cells must be 0 or 1")
        if self.resolution <= 0:
            raise ConfigurationError("map resolution must be positive")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def interesting_fraction(self) -> float:
        return float(self.cells.mean())


@dataclass
class OccupancyGrid:
    """Per-cell posterior probability of the interesting class.

    The fusion state is kept as raw (unclamped) log-odds so that fusing
    measurements in any order yields bit-comparable results; the clamp to
    ``[PROB_FLOOR, 1 - PROB_FLOOR]`` is applied by :meth:`probs`.
    """

    log_odds: np.ndarray  # (H, W) float64
    resolution: float

    def __post_init__(self) -> None:
        self.log_odds = np.asarray(self.log_odds, dtype=np.float64)
        if self.log_odds.ndim != 2:
            raise ConfigurationError("occupancy grid must be 2D")
        if self.resolution <= 0:
            raise ConfigurationError("map resolution must be positive")

    @classmethod
    def uniform(cls, width: int, height: int, resolution: float) -> "OccupancyGrid":
        """Grid at the uninformed prior p = 0.5 everywhere."""
        return cls(np.zeros((height, width), dtype=np.float64), resolution)

    @property
    def height(self) -> int:
        return self.log_odds.shape[0]

    @property
    def width(self) -> int:
        return self.log_odds.shape[1]

    def probs(self) -> np.ndarray:
        """Clamped posterior probabilities, elementwise in (0, 1)."""
        p = 1.0 / (1.0 + np.exp(-self.log_odds))
        return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)

    def probs_slice(self, slices: tuple[slice, slice]) -> np.ndarray:
        """Clamped posterior over a cell rectangle only (cheap for planners)."""
        p = 1.0 / (1.0 + np.exp(-self.log_odds[slices]))
        return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.log_odds.copy(), self.resolution)


@dataclass(frozen=True)
class SensorModel:
    """Altitude-indexed per-cell classification accuracy."""

    table: tuple[tuple[float, float], ...]  # (altitude m, accuracy), ascending

    def __post_init__(self) -> None:
        alts = [a for a, _ in self.table]
        accs = [p for _, p in self.table]
        if not alts:
            raise ConfigurationError("sensor table is empty")
        if any(b <= a for a, b in zip(alts, alts[1:])):
            raise ConfigurationError("sensor altitudes must be strictly increasing")
        if any(not (0.5 < p <= 1.0) for p in accs):
            raise ConfigurationError("sensor accuracies must lie in (0.5, 1.0]")

    @classmethod
    def default(cls) -> "SensorModel":
        return cls(((5.0, 0.99), (10.0, 0.735), (15.0, 0.625)))

    @property
    def min_altitude(self) -> float:
        return self.table[0][0]

    def accuracy_at(self, altitude: float) -> float:
        for alt, acc in self.table:
            if math.isclose(alt, altitude, rel_tol=0.0, abs_tol=1e-6):
                return acc
        raise ConfigurationError(f"no sensor accuracy registered for altitude {altitude} m")


@dataclass(frozen=True)
class ImportanceWeights:
    """Class importances: w1 for the interesting class, w2 for the rest."""

    w1: float = 0.8
    w2: float = 0.2

    def __post_init__(self) -> None:
        if self.w1 < 0 or self.w2 < 0 or abs(self.w1 + self.w2 - 1.0) > 1e-12:
            raise ConfigurationError("importance weights must be nonnegative and sum to 1")


@dataclass(frozen=True)
class CellRect:
    """Inclusive rectangle of cell indices."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int

    @property
    def width(self) -> int:
        return self.x_hi - self.x_lo + 1

    @property
    def height(self) -> int:
        return self.y_hi - self.y_lo + 1

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y_lo, self.y_hi + 1), slice(self.x_lo, self.x_hi + 1)

    def contains(self, other: "CellRect") -> bool:
        return (
            self.x_lo <= other.x_lo
            and self.y_lo <= other.y_lo
            and other.x_hi <= self.x_hi
            and other.y_hi <= self.y_hi
        )


@dataclass
class Measurement:
    """One observed patch of per-cell class labels at map resolution."""

    position: np.ndarray  # (3,) metres, the measurement pose
    rect: CellRect  # footprint at map resolution, already clipped
    values: np.ndarray  # (rect.height, rect.width) labels in {0, 1}
    accuracy: float  # per-cell accuracy used to generate it
    agent_id: int
    step: int

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.shape != (self.rect.height, self.rect.width):
            raise InvalidMeasurementError("measurement values do not match the footprint")


def footprint(
    position: np.ndarray,
    factor: float,
    width: int,
    height: int,
    resolution: float,
) -> CellRect:
    """Square field of view of side ``factor * altitude``, clipped to the map.

    The side length in cells is rounded to the nearest integer and
    centre-aligned on the position; a leftover asymmetric cell goes to the
    north/west side.
    """
    x, y, alt = float(position[0]), float(position[1]), float(position[2])
    if alt <= 0:
        raise InvalidPositionError(f"measurement altitude must be positive, got {alt}")
    if not (0.0 <= x <= width * resolution) or not (0.0 <= y <= height * resolution):
        raise InvalidPositionError(f"position ({x}, {y}) outside the terrain")
    side_cells = max(1, round(factor * alt / resolution))
    x_lo, y_lo = _footprint_origin(x, y, side_cells, resolution)
    x0 = max(0, x_lo)
    y0 = max(0, y_lo)
    x1 = min(width - 1, x_lo + side_cells - 1)
    y1 = min(height - 1, y_lo + side_cells - 1)
    if x1 < x0 or y1 < y0:
        raise InvalidPositionError("footprint does not intersect the map")
    return CellRect(x0, x1, y0, y1)


def _footprint_origin(x: float, y: float, side_cells: int, resolution: float) -> tuple[int, int]:
    """Unclipped south-west cell of the footprint (may be negative)."""
    cx = x / resolution
    cy = y / resolution
    # Ties go west in x (round half down) and north in y (round half up).
    x_lo = math.ceil(cx - side_cells / 2.0 - 0.5)
    y_lo = math.floor(cy - side_cells / 2.0 + 0.5)
    return x_lo, y_lo


def upsample_factor(altitude: float, min_altitude: float) -> int:
    """Native-to-map resolution ratio of a measurement at ``altitude``.

    The map resolution matches the camera at the lowest altitude; higher
    flights observe coarser blocks that get upsampled before fusion.
    """
    return max(1, round(altitude / min_altitude))


def simulate_measurement(
    gt: GroundTruthMap,
    position: np.ndarray,
    sensor: SensorModel,
    rng: np.random.Generator,
    *,
    footprint_factor: float = 1.0,
    agent_id: int = 0,
    step: int = 0,
) -> Measurement:
    """Draw a noisy class-likelihood patch of the ground truth.

    One label is drawn per native-resolution block (block side
    ``upsample_factor(altitude)`` map cells): the block's majority truth,
    flipped with probability ``1 - accuracy``. Labels are then repeated
    over the fine cells the block covers, so all fine cells under one
    coarse cell carry the same value.

    ``rng`` is consumed as one uniform field covering the whole map and
    indexed by absolute cell, so two planners measuring the same cells at
    the same (step, agent) key see identical noise.
    """
    alt = float(position[2])
    acc = sensor.accuracy_at(alt)
    rect = footprint(position, footprint_factor, gt.width, gt.height, gt.resolution)
    fac = upsample_factor(alt, sensor.min_altitude)
    side_cells = max(1, round(footprint_factor * alt / gt.resolution))
    x_lo0, y_lo0 = _footprint_origin(float(position[0]), float(position[1]), side_cells, gt.resolution)

    uniforms = rng.random((gt.height, gt.width))

    ys = np.arange(rect.y_lo, rect.y_hi + 1)
    xs = np.arange(rect.x_lo, rect.x_hi + 1)
    by = (ys - y_lo0) // fac
    bx = (xs - x_lo0) // fac
    by_min, bx_min = by.min(), bx.min()
    n_by = by.max() - by_min + 1
    n_bx = bx.max() - bx_min + 1

    sub = gt.cells[rect.slices].astype(np.float64)
    block_id = (by - by_min)[:, None] * n_bx + (bx - bx_min)[None, :]
    sums = np.bincount(block_id.ravel(), weights=sub.ravel(), minlength=n_by * n_bx)
    counts = np.bincount(block_id.ravel(), minlength=n_by * n_bx)
    counts = np.maximum(counts, 1)
    truth = (sums >= 0.5 * counts).reshape(n_by, n_bx)  # majority, ties -> interesting

    anchor_y = np.clip(y_lo0 + (np.arange(n_by) + by_min) * fac, 0, gt.height - 1)
    anchor_x = np.clip(x_lo0 + (np.arange(n_bx) + bx_min) * fac, 0, gt.width - 1)
    flips = uniforms[anchor_y[:, None], anchor_x[None, :]] >= acc
    observed = truth ^ flips

    values = observed[(by - by_min)[:, None], (bx - bx_min)[None, :]].astype(np.uint8)
    return Measurement(np.asarray(position, dtype=float), rect, values, acc, agent_id, step)


def fuse_measurement(grid: OccupancyGrid, m: Measurement) -> OccupancyGrid:
    """Bayesian log-odds update of the grid with one measurement, in place."""
    bounds = CellRect(0, grid.width - 1, 0, grid.height - 1)
    if not bounds.contains(m.rect):
        raise InvalidMeasurementError("measurement footprint outside the grid")
    # Accuracy 1.0 would give infinite log-odds; cap so arithmetic stays finite.
    acc = min(m.accuracy, 1.0 - 1e-9)
    delta = math.log(acc / (1.0 - acc))
    patch = np.where(m.values == 1, delta, -delta)
    grid.log_odds[m.rect.slices] += patch
    return grid


def weighted_cell_entropy(p, w: ImportanceWeights):
    """Class-importance-weighted binary entropy, in bits.

    The weight applied to each class term depends on which side of 0.5 the
    posterior lies (w1 backs the interesting class when it is the likely
    one); both terms share the weight 0.5 exactly at p = 0.5, and
    0 log 0 := 0.
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError("cell probability outside [0, 1]")
    w_pos = np.where(arr > 0.5, w.w1, np.where(arr < 0.5, w.w2, 0.5))
    w_neg = np.where(arr > 0.5, w.w2, np.where(arr < 0.5, w.w1, 0.5))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pos = np.where(arr > 0.0, arr * np.log2(np.where(arr > 0.0, arr, 1.0)), 0.0)
        q = 1.0 - arr
        t_neg = np.where(q > 0.0, q * np.log2(np.where(q > 0.0, q, 1.0)), 0.0)
    out = -(w_pos * t_pos + w_neg * t_neg)
    if np.ndim(p) == 0:
        return float(out)
    return out


def map_entropy(
    grid: OccupancyGrid,
    w: ImportanceWeights,
    mask: Optional[np.ndarray] = None,
    *,
    probs: Optional[np.ndarray] = None,
) -> float:
    """Summed weighted cell entropy over the grid (or a boolean cell subset).

    ``probs`` may carry a precomputed ``grid.probs()`` to share across
    metric computations within one step.
    """
    if mask is None:
        p = grid.probs() if probs is None else probs
        return float(weighted_cell_entropy(p, w).sum())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.log_odds.shape:
        raise DomainError("entropy mask shape does not match the grid")
    p = (grid.probs() if probs is None else probs)[mask]
    return float(weighted_cell_entropy(p, w).sum())


# ---------------------------------------------------------------------------
# Serialization: row-major text grids and 8-bit PGM snapshots
# ---------------------------------------------------------------------------


def write_text_grid(path, values: np.ndarray, resolution: float) -> None:
    """Write the documented text format: header ``W H r_M`` then W*H scalars."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{w} {h} {resolution:.12g}\n")
        for row in values:
            fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")


def read_text_grid(path) -> tuple[np.ndarray, float]:
    """Parse the text-grid format, reporting the offending line on errors."""
    path = Path(path)
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: line 1: empty file")
    head = lines[0].split()
    if len(head) != 3:
        raise DataError(f"{path}: line 1: expected header 'W H r_M'")
    try:
        w, h, res = int(head[0]), int(head[1]), float(head[2])
    except ValueError as exc:
        raise DataError(f"{path}: line 1: bad header value ({exc})") from exc
    if w < 1 or h < 1 or res <= 0:
        raise DataError(f"{path}: line 1: non-positive dimensions or resolution")
    flat: list[float] = []
    for ln_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError as exc:
            raise DataError(f"{path}: line {ln_no}: unparseable value ({exc})") from exc
        if any(not math.isfinite(v) for v in row):
            raise DataError(f"{path}: line {ln_no}: non-finite value")
        flat.extend(row)
    if len(flat) != w * h:
        raise DataError(f"{path}: line {len(lines)}: expected {w * h} values, got {len(flat)}")
    return np.asarray(flat, dtype=np.float64).reshape(h, w), res


def save_grid(path, grid: OccupancyGrid) -> None:
    write_text_grid(path, grid.probs(), grid.resolution)


def load_grid(path) -> OccupancyGrid:
    probs, res = read_text_grid(path)
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise DataError(f"{path}: probabilities outside [0, 1]")
    p = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return OccupancyGrid(np.log(p / (1.0 - p)), res)


def save_grid_pgm(path, grid: OccupancyGrid) -> None:
    """8-bit binary PGM of probability * 255, rounded."""
    pix = np.rint(grid.probs() * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
