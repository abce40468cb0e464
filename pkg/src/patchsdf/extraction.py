"""Mesh extraction from a learned SDF.

Only grid samples within epsilon of some input point are evaluated. The
remaining (blank) samples get a sign by iterated 3x3x3 voting from their
neighbors, and Marching Cubes runs on the resulting truncated field.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh
from .mcubes import marching_cubes as _mc
from .model import ModelParams, predict_sdf
from .sampling import CloudIndex


class PropagationError(RuntimeError):
    """Sign propagation hit its iteration cap; ``grid`` holds the partial state."""

    def __init__(self, message, grid, stats):
        self.grid = grid
        self.stats = stats
        super().__init__(message)


@dataclass
class SdfGrid:
    """Samples at ``origin + spacing * (i, j, k)``; NaN marks a blank sample."""

    values: np.ndarray
    spacing: float
    origin: np.ndarray
    epsilon: float
    known: np.ndarray | None = None  # samples evaluated (not propagated)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.known is None:
            self.known = ~np.isnan(self.values)

    @classmethod
    def cube(cls, resolution, bound=0.7, epsilon_cells=3.0):
        """Blank ``resolution``^3 grid spanning [-bound, bound]^3."""
        if resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        spacing = 2.0 * bound / (resolution - 1)
        return cls(np.full((resolution,) * 3, np.nan), spacing, np.full(3, -bound), epsilon_cells * spacing)

    @property
    def resolution(self):
        return self.values.shape

    @property
    def blank(self):
        return np.isnan(self.values)

    def positions(self, flat=None):
        """World positions of the samples with the given flat indices (all by default)."""
        if flat is None:
            flat = np.arange(self.values.size)
        ijk = np.stack(np.unravel_index(flat, self.values.shape), axis=-1)
        return self.origin + self.spacing * ijk

    def meshing_values(self):
        """Evaluated samples as-is, propagated ones as sign * epsilon."""
        if np.any(self.blank):
            raise ValueError("grid still has blank samples")
        return np.where(self.known, self.values, np.sign(self.values) * self.epsilon)


@dataclass
class ExtractionStats:
    evaluated_fraction: float = 1.0
    active_cells: int = 0
    total_cells: int = 0
    propagation_iterations: int = 0
    relaxed_cells: int = 0  # blanks resolved after the confidence-threshold phase stalled
    wall_time: float = 0.0

    def to_text(self):
        return "".join(f"{k}={v!r}\n" for k, v in self.__dict__.items())


def select_active_cells(index, grid: SdfGrid, epsilon=None):
    """Flat indices (ascending) of samples within epsilon of their nearest input point."""
    index = index if isinstance(index, CloudIndex) else CloudIndex(index)
    eps = grid.epsilon if epsilon is None else epsilon
    shape = np.array(grid.values.shape)
    r = int(np.ceil(eps / grid.spacing))
    n_pts = len(index.points)
    if (2 * r + 1) ** 3 * n_pts > 4 * grid.values.size:
        cand = np.arange(grid.values.size)
    else:
        # candidate samples: a cube of radius r cells around every point
        mark = np.zeros(grid.values.size, dtype=bool)
        off = np.stack(np.meshgrid(*[np.arange(-r, r + 1)] * 3, indexing="ij"), -1).reshape(-1, 3)
        base = np.rint((index.points - grid.origin) / grid.spacing).astype(np.int64)
        step = max(1, 2_000_000 // len(off))
        for s in range(0, n_pts, step):
            ijk = (base[s:s + step, None, :] + off[None]).reshape(-1, 3)
            ok = np.all((ijk >= 0) & (ijk < shape), axis=1)
            mark[np.ravel_multi_index(ijk[ok].T, grid.values.shape)] = True
        cand = np.nonzero(mark)[0]
    d, _ = index.tree.query(grid.positions(cand), distance_upper_bound=eps * (1 + 1e-12) + 1e-300)
    # the tree's bound is strict; recheck exactly
    active = cand[np.isfinite(d) & (d <= eps)]
    if len(active) == 0:
        raise ValueError("no grid sample lies within epsilon of the point cloud (cloud outside the grid?)")
    return active


# net vote a blank must exceed in the fallback pass: a convex corner of a
# known front has 4 same-sign neighbors, a lone stray sample gives 1
FRONT_THRESHOLD = 3


def _box_sum(v):
    """Sum over the 3x3x3 neighborhood with zero padding, center included."""
    out = v.astype(np.int16)
    for axis in range(3):
        p = np.pad(out, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        n = out.shape[axis]
        sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(3))
        out = p[sl(0, n)] + p[sl(1, n + 1)] + p[sl(2, n + 2)]
    return out


def sign_votes(values):
    """Per-sample vote: sign of evaluated samples, 0 for blanks (NaN)."""
    return np.where(np.isnan(values), 0, np.sign(np.nan_to_num(values))).astype(np.int8)


def propagation_pass(vote, blank, threshold):
    """One Jacobi pass: the blank samples whose |3x3x3 vote sum| exceeds ``threshold``.

    Returns ``(update mask, new signs)``; the inputs are not modified.
    """
    resp = _box_sum(vote)
    upd = blank & (np.abs(resp) > threshold)
    return upd, np.sign(resp).astype(np.int8)


def propagate_signs(grid: SdfGrid, threshold=13, max_iterations=1000):
    """Fill blank samples with +-1 by iterated neighbor voting.

    Each pass sums, for every blank sample, the signs of its non-blank
    neighbors in the 3x3x3 box and assigns that sign where the absolute sum
    exceeds ``threshold``; passes read only the previous pass's state.

    A blank next to a flat known front sees only 9 votes, so passes at the
    confidence threshold alone stall. When a pass updates nothing, the next
    pass uses FRONT_THRESHOLD, which a flat face, edge or corner of a
    front still exceeds; if that stalls too, only the blanks with the
    largest absolute sum are assigned. Then the confidence threshold applies
    again. A stray wrong sign in the evaluated band adds a single vote, so
    it cannot seed a growing region of its own.
    Blanks that never receive a vote become +1. Evaluated samples are never
    modified.
    """
    vals = grid.values.copy()
    vote = sign_votes(vals)
    blank = np.isnan(vals)
    iters = relaxed = 0
    while np.any(blank):
        if iters >= max_iterations:
            out = SdfGrid(vals, grid.spacing, grid.origin, grid.epsilon, grid.known.copy())
            stats = ExtractionStats(propagation_iterations=iters, relaxed_cells=relaxed)
            raise PropagationError(f"sign propagation did not converge in {max_iterations} passes", out, stats)
        resp = _box_sum(vote)
        conf = np.abs(resp)
        upd = blank & (conf > threshold)
        if not np.any(upd):
            upd = blank & (conf > FRONT_THRESHOLD)
            relaxed += int(upd.sum())
        if not np.any(upd):
            top = conf[blank].max()
            if top == 0:
                break
            upd = blank & (conf == top)
            relaxed += int(upd.sum())
        sgn = np.sign(resp).astype(np.int8)
        iters += 1
        vote[upd] = sgn[upd]
        vals[upd] = vote[upd]
        blank &= ~upd
    if np.any(blank):
        relaxed += int(blank.sum())
        vals[blank] = 1.0
    stats = ExtractionStats(propagation_iterations=iters, relaxed_cells=relaxed)
    return SdfGrid(vals, grid.spacing, grid.origin, grid.epsilon, grid.known.copy()), stats


def marching_cubes(grid: SdfGrid, iso=0.0) -> TriangleMesh:
    """Zero level set of a fully assigned grid, outward oriented (positive = outside)."""
    values = grid.meshing_values()
    v, t = _mc(values, spacing=grid.spacing, origin=grid.origin, iso=iso)
    if len(t) == 0:
        warnings.warn("grid has no zero crossing; returning an empty mesh", RuntimeWarning, stacklevel=2)
    return TriangleMesh(v, t)


def reconstruct(index, params: ModelParams, resolution=128, bound=0.7, epsilon_cells=3.0,
                confidence=13, dense=False, seed=0, max_iterations=1000, batch_size=512):
    """Cloud -> mesh: evaluate the band (or every sample), propagate signs, mesh.

    Each sample's patch sampling is keyed by its flat grid index, so the
    sparse and dense paths produce equal values on shared samples.
    """
    t0 = time.perf_counter()
    index = index if isinstance(index, CloudIndex) else CloudIndex(index)
    grid = SdfGrid.cube(resolution, bound, epsilon_cells)
    cells = np.arange(grid.values.size) if dense else select_active_cells(index, grid)
    sdf = predict_sdf(index, grid.positions(cells), params, seed=seed, keys=cells, batch_size=batch_size)
    flat = grid.values.reshape(-1)
    flat[cells] = np.clip(sdf, -grid.epsilon, grid.epsilon)
    grid.known = ~np.isnan(grid.values)
    iters = relaxed = 0
    if not dense:
        grid, pstats = propagate_signs(grid, confidence, max_iterations)
        iters, relaxed = pstats.propagation_iterations, pstats.relaxed_cells
    mesh = marching_cubes(grid)
    stats = ExtractionStats(
        evaluated_fraction=len(cells) / grid.values.size, active_cells=len(cells),
        total_cells=grid.values.size, propagation_iterations=iters, relaxed_cells=relaxed,
        wall_time=time.perf_counter() - t0,
    )
    return mesh, stats
