"""Per-voxel material decomposition into simplex-constrained fractions.

Every voxel spectrum s is explained as a convex mixture of library columns:
minimize ||A f - s||_2 subject to f >= 0 and sum(f) = 1. All voxels share
the same library matrix, so an accelerated projected-gradient solve runs
vectorized across the whole volume.
"""

import dataclasses

import numpy as np

from .errors import ConfigurationError, InvariantViolation
from .phantom import LabelVolume
from .projector import SpectralVolume
from .spectra import EnergyGrid, MaterialSpectrum

SOLVER_TOL = 1e-8
SOLVER_MAX_ITER = 500
BACKGROUND_ID = 0
SIMPLEX_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class MaterialLibrary:
    """Attenuation matrix A (channel x material) with material bookkeeping."""

    material_ids: tuple
    names: tuple
    columns: np.ndarray
    grid: EnergyGrid

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        object.__setattr__(self, "columns", cols)
        if cols.shape != (self.grid.n_bins, len(self.material_ids)):
            raise ConfigurationError(
                f"library columns {cols.shape} vs grid bins {self.grid.n_bins} "
                f"and {len(self.material_ids)} materials"
            )
        if len(set(self.material_ids)) != len(self.material_ids):
            raise ConfigurationError(f"duplicate material ids: {self.material_ids}")


def build_library(materials: dict, grid: EnergyGrid, include_background=True) -> MaterialLibrary:
    """Assemble the library from {material_id: MaterialSpectrum}, id-sorted.

    The background gets an explicit zero-attenuation column (id 0) so empty
    voxels have a feasible exact fit.
    """
    ids, names, cols = [], [], []
    if include_background:
        if BACKGROUND_ID in materials:
            raise ConfigurationError(f"material id {BACKGROUND_ID} is reserved for background")
        ids.append(BACKGROUND_ID)
        names.append("background")
        cols.append(np.zeros(grid.n_bins))
    for mid in sorted(materials):
        spec = materials[mid]
        if spec.grid != grid:
            raise ConfigurationError(f"material {spec.name!r} not on the target grid")
        ids.append(int(mid))
        names.append(spec.name)
        cols.append(spec.mu)
    return MaterialLibrary(
        material_ids=tuple(ids), names=tuple(names), columns=np.stack(cols, axis=1), grid=grid
    )


@dataclasses.dataclass
class FractionMap:
    """Volume fractions per material, axes (material, z, y, x)."""

    fractions: np.ndarray
    material_ids: tuple
    unconverged: np.ndarray  # bool (z, y, x)

    def __post_init__(self):
        f = np.asarray(self.fractions)
        if f.ndim != 4 or f.shape[0] != len(self.material_ids):
            raise ConfigurationError(
                f"fractions shape {f.shape} vs {len(self.material_ids)} materials"
            )
        if f.size and f.min() < -SIMPLEX_TOL:
            raise InvariantViolation(f"negative fraction {f.min():.3g}")
        if f.size:
            total = f.sum(axis=0)
            worst = float(np.abs(total - 1.0).max())
            if worst > SIMPLEX_TOL:
                raise InvariantViolation(f"fractions sum off by {worst:.3g}")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each column of v (M, N) onto the unit simplex."""
    u = np.sort(v, axis=0)[::-1]
    css = np.cumsum(u, axis=0) - 1.0
    ranks = np.arange(1, v.shape[0] + 1)[:, None]
    cond = u - css / ranks > 0
    rho = v.shape[0] - 1 - np.argmax(cond[::-1], axis=0)
    theta = np.take_along_axis(css, rho[None, :], axis=0)[0] / (rho + 1.0)
    return np.maximum(v - theta[None, :], 0.0)


def decompose(volume: SpectralVolume, library: MaterialLibrary) -> FractionMap:
    """Solve the simplex-constrained least squares for every voxel.

    Accelerated projected gradient (FISTA) on the shared library matrix;
    stops when no voxel moves more than SOLVER_TOL per step. Voxels still
    moving after SOLVER_MAX_ITER keep their last (feasible) iterate and are
    flagged.
    """
    if volume.grid != library.grid:
        raise ConfigurationError("volume and library are on different energy grids")
    a = library.columns
    n_ch, n_mat = a.shape
    if n_ch < 2:
        raise ConfigurationError("decomposition needs at least 2 channels")
    spatial = volume.data.shape[1:]
    s = volume.data.reshape(n_ch, -1).astype(np.float64)
    ata = a.T @ a
    ats = a.T @ s
    lip = float(np.linalg.eigvalsh(ata).max())
    step = 1.0 / lip if lip > 0 else 1.0

    f = np.full((n_mat, s.shape[1]), 1.0 / n_mat)
    y = f.copy()
    t = 1.0
    residual_per_voxel = np.full(s.shape[1], np.inf)
    for _ in range(SOLVER_MAX_ITER):
        f_new = project_simplex(y - step * (ata @ y - ats))
        # momentum restart when the update opposes the descent direction,
        # otherwise acceleration can stall on a simplex face
        if np.sum((y - f_new) * (f_new - f)) > 0.0:
            t = 1.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = f_new + ((t - 1.0) / t_new) * (f_new - f)
        f, t = f_new, t_new
        # optimality gap: movement of one full projected-gradient step
        fixed_point = project_simplex(f - step * (ata @ f - ats))
        residual_per_voxel = np.abs(fixed_point - f).max(axis=0)
        if residual_per_voxel.max() <= SOLVER_TOL:
            break
    unconverged = (residual_per_voxel > SOLVER_TOL).reshape(spatial)
    fractions = f.reshape((n_mat,) + spatial)
    return FractionMap(
        fractions=fractions, material_ids=library.material_ids, unconverged=unconverged
    )


def classify(fraction_map: FractionMap, voxel_size_mm=1.0) -> LabelVolume:
    """Argmax material per voxel; ties go to the lowest material id."""
    order = np.argsort(fraction_map.material_ids)
    ordered = fraction_map.fractions[order]
    winner = np.argmax(ordered, axis=0)  # first max -> lowest id wins ties
    ids = np.asarray(fraction_map.material_ids)[order]
    return LabelVolume(labels=ids[winner].astype(np.uint16), voxel_size_mm=voxel_size_mm)


def residual(volume: SpectralVolume, library: MaterialLibrary, fm: FractionMap) -> np.ndarray:
    """Per-voxel L2 misfit ||A f - s||, shaped like the volume's space."""
    a = library.columns
    s = volume.data.reshape(a.shape[0], -1).astype(np.float64)
    f = fm.fractions.reshape(a.shape[1], -1)
    return np.linalg.norm(a @ f - s, axis=0).reshape(volume.data.shape[1:])
