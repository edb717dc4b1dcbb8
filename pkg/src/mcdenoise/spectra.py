"""Energy grids, material attenuation spectra with k-edges, source spectra.

Attenuation is handled as linear attenuation in 1/mm (unit density), so
tabulated mass attenuation coefficients are used as-is. Synthetic k-edge
materials follow a photoelectric power law with a multiplicative jump at
the edge.
"""

import dataclasses

import numpy as np

from .errors import ConfigurationError, ParseError


@dataclasses.dataclass(frozen=True)
class EnergyGrid:
    """Uniform grid of energy-bin centers: E_j = start + j * step."""

    start_keV: float
    step_keV: float
    n_bins: int

    def __post_init__(self):
        if self.step_keV <= 0:
            raise ConfigurationError(f"step_keV must be > 0, got {self.step_keV}")
        if self.n_bins < 2:
            raise ConfigurationError(f"n_bins must be >= 2, got {self.n_bins}")

    @property
    def centers(self) -> np.ndarray:
        return self.start_keV + self.step_keV * np.arange(self.n_bins)

    @property
    def end_keV(self) -> float:
        return self.start_keV + self.step_keV * (self.n_bins - 1)

    def locate_bin(self, energy_keV: float) -> int:
        """Index of the bin whose center is nearest to ``energy_keV``."""
        j = int(round((energy_keV - self.start_keV) / self.step_keV))
        if j < 0 or j >= self.n_bins:
            raise ConfigurationError(
                f"{energy_keV} keV outside grid [{self.start_keV}, {self.end_keV}]"
            )
        return j

    def subgrid(self, start_index: int, n_bins: int) -> "EnergyGrid":
        if start_index < 0 or start_index + n_bins > self.n_bins:
            raise ConfigurationError(
                f"subgrid [{start_index}, {start_index + n_bins}) exceeds {self.n_bins} bins"
            )
        return EnergyGrid(
            start_keV=self.start_keV + start_index * self.step_keV,
            step_keV=self.step_keV,
            n_bins=n_bins,
        )

    def to_meta(self) -> dict:
        return {
            "start_keV": self.start_keV,
            "step_keV": self.step_keV,
            "n_bins": self.n_bins,
        }

    @staticmethod
    def from_meta(meta: dict) -> "EnergyGrid":
        return EnergyGrid(
            start_keV=float(meta["start_keV"]),
            step_keV=float(meta["step_keV"]),
            n_bins=int(meta["n_bins"]),
        )


@dataclasses.dataclass
class MaterialSpectrum:
    """Per-bin linear attenuation (1/mm) of one material."""

    name: str
    mu: np.ndarray
    grid: EnergyGrid
    kedge_keV: float | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.shape != (self.grid.n_bins,):
            raise ConfigurationError(
                f"material {self.name!r}: mu has shape {self.mu.shape}, "
                f"grid has {self.grid.n_bins} bins"
            )
        if np.any(self.mu < 0):
            raise ConfigurationError(f"material {self.name!r}: negative attenuation")

    def restrict(self, grid: EnergyGrid) -> "MaterialSpectrum":
        """Slice this spectrum onto a subgrid of its own grid."""
        j0 = self.grid.locate_bin(grid.start_keV)
        if abs(self.grid.centers[j0] - grid.start_keV) > 1e-9 or not np.isclose(
            grid.step_keV, self.grid.step_keV
        ):
            raise ConfigurationError(
                f"grid mismatch: {grid} is not aligned with {self.grid}"
            )
        if j0 + grid.n_bins > self.grid.n_bins:
            raise ConfigurationError(f"{grid} extends past {self.grid}")
        kedge = self.kedge_keV
        if kedge is not None and not (grid.start_keV < kedge <= grid.end_keV):
            kedge = None
        return MaterialSpectrum(self.name, self.mu[j0 : j0 + grid.n_bins], grid, kedge)


@dataclasses.dataclass
class SourceSpectrum:
    """Per-bin expected photon fluence (photons / mm^2)."""

    photons_per_mm2: np.ndarray
    grid: EnergyGrid

    def __post_init__(self):
        self.photons_per_mm2 = np.asarray(self.photons_per_mm2, dtype=np.float64)
        if self.photons_per_mm2.shape != (self.grid.n_bins,):
            raise ConfigurationError("source fluence length does not match grid")
        if np.any(self.photons_per_mm2 < 0) or not np.any(self.photons_per_mm2 > 0):
            raise ConfigurationError("source fluence must be >= 0 with at least one positive bin")

    def restrict(self, grid: EnergyGrid) -> "SourceSpectrum":
        j0 = self.grid.locate_bin(grid.start_keV)
        return SourceSpectrum(self.photons_per_mm2[j0 : j0 + grid.n_bins], grid)


def load_mac_table(path) -> tuple[list[MaterialSpectrum], EnergyGrid]:
    """Load a CSV of attenuation spectra.

    Header must be ``energy_keV,<name1>,<name2>,...``; the energy column must
    be strictly increasing and uniformly spaced.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if header[0] != "energy_keV" or len(header) < 2:
        raise ParseError(f"{path}: header must be 'energy_keV,<name1>,...', got {lines[0]!r}")
    names = header[1:]
    energies = []
    columns = [[] for _ in names]
    for row_no, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ParseError(
                f"{path}:{row_no}: expected {len(header)} cells, got {len(cells)}"
            )
        try:
            values = [float(c) for c in cells]
        except ValueError as exc:
            raise ParseError(f"{path}:{row_no}: non-numeric cell ({exc})") from exc
        if energies and values[0] <= energies[-1]:
            raise ParseError(
                f"{path}:{row_no}: energy {values[0]} not strictly increasing"
            )
        for col, v in enumerate(values[1:]):
            if v < 0:
                raise ParseError(
                    f"{path}:{row_no}: negative attenuation {v} in column {names[col]!r}"
                )
            columns[col].append(v)
        energies.append(values[0])
    if len(energies) < 2:
        raise ParseError(f"{path}: need at least 2 energy rows")
    steps = np.diff(energies)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise ParseError(f"{path}: energy column is not uniformly spaced")
    grid = EnergyGrid(start_keV=energies[0], step_keV=float(steps[0]), n_bins=len(energies))
    materials = [
        MaterialSpectrum(name=name, mu=np.array(col), grid=grid)
        for name, col in zip(names, columns)
    ]
    return materials, grid


def write_mac_table(materials: list[MaterialSpectrum], path) -> None:
    """Inverse of :func:`load_mac_table` (round-trip exact via repr floats)."""
    grid = materials[0].grid
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("energy_keV," + ",".join(m.name for m in materials) + "\n")
        for j, energy in enumerate(grid.centers):
            row = [repr(float(energy))] + [repr(float(m.mu[j])) for m in materials]
            fh.write(",".join(row) + "\n")


def synth_kedge_material(
    grid: EnergyGrid, name: str, a: float, p: float, kedge_keV: float, jump: float
) -> MaterialSpectrum:
    """Parametric k-edge material: mu(E) = a*(E/E0)^-p, times ``jump`` at
    and above the edge (E0 = grid start)."""
    if a <= 0 or p <= 0:
        raise ConfigurationError(f"a and p must be > 0, got a={a}, p={p}")
    if jump <= 1:
        raise ConfigurationError(f"jump must be > 1, got {jump}")
    if not (grid.start_keV < kedge_keV <= grid.end_keV):
        raise ConfigurationError(
            f"k-edge {kedge_keV} keV outside grid ({grid.start_keV}, {grid.end_keV}]"
        )
    centers = grid.centers
    mu = a * (centers / grid.start_keV) ** (-p)
    mu[centers >= kedge_keV] *= jump
    return MaterialSpectrum(name=name, mu=mu, grid=grid, kedge_keV=kedge_keV)


def synth_source(
    grid: EnergyGrid, peak_keV: float, width_keV: float, peak_fluence: float
) -> SourceSpectrum:
    """Bell-shaped (Gaussian) source, rescaled so the max bin equals
    ``peak_fluence`` exactly."""
    if peak_fluence <= 0:
        raise ConfigurationError(f"peak_fluence must be > 0, got {peak_fluence}")
    if width_keV <= 0:
        raise ConfigurationError(f"width_keV must be > 0, got {width_keV}")
    centers = grid.centers
    shape = np.exp(-0.5 * ((centers - peak_keV) / width_keV) ** 2)
    fluence = shape * (peak_fluence / shape.max())
    return SourceSpectrum(photons_per_mm2=fluence, grid=grid)
