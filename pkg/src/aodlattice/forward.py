"""Forward radiance model: component library and tau -> radiance lookup table.

The retrieval treats the radiative transfer solution as a black box that
maps (tau, theta) to a C-vector of top-of-atmosphere radiances.  Here that
black box is a per-component lookup table: piecewise-linear interpolation
in tau through each component's knot values, mixed linearly over
components with the simplex weights theta.  Any object exposing the same
eval / eval_batch surface (for instance a reader over a precomputed
radiative-transfer dataset) can replace the synthetic table without
touching the solvers.

The synthetic table is deterministic in its seed and built so that

  - radiance is strictly increasing in tau for every component and channel,
  - the tau = 0 row is a pure surface signal, identical across components,
  - absorbing components (low single-scattering albedo) produce
    systematically lower radiance than non-absorbing ones at equal tau,

which gives the retrieval problem the absorbing-vs-AOD trade-off that the
prior-comparison experiments probe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from importlib import resources

import numpy as np

from .model import ConfigurationError


class DomainError(ValueError):
    """tau outside the table's knot range; solvers must clamp first."""


@dataclass(frozen=True)
class AerosolComponent:
    """One aerosol component: particle-size parameters and albedo.

    r_min, r_max, r_c are radii in micrometers; width is the size
    distribution width; ssa_558 the single-scattering albedo at 558 nm.
    """

    id: int
    category: str
    r_min: float
    r_max: float
    r_c: float
    width: float
    ssa_558: float

    def validate(self) -> None:
        if not (0 < self.r_min < self.r_c < self.r_max):
            raise ConfigurationError(
                f"component {self.id}: need 0 < r_min < r_c < r_max"
            )
        if not (0 < self.ssa_558 <= 1):
            raise ConfigurationError(f"component {self.id}: ssa_558 must be in (0, 1]")


@dataclass(frozen=True)
class ComponentLibrary:
    components: tuple

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def ids(self) -> list:
        return [c.id for c in self.components]

    def validate(self) -> None:
        if self.n_components < 2:
            raise ConfigurationError("library needs at least 2 components")
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ConfigurationError("component ids must be unique")
        for c in self.components:
            c.validate()

    def to_records(self) -> list:
        return [asdict(c) for c in self.components]

    @classmethod
    def from_records(cls, records) -> "ComponentLibrary":
        lib = cls(components=tuple(AerosolComponent(**r) for r in records))
        lib.validate()
        return lib


def default_library() -> ComponentLibrary:
    """The 8 standard aerosol components shipped with the package."""
    text = resources.files("aodlattice.data").joinpath("misr_v22_components.json").read_text()
    return ComponentLibrary.from_records(json.loads(text))


def load_library(path) -> ComponentLibrary:
    with open(path) as fh:
        return ComponentLibrary.from_records(json.load(fh))


def save_library(library: ComponentLibrary, path) -> None:
    with open(path, "w") as fh:
        json.dump(library.to_records(), fh, indent=1)
        fh.write("\n")


class RadianceTable:
    """Per-component tau -> radiance lookup with linear mixing over theta.

    tau_knots: strictly ascending AOD grid (length K).
    values: M x K x C radiances, one curve per component and channel.
    meta: provenance (seed, builder parameters) carried for export.
    """

    def __init__(self, tau_knots: np.ndarray, values: np.ndarray, meta: dict | None = None):
        self.tau_knots = np.asarray(tau_knots, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.meta = dict(meta or {})
        if self.tau_knots.ndim != 1 or self.tau_knots.size < 2:
            raise ConfigurationError("need at least 2 tau knots")
        if np.any(np.diff(self.tau_knots) <= 0):
            raise ConfigurationError("tau_knots must be strictly ascending")
        if self.values.ndim != 3 or self.values.shape[1] != self.tau_knots.size:
            raise ConfigurationError("values must be M x K x C with K = len(tau_knots)")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ConfigurationError("table values must be finite and >= 0")

    @property
    def n_components(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def tau_min(self) -> float:
        return float(self.tau_knots[0])

    @property
    def tau_max(self) -> float:
        return float(self.tau_knots[-1])

    def _segment(self, tau):
        knots = self.tau_knots
        idx = np.clip(np.searchsorted(knots, tau, side="right") - 1, 0, knots.size - 2)
        w = (tau - knots[idx]) / (knots[idx + 1] - knots[idx])
        return idx, w

    def eval(self, tau: float, theta: np.ndarray) -> np.ndarray:
        """Radiance C-vector for one region: linear mix of interpolated curves."""
        if tau < self.tau_min or tau > self.tau_max:
            raise DomainError(
                f"tau={tau} outside table range [{self.tau_min}, {self.tau_max}]"
            )
        knots = self.tau_knots
        idx = int(np.searchsorted(knots, tau, side="right")) - 1
        if idx < 0:
            idx = 0
        elif idx > knots.size - 2:
            idx = knots.size - 2
        w = (tau - knots[idx]) / (knots[idx + 1] - knots[idx])
        v = self.values[:, idx, :] * (1.0 - w) + self.values[:, idx + 1, :] * w
        return np.asarray(theta, dtype=float) @ v

    def eval_batch(self, tau: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Radiance for P regions at once: tau (P,), theta (P, M) -> (P, C).

        Per-region results are bitwise identical to eval(), so rendering a
        scene and re-evaluating the same state gives exactly zero misfit.
        """
        tau = np.asarray(tau, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if np.any(tau < self.tau_min) or np.any(tau > self.tau_max):
            raise DomainError("tau values outside table range")
        knots = self.tau_knots
        idx = np.clip(np.searchsorted(knots, tau, side="right") - 1, 0, knots.size - 2)
        w = (tau - knots[idx]) / (knots[idx + 1] - knots[idx])
        out = np.empty((tau.size, self.n_channels))
        for p in range(tau.size):
            i = idx[p]
            v = self.values[:, i, :] * (1.0 - w[p]) + self.values[:, i + 1, :] * w[p]
            out[p] = theta[p] @ v
        return out

    def eval_grid(self, tau_levels: np.ndarray, mixtures: np.ndarray) -> np.ndarray:
        """Radiance over a (tau level x mixture) grid: -> (T, G, C)."""
        tau_levels = np.asarray(tau_levels, dtype=float)
        if np.any(tau_levels < self.tau_min) or np.any(tau_levels > self.tau_max):
            raise DomainError("tau levels outside table range")
        idx, w = self._segment(tau_levels)
        v = (
            self.values[:, idx, :] * (1.0 - w)[None, :, None]
            + self.values[:, idx + 1, :] * w[None, :, None]
        )
        return np.einsum("gm,mtc->tgc", np.asarray(mixtures, dtype=float), v)


def eval_radiance(table: RadianceTable, tau: float, theta: np.ndarray) -> np.ndarray:
    return table.eval(tau, theta)


# Band wavelengths (nm) and camera view angles (degrees from nadir) used to
# lay out the synthetic channel structure.
_BAND_WAVELENGTHS = np.array([446.0, 558.0, 672.0, 866.0])
_VIEW_ANGLES = np.array([-70.5, -60.0, -45.6, -26.1, 0.0, 26.1, 45.6, 60.0, 70.5])


def _channel_layout(channels: int):
    """Assign each channel a (wavelength, view angle) pair, band-major."""
    if channels == _BAND_WAVELENGTHS.size * _VIEW_ANGLES.size:
        wl = np.repeat(_BAND_WAVELENGTHS, _VIEW_ANGLES.size)
        ang = np.tile(_VIEW_ANGLES, _BAND_WAVELENGTHS.size)
        return wl, ang
    c = np.arange(channels)
    band = (4 * c) // max(channels, 1)
    band = np.clip(band, 0, 3)
    wl = _BAND_WAVELENGTHS[band]
    # spread each band's channels smoothly across the angle range
    pos = np.zeros(channels)
    for b in range(4):
        sel = band == b
        n = int(sel.sum())
        if n == 1:
            pos[sel] = 0.0
        elif n > 1:
            pos[sel] = np.linspace(-70.5, 70.5, n)
    return wl, pos


def _component_stream(seed: int, comp: AerosolComponent) -> np.random.Generator:
    # Jitter is keyed by the size/shape parameters only, never the albedo
    # or the id, so components differing solely in SSA share their jitter
    # and the SSA ordering of the curves is exact by construction.
    key = [int(round(x * 1e9)) for x in (comp.r_min, comp.r_max, comp.r_c, comp.width)]
    return np.random.default_rng([seed, 17, *key])


def build_synthetic_table(
    library: ComponentLibrary,
    channels: int = 36,
    knots: int = 25,
    tau_max: float = 6.0,
    seed: int = 0,
) -> RadianceTable:
    """Build the deterministic synthetic lookup table for a library.

    Per component m and channel c the curve is

        L(tau) = L_surf(c) + A_mc * (1 - exp(-g_mc * tau))

    with amplitude A and curvature g both scaled by the component's albedo
    (so lower SSA means lower radiance everywhere at tau > 0) and with an
    Angstrom-like wavelength slope driven by the characteristic radius
    (small particles brighten the short-wavelength channels more).  A small
    seeded jitter, shared between SSA-twins, decorrelates the curves.
    """
    if knots < 2:
        raise ConfigurationError("need at least 2 knots")
    if channels < 1:
        raise ConfigurationError("need at least 1 channel")
    library.validate()
    rng = np.random.default_rng([seed, 3])
    M = library.n_components
    wl, ang = _channel_layout(channels)
    slant = 1.0 / np.cos(np.radians(ang))  # 1 at nadir, ~3 at 70.5 deg

    # Surface signal: band-dependent base reflectance with smooth angular
    # droop and a small per-channel jitter; identical for every component.
    band_surf = {446.0: 0.10, 558.0: 0.09, 672.0: 0.10, 866.0: 0.13}
    surf = np.array([band_surf[w] for w in wl])
    surf = surf * (1.0 + 0.05 * (slant - 1.0)) * (1.0 + 0.03 * rng.standard_normal(channels))
    surf = np.maximum(surf, 0.01)

    tau_knots = np.linspace(0.0, float(tau_max), int(knots))
    values = np.empty((M, knots, channels))
    for m, comp in enumerate(library.components):
        crng = _component_stream(seed, comp)
        jitter_a = 1.0 + 0.08 * crng.standard_normal(channels)
        jitter_g = 1.0 + 0.10 * crng.standard_normal(channels)
        angstrom = 1.8 * math.exp(-comp.r_c / 0.25)
        wl_slope = (wl / 558.0) ** (-angstrom)
        amp = 0.22 * comp.ssa_558 * wl_slope * (0.85 + 0.25 * (slant - 1.0))
        amp = amp * np.clip(jitter_a, 0.5, 1.5)
        g = 0.28 * slant * (0.7 + 0.3 * comp.ssa_558) * np.clip(jitter_g, 0.5, 1.5)
        curve = 1.0 - np.exp(-np.outer(tau_knots, g))  # (K, C)
        values[m] = surf[None, :] + amp[None, :] * curve
    table = RadianceTable(
        tau_knots,
        values,
        meta={"seed": int(seed), "knots": int(knots), "channels": int(channels),
              "tau_max": float(tau_max), "component_ids": library.ids},
    )
    return table


def export_table(table: RadianceTable, json_path, csv_path) -> None:
    """Write the table as a JSON header plus a flat CSV of values.

    The CSV holds M*K rows (component-major, then knot) of C columns.
    """
    header = {
        "tau_knots": [float(x) for x in table.tau_knots],
        "n_components": table.n_components,
        "n_knots": int(table.tau_knots.size),
        "n_channels": table.n_channels,
        "meta": table.meta,
        "values_csv": str(csv_path),
    }
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    flat = table.values.reshape(-1, table.n_channels)
    with open(csv_path, "w") as fh:
        for row in flat:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def import_table(json_path, csv_path=None) -> RadianceTable:
    with open(json_path) as fh:
        header = json.load(fh)
    if csv_path is None:
        csv_path = header["values_csv"]
    flat = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    M, K, C = header["n_components"], header["n_knots"], header["n_channels"]
    values = flat.reshape(M, K, C)
    return RadianceTable(np.asarray(header["tau_knots"]), values, meta=header.get("meta"))
