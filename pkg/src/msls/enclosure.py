"""Randomized model of the perforated multi-shell enclosure.

Each sector of the hemisphere (an acoustic channel module) is treated as a
cascade of two Helmholtz band-pass stages whose resonance and damping follow
from randomly drawn hole sets and cavity volumes. Directions map to sectors
through a seeded plate partition; the resulting family of magnitude
responses is what makes a single microphone direction-aware.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .spectra import GridMismatchError, MagnitudeSpectrum, StftConfig, spectra_matrix

N_LAYERS = 3
HOLE_ATTEMPTS = 300
END_CORRECTION = 1.7


class EnclosureGenerationError(RuntimeError):
    def __init__(self, best_coherence: float, attempts: int, target: float):
        super().__init__(
            f"no draw met max coherence {target:.3f} after {attempts} attempts "
            f"(best achieved {best_coherence:.4f})"
        )
        self.best_coherence = best_coherence
        self.attempts = attempts


@dataclass(frozen=True)
class Direction:
    azimuth: float
    elevation: float
    distance: float = 2.5

    def __post_init__(self):
        if not 0.0 <= self.azimuth < 360.0:
            raise ValueError(f"azimuth {self.azimuth} outside [0, 360)")
        if not 0.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation {self.elevation} outside [0, 90]")
        if self.distance <= 0:
            raise ValueError("distance must be positive")


def speaker_layout(
    inner_radius: float = 2.5,
    outer_radius: float = 4.5,
    outer_height: float = 0.95,
    per_ring: int = 8,
) -> list[Direction]:
    """Two rings of loudspeakers around the enclosure.

    The inner ring sits on the floor; the outer ring is raised by
    ``outer_height`` and rotated by half a step so the 16 azimuths interleave.
    Direction ids are list positions: inner ring first.
    """
    step = 360.0 / per_ring
    elev = math.degrees(math.atan2(outer_height, outer_radius))
    dist = math.hypot(outer_radius, outer_height)
    inner = [Direction(i * step, 0.0, inner_radius) for i in range(per_ring)]
    outer = [Direction((i + 0.5) * step, elev, dist) for i in range(per_ring)]
    return inner + outer


@dataclass(frozen=True)
class EnclosureConfig:
    shell_radii: tuple[float, float, float] = (0.24, 0.168, 0.072)
    shell_thickness: tuple[float, float, float] = (0.01, 0.007, 0.003)
    n_transverse_plates: int = 8
    n_longitudinal_plates: int = 16
    hole_radius_range: tuple[float, float] = (0.003, 0.03)
    min_hole_gap: float = 0.005
    seed: int = 0
    speed_of_sound: float = 343.0
    max_coherence_target: float = 0.95
    q0: float = 4.0
    floor: float = 0.05
    fill_ratio_range: tuple[float, float] = (0.1, 0.6)
    volume_fraction_range: tuple[float, float] = (0.02, 1.0)
    band_split_deg: float = 35.0
    blend: bool = False
    max_retries: int = 8

    def __post_init__(self):
        for name in ("shell_radii", "shell_thickness", "hole_radius_range",
                     "fill_ratio_range", "volume_fraction_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        r, t = self.shell_radii, self.shell_thickness
        if len(r) != N_LAYERS or len(t) != N_LAYERS:
            raise ValueError("shell_radii and shell_thickness need three entries")
        if any(v <= 0 for v in r) or not (r[0] > r[1] > r[2]):
            raise ValueError("shell_radii must be positive and strictly decreasing")
        if any(v <= 0 for v in t) or any(t[i] >= r[i] - (r[i + 1] if i < 2 else 0) for i in range(3)):
            raise ValueError("shell_thickness must be positive and thinner than the gap it sits in")
        lo, hi = self.hole_radius_range
        if lo < 0.003 or hi < lo or hi > min(r):
            raise ValueError("hole_radius_range must satisfy 0.003 <= min <= max <= smallest shell radius")
        if self.n_transverse_plates < 1 or self.n_longitudinal_plates < 1:
            raise ValueError("need at least one transverse and one longitudinal plate")
        if self.min_hole_gap < 0:
            raise ValueError("min_hole_gap must be non-negative")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        if not 0 < self.max_coherence_target <= 1:
            raise ValueError("max_coherence_target must lie in (0, 1]")
        if self.q0 <= 0:
            raise ValueError("q0 must be positive")
        if not 0 < self.floor < 1:
            raise ValueError("floor must lie in (0, 1)")
        f0, f1 = self.fill_ratio_range
        if not 0 < f0 <= f1 < 1:
            raise ValueError("fill_ratio_range must lie in (0, 1)")
        v0, v1 = self.volume_fraction_range
        if not 0 < v0 <= v1 <= 1:
            raise ValueError("volume_fraction_range must lie in (0, 1]")
        if not 0 < self.band_split_deg < 90:
            raise ValueError("band_split_deg must lie in (0, 90)")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @property
    def n_sectors(self) -> int:
        return self.n_longitudinal_plates + self.n_transverse_plates


@dataclass(frozen=True)
class AcmParameters:
    sector_id: int
    cavity_volumes: tuple[float, float]
    layer_hole_area: tuple[float, float, float]
    layer_neck_length: tuple[float, float, float]
    fill_ratios: tuple[float, float, float]

    def __post_init__(self):
        for name in ("cavity_volumes", "layer_hole_area", "layer_neck_length", "fill_ratios"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.cavity_volumes) != 2 or len(self.layer_hole_area) != N_LAYERS:
            raise ValueError("expected two cavities and three perforated layers")
        if min(self.cavity_volumes) <= 0 or min(self.layer_hole_area) <= 0:
            raise ValueError("cavity volumes and hole areas must be positive")
        if min(self.layer_neck_length) <= 0 or min(self.fill_ratios) <= 0:
            raise ValueError("neck lengths and fill ratios must be positive")


@dataclass(frozen=True)
class SectorPartition:
    """Plate layout: a lower elevation band split into ``len(lower)`` azimuth
    wedges and an upper band split into ``len(upper)`` wedges.

    Boundary lists hold increasing azimuths (degrees) spanning one turn from
    their first entry; wedge ``i`` of a band runs from boundary ``i`` to
    ``i + 1`` (cyclically). Lower-band sectors are numbered first.
    """

    band_split: float
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    @property
    def n_sectors(self) -> int:
        return len(self.lower) + len(self.upper)

    def _band(self, elevation: float) -> tuple[tuple[float, ...], int]:
        if elevation < self.band_split:
            return self.lower, 0
        return self.upper, len(self.lower)

    @staticmethod
    def _wedge(bounds: Sequence[float], azimuth: float) -> tuple[int, float, float]:
        rel = (azimuth - bounds[0]) % 360.0
        offsets = np.asarray(bounds) - bounds[0]
        i = int(np.searchsorted(offsets, rel, side="right") - 1)
        lo = offsets[i]
        hi = offsets[i + 1] if i + 1 < len(offsets) else 360.0
        return i, rel - lo, hi - lo

    def locate(self, azimuth: float, elevation: float) -> int:
        bounds, base = self._band(elevation)
        return base + self._wedge(bounds, azimuth)[0]

    def neighbour(self, azimuth: float, elevation: float) -> tuple[int, float]:
        """Nearest azimuthally adjacent sector and its blend weight.

        The weight falls linearly from 0.5 on the shared plate to 0 at the
        wedge centre.
        """
        bounds, base = self._band(elevation)
        n = len(bounds)
        i, pos, width = self._wedge(bounds, azimuth)
        half = width / 2.0
        if pos < half:
            j, dist = (i - 1) % n, pos
        else:
            j, dist = (i + 1) % n, width - pos
        return base + j, 0.5 * (1.0 - dist / half)

    def sector_solid_angle(self, sector_id: int) -> float:
        n_low = len(self.lower)
        if sector_id < n_low:
            bounds, e0, e1, i = self.lower, 0.0, self.band_split, sector_id
        else:
            bounds, e0, e1, i = self.upper, self.band_split, 90.0, sector_id - n_low
        width = (bounds[i + 1] if i + 1 < len(bounds) else bounds[0] + 360.0) - bounds[i]
        return math.radians(width) * (math.sin(math.radians(e1)) - math.sin(math.radians(e0)))

    def sector_extent(self, sector_id: int) -> tuple[float, float, float, float]:
        """(az_start, az_width, el_low, el_high) in degrees."""
        n_low = len(self.lower)
        if sector_id < n_low:
            bounds, e0, e1, i = self.lower, 0.0, self.band_split, sector_id
        else:
            bounds, e0, e1, i = self.upper, self.band_split, 90.0, sector_id - n_low
        end = bounds[i + 1] if i + 1 < len(bounds) else bounds[0] + 360.0
        return bounds[i], end - bounds[i], e0, e1


@dataclass(eq=False)
class EnclosureModel:
    config: EnclosureConfig
    sectors: list[AcmParameters]
    partition: SectorPartition
    directions: list[Direction]
    achieved_coherence: float = float("nan")
    attempts: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    def sector_of(self, direction: Direction) -> int:
        return self.partition.locate(direction.azimuth, direction.elevation)

    def __eq__(self, other):
        if not isinstance(other, EnclosureModel):
            return NotImplemented
        return enclosure_to_dict(self) == enclosure_to_dict(other)


def helmholtz_frequency(area: float, volume: float, neck_length: float, c: float = 343.0) -> float:
    """Resonance (Hz) of a cavity of ``volume`` behind an opening of ``area`` and effective ``neck_length``."""
    if area <= 0 or volume <= 0 or neck_length <= 0:
        raise ValueError("Helmholtz geometry must be positive")
    return c / (2.0 * math.pi) * math.sqrt(area / (volume * neck_length))


def bandpass_magnitude(freqs: np.ndarray, f0: float, q: float) -> np.ndarray:
    """Unit-peak magnitude of a second-order band-pass section."""
    f = np.asarray(freqs, dtype=float)
    with np.errstate(divide="ignore"):
        detune = np.where(f > 0, f / f0 - f0 / np.where(f > 0, f, 1.0), -np.inf)
    return 1.0 / np.sqrt(1.0 + (q * detune) ** 2)


def stage_parameters(acm: AcmParameters, c: float = 343.0, q0: float = 4.0) -> list[tuple[float, float]]:
    """(resonance Hz, quality factor) for the outer and middle stages."""
    return [
        (
            helmholtz_frequency(acm.layer_hole_area[j], acm.cavity_volumes[j], acm.layer_neck_length[j], c),
            q0 / acm.fill_ratios[j],
        )
        for j in range(2)
    ]


def acm_response(
    acm: AcmParameters,
    grid: StftConfig,
    *,
    q0: float = 4.0,
    floor: float = 0.05,
    c: float = 343.0,
) -> MagnitudeSpectrum:
    """Magnitude response of one channel module on ``grid``'s band bins.

    The two stage curves are multiplied, rescaled so the strongest bin
    transmits fully, lifted by ``floor`` and clipped to ``[floor, 1]``.
    """
    freqs = grid.frequencies
    h = np.ones_like(freqs)
    for f0, q in stage_parameters(acm, c, q0):
        h = h * bandpass_magnitude(freqs, f0, q)
    peak = h.max()
    if peak > 0:
        h = h / peak
    return MagnitudeSpectrum(np.clip(h + floor, floor, 1.0), grid.grid_id)


def _sector_response(model: EnclosureModel, sector_id: int, grid: StftConfig) -> np.ndarray:
    key = (grid.grid_id, sector_id)
    if key not in model._cache:
        cfg = model.config
        model._cache[key] = acm_response(
            model.sectors[sector_id], grid, q0=cfg.q0, floor=cfg.floor, c=cfg.speed_of_sound
        ).values
    return model._cache[key]


def direction_response(model: EnclosureModel, direction: Direction, grid: StftConfig | None = None) -> MagnitudeSpectrum:
    """Response seen from ``direction``; distance plays no part here."""
    grid = grid or StftConfig()
    sector = model.sector_of(direction)
    h = _sector_response(model, sector, grid)
    if model.config.blend:
        other, w = model.partition.neighbour(direction.azimuth, direction.elevation)
        if w > 0:
            h = (1.0 - w) * h + w * _sector_response(model, other, grid)
    return MagnitudeSpectrum(h, grid.grid_id)


def coherence(h_i: MagnitudeSpectrum, h_j: MagnitudeSpectrum) -> float:
    if h_i.grid_id != h_j.grid_id:
        raise GridMismatchError(f"{h_i.grid_id} != {h_j.grid_id}")
    ni, nj = np.linalg.norm(h_i.values), np.linalg.norm(h_j.values)
    if ni == 0 or nj == 0:
        raise ValueError("undefined coherence: zero response")
    return float(np.dot(h_i.values, h_j.values) / (ni * nj))


def coherence_matrix(responses: Sequence[MagnitudeSpectrum]) -> np.ndarray:
    if len(responses) < 2:
        raise ValueError("coherence matrix needs at least two responses")
    h = spectra_matrix(responses)
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        raise ValueError("undefined coherence: zero response")
    u = h / norms[:, None]
    mu = u @ u.T
    mu = 0.5 * (mu + mu.T)
    np.fill_diagonal(mu, 1.0)
    return mu


def max_off_diagonal(mu: np.ndarray) -> float:
    return float(mu[~np.eye(len(mu), dtype=bool)].max())


def probe_responses(model: EnclosureModel, grid: StftConfig | None = None) -> list[MagnitudeSpectrum]:
    return [direction_response(model, d, grid) for d in model.directions]


# -- generation ---------------------------------------------------------------


def _draw_boundaries(rng: np.random.Generator, n: int, phase: float) -> tuple[float, ...]:
    spacing = 360.0 / n
    rotation = rng.uniform(-spacing / 4, spacing / 4)
    jitter = rng.uniform(-spacing / 8, spacing / 8, size=n)
    b = phase + rotation + spacing * np.arange(n) + jitter
    return tuple(float(v) for v in b)


def _draw_partition(rng: np.random.Generator, cfg: EnclosureConfig) -> SectorPartition:
    n_low, n_up = cfg.n_longitudinal_plates, cfg.n_transverse_plates
    split = cfg.band_split_deg + rng.uniform(-5.0, 5.0)
    split = min(max(split, 1.0), 89.0)
    # lower wedges centred on multiples of the spacing when unperturbed
    lower = _draw_boundaries(rng, n_low, -180.0 / n_low)
    upper = _draw_boundaries(rng, n_up, 0.0)
    return SectorPartition(float(split), lower, upper)


def _unit(az_deg: np.ndarray, el_deg: np.ndarray) -> np.ndarray:
    az, el = np.radians(az_deg), np.radians(el_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def _place_holes(
    rng: np.random.Generator,
    radius: float,
    extent: tuple[float, float, float, float],
    target_fill: float,
    hole_range: tuple[float, float],
    gap: float,
) -> tuple[float, float]:
    """Random non-overlapping holes on one layer patch; returns (open area, mean hole radius)."""
    az0, width, e0, e1 = extent
    s0, s1 = math.sin(math.radians(e0)), math.sin(math.radians(e1))
    patch_area = math.radians(width) * (s1 - s0) * radius**2
    rmin, rmax = hole_range
    rmax = max(rmin, min(rmax, 0.25 * math.sqrt(patch_area)))

    centres = np.empty((0, 3))
    radii: list[float] = []
    area = 0.0
    for _ in range(HOLE_ATTEMPTS):
        if area >= target_fill * patch_area:
            break
        r = rng.uniform(rmin, rmax)
        el = math.degrees(math.asin(rng.uniform(s0, s1)))
        az = az0 + rng.uniform(0.0, width)
        # keep the hole inside the patch
        if (el - e0) * math.pi / 180 * radius < r:
            continue
        if e1 < 90 and (e1 - el) * math.pi / 180 * radius < r:
            continue
        arc = math.radians(min(az - az0, az0 + width - az)) * radius * math.cos(math.radians(el))
        if arc < r:
            continue
        p = radius * _unit(np.array(az), np.array(el))
        if radii:
            dist = np.linalg.norm(centres - p, axis=1)
            if np.any(dist < np.asarray(radii) + r + gap):
                continue
        centres = np.vstack([centres, p])
        radii.append(r)
        area += math.pi * r * r
    if not radii:
        # patch too small for the random draw: one minimum-size hole
        radii.append(rmin)
        area = math.pi * rmin * rmin
    rr = np.asarray(radii)
    return area, float(np.sum(rr**3) / np.sum(rr**2))


def _draw_sector(rng: np.random.Generator, cfg: EnclosureConfig, part: SectorPartition, sector_id: int) -> AcmParameters:
    extent = part.sector_extent(sector_id)
    omega = part.sector_solid_angle(sector_id)
    radii, thick = cfg.shell_radii, cfg.shell_thickness
    areas, necks, fills = [], [], []
    for layer in range(N_LAYERS):
        target = rng.uniform(*cfg.fill_ratio_range)
        area, r_mean = _place_holes(
            rng, radii[layer], extent, target, cfg.hole_radius_range, cfg.min_hole_gap
        )
        patch = omega * radii[layer] ** 2
        areas.append(area)
        necks.append(thick[layer] + END_CORRECTION * r_mean)
        fills.append(min(area / patch, 1.0))
    volumes = []
    for j in range(2):
        cell = omega / 3.0 * ((radii[j] - thick[j]) ** 3 - radii[j + 1] ** 3)
        v0, v1 = cfg.volume_fraction_range
        volumes.append(cell * math.exp(rng.uniform(math.log(v0), math.log(v1))))
    return AcmParameters(sector_id, tuple(volumes), tuple(areas), tuple(necks), tuple(fills))


def generate_enclosure(
    config: EnclosureConfig,
    directions: Sequence[Direction] | None = None,
    grid: StftConfig | None = None,
) -> EnclosureModel:
    """Draw a seeded enclosure whose probe directions are mutually distinctive.

    Whole draws are repeated (up to ``config.max_retries`` extra times) until
    the largest pairwise coherence among the probe-direction responses is at
    most ``config.max_coherence_target``.
    """
    directions = list(directions) if directions is not None else speaker_layout()
    grid = grid or StftConfig()
    rng = np.random.default_rng(config.seed)
    best = math.inf
    for attempt in range(1, config.max_retries + 2):
        part = _draw_partition(rng, config)
        sectors = [_draw_sector(rng, config, part, s) for s in range(part.n_sectors)]
        model = EnclosureModel(config, sectors, part, directions, attempts=attempt)
        mu_max = max_off_diagonal(coherence_matrix(probe_responses(model, grid)))
        best = min(best, mu_max)
        if mu_max <= config.max_coherence_target:
            model.achieved_coherence = mu_max
            return model
    raise EnclosureGenerationError(best, config.max_retries + 1, config.max_coherence_target)


# -- persistence ----------------------------------------------------------------


def enclosure_to_dict(model: EnclosureModel) -> dict:
    return {
        "format": "msls-enclosure-1",
        "seed": model.config.seed,
        "config": asdict(model.config),
        "partition": asdict(model.partition),
        "sectors": [asdict(s) for s in model.sectors],
        "directions": [asdict(d) for d in model.directions],
        "achieved_coherence": model.achieved_coherence,
        "attempts": model.attempts,
    }


def enclosure_from_dict(doc: dict) -> EnclosureModel:
    if doc.get("format") != "msls-enclosure-1":
        raise ValueError("not an enclosure document")
    cfg = EnclosureConfig(**doc["config"])
    part = doc["partition"]
    partition = SectorPartition(part["band_split"], tuple(part["lower"]), tuple(part["upper"]))
    sectors = [AcmParameters(**s) for s in doc["sectors"]]
    directions = [Direction(**d) for d in doc["directions"]]
    return EnclosureModel(
        cfg, sectors, partition, directions, float(doc["achieved_coherence"]), int(doc["attempts"])
    )


def save_enclosure(model: EnclosureModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(enclosure_to_dict(model), indent=2, sort_keys=True) + "\n")


def load_enclosure(path: str | Path) -> EnclosureModel:
    return enclosure_from_dict(json.loads(Path(path).read_text()))
