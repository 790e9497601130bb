"""Framing, band-limited magnitude spectra and the element-wise filter model.

Every spectrum in the package lives on a fixed grid of DFT bins between
``band_low`` and ``band_high``. The grid is identified by a short string
(``grid_id``) so spectra computed with different settings can't be mixed
by accident.
"""
from __future__ import annotations

import hashlib
import json
import math
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WINDOWS = ("hann", "rectangular")


class GridMismatchError(ValueError):
    """Two spectra that must share a bin grid do not."""


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    frame_len: int = 1024
    hop: int = 512
    fft_len: int = 1024
    band_low: float = 100.0
    band_high: float = 5000.0
    window: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0 < self.hop <= self.frame_len <= self.fft_len:
            raise ValueError("need 0 < hop <= frame_len <= fft_len")
        if not 0 <= self.band_low < self.band_high <= self.sample_rate / 2:
            raise ValueError("need 0 <= band_low < band_high <= sample_rate/2")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}, got {self.window!r}")
        lo, hi = self.bin_range
        if lo > hi:
            raise ValueError("band contains no DFT bins")

    @property
    def bin_range(self) -> tuple[int, int]:
        """Inclusive (first, last) DFT bin index kept by the band limits."""
        lo = math.ceil(self.band_low * self.fft_len / self.sample_rate)
        hi = math.floor(self.band_high * self.fft_len / self.sample_rate)
        return lo, hi

    @property
    def n_bins(self) -> int:
        lo, hi = self.bin_range
        return hi - lo + 1

    @property
    def grid_id(self) -> str:
        lo, hi = self.bin_range
        return f"{self.sample_rate}/{self.fft_len}/{lo}-{hi}"

    @property
    def frequencies(self) -> np.ndarray:
        lo, hi = self.bin_range
        return np.arange(lo, hi + 1) * (self.sample_rate / self.fft_len)

    def window_array(self) -> np.ndarray:
        n = self.frame_len
        if self.window == "rectangular":
            return np.ones(n)
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def grid_size(grid_id: str) -> int:
    """Number of bins encoded in a ``grid_id`` string."""
    try:
        lo, hi = grid_id.rsplit("/", 1)[1].split("-")
        return int(hi) - int(lo) + 1
    except (IndexError, ValueError):
        raise ValueError(f"malformed grid id {grid_id!r}") from None


@dataclass(frozen=True, eq=False)
class MagnitudeSpectrum:
    values: np.ndarray
    grid_id: str

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("spectrum values must be one-dimensional")
        if v.size != grid_size(self.grid_id):
            raise ValueError(
                f"spectrum has {v.size} values but grid {self.grid_id} has {grid_size(self.grid_id)} bins"
            )
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("magnitude values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, MagnitudeSpectrum):
            return NotImplemented
        return self.grid_id == other.grid_id and np.array_equal(self.values, other.values)

    __hash__ = None


def _check_grids(spectra: Iterable[MagnitudeSpectrum]) -> str:
    grids = {s.grid_id for s in spectra}
    if len(grids) != 1:
        raise GridMismatchError(f"spectra on different grids: {sorted(grids)}")
    return grids.pop()


def frame_signal(signal: Sequence[float], cfg: StftConfig) -> np.ndarray:
    """Split ``signal`` into ``(n_frames, frame_len)`` frames; the trailing partial frame is dropped."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if x.size < cfg.frame_len:
        raise ValueError(f"signal too short: {x.size} samples < frame_len {cfg.frame_len}")
    n_frames = (x.size - cfg.frame_len) // cfg.hop + 1
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop]
    return np.array(view[:n_frames])


def _band_dft(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    lo, hi = cfg.bin_range
    spec = np.fft.rfft(frames * cfg.window_array(), n=cfg.fft_len, axis=-1)
    return spec[..., lo : hi + 1]


def stft_complex(signal: Sequence[float], cfg: StftConfig) -> np.ndarray:
    """Complex band-limited STFT, shape ``(n_frames, P)``."""
    return _band_dft(frame_signal(signal, cfg), cfg)


def stft_magnitudes(signal: Sequence[float], cfg: StftConfig) -> np.ndarray:
    """Band-limited magnitude spectrogram, shape ``(n_frames, P)``."""
    return np.abs(stft_complex(signal, cfg))


def magnitude_spectrum(frame: Sequence[float], cfg: StftConfig) -> MagnitudeSpectrum:
    x = np.asarray(frame, dtype=float)
    if x.shape != (cfg.frame_len,):
        raise ValueError(f"frame must have {cfg.frame_len} samples, got shape {x.shape}")
    return MagnitudeSpectrum(np.abs(_band_dft(x, cfg)), cfg.grid_id)


def apply_response(source: MagnitudeSpectrum, response: MagnitudeSpectrum) -> MagnitudeSpectrum:
    """Element-wise product of a source spectrum and a filter response."""
    grid = _check_grids([source, response])
    return MagnitudeSpectrum(source.values * response.values, grid)


def mix_ideal(components: Sequence[tuple[MagnitudeSpectrum, float]]) -> MagnitudeSpectrum:
    """Weighted sum of magnitude spectra (the linear mixing model)."""
    if not components:
        raise ValueError("mix_ideal needs at least one component")
    grid = _check_grids(s for s, _ in components)
    out = np.zeros(grid_size(grid))
    for spec, gain in components:
        if gain < 0:
            raise ValueError(f"negative gain {gain}")
        out = out + gain * spec.values
    return MagnitudeSpectrum(out, grid)


def spectra_matrix(spectra: Sequence[MagnitudeSpectrum]) -> np.ndarray:
    """Stack spectra into a ``(len(spectra), P)`` array after checking grids."""
    _check_grids(spectra)
    return np.stack([s.values for s in spectra])


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only mono 16-bit PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0, rate


def write_wav(path: str | Path, samples: Sequence[float], sample_rate: int = 16000) -> None:
    x = np.clip(np.asarray(samples, dtype=float), -1.0, 32767 / 32768)
    pcm = np.round(x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
