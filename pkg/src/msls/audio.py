"""Synthetic sound libraries standing in for recorded scene audio.

Six recipe families cover the kinds of sounds a street or home scene
contains. Each clip gets a noise body and a fixed formant envelope so its
spectrum is broad and stable from frame to frame, as recorded scene audio
tends to be. Everything stays below 5 kHz and is fully determined by the
entry parameters plus a seed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal as sps

from .spectra import read_wav

RECIPES = ("fm_siren", "two_tone", "beep_train", "chirp", "noise_burst", "bell")
SCENE_SETS = ("street", "home", "animal_farm", "speech", "concert", "commands30")
TOP_FREQ = 4800.0
N_FORMANTS = 3
PEAK = 0.5


@dataclass(frozen=True)
class AudioEntry:
    audio_id: int
    name: str
    recipe: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.recipe not in RECIPES and self.recipe != "wav":
            raise ValueError(f"unknown recipe {self.recipe!r}")


@dataclass(frozen=True)
class AudioLibrary:
    name: str
    entries: tuple[AudioEntry, ...]

    def __post_init__(self):
        ids = [e.audio_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("audio ids must be dense and ordered from 0")

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, audio_id: int) -> AudioEntry:
        if not 0 <= audio_id < len(self.entries):
            raise KeyError(f"unknown audio id {audio_id}")
        return self.entries[audio_id]

    @property
    def labels(self) -> dict[int, str]:
        return {e.audio_id: e.name for e in self.entries}


def _harmonics(inst: np.ndarray, fs: int, rng: np.random.Generator, tilt: float = 0.0) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(inst) / fs
    n_harm = int(TOP_FREQ // inst.max())
    out = np.zeros_like(phase)
    for n in range(1, n_harm + 1):
        out += np.sin(n * phase + rng.uniform(0, 2 * np.pi)) / n**tilt
    return out


def _fm_siren(t, fs, rng, f0, dev, rate):
    inst = f0 * (1 + dev * np.sin(2 * np.pi * rate * t))
    return _harmonics(inst, fs, rng, tilt=0.3)


def _two_tone(t, fs, rng, f_a, f_b, period):
    hi = (np.floor(2 * t / period) % 2).astype(bool)
    inst = np.convolve(np.where(hi, f_b, f_a), np.ones(64) / 64, mode="same")
    return _harmonics(inst, fs, rng, tilt=0.2)


def _beep_train(t, fs, rng, freq, on, period, floor=0.3):
    tone = _harmonics(np.full_like(t, freq), fs, rng, tilt=0.0)
    gate = ((t % period) < on).astype(float)
    gate = np.convolve(gate, np.hanning(81) / np.hanning(81).sum(), mode="same")
    return tone * (floor + (1 - floor) * gate)


def _chirp(t, fs, rng, f_lo, f_hi, period):
    tau = t % period
    ratio = f_hi / f_lo
    # exponential sweep restarted every period; shorter than a frame, so each
    # frame sees the whole sweep
    phase = 2 * np.pi * f_lo * period / np.log(ratio) * (ratio ** (tau / period) - 1)
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def _noise_burst(t, fs, rng, f_lo, f_hi, burst, period):
    sos = sps.butter(4, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    shaped = sps.sosfilt(sos, rng.standard_normal(t.size))
    return shaped * (0.5 + 0.5 * np.exp(-((t % period) / burst)))


def _bell(t, fs, rng, f0, decay, period):
    tau = t % period
    out = np.zeros_like(t)
    ratio = 1.0
    while f0 * ratio < TOP_FREQ:
        out += np.sin(2 * np.pi * f0 * ratio * t + rng.uniform(0, 2 * np.pi))
        ratio *= 1.19
    return out * (0.5 + np.exp(-tau / decay))


def _colour(x: np.ndarray, fs: int, formants: tuple[float, ...], body: float, rng: np.random.Generator) -> np.ndarray:
    """Add a noise body and impose a fixed formant envelope on the whole clip."""
    noise = rng.standard_normal(x.size)
    x = x / np.std(x) + body * noise
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1 / fs)
    gain = np.full(freqs.size, 0.1)
    for fc in formants:
        gain += np.exp(-0.5 * (np.log(np.maximum(freqs, 1.0) / fc) / 0.18) ** 2)
    gain[(freqs < 80) | (freqs > TOP_FREQ)] = 0.0
    return np.fft.irfft(spec * gain, x.size)


_RECIPE_FUNCS: dict[str, Callable] = {
    "fm_siren": _fm_siren,
    "two_tone": _two_tone,
    "beep_train": _beep_train,
    "chirp": _chirp,
    "noise_burst": _noise_burst,
    "bell": _bell,
}


def synthesize_audio(lib: AudioLibrary, audio_id: int, duration: float, fs: int = 16000, seed: int = 0) -> np.ndarray:
    """Waveform of one library entry, peak-normalised to 0.5."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    entry = lib.entry(audio_id)
    n = int(round(duration * fs))
    if entry.recipe == "wav":
        x, rate = read_wav(entry.params["path"])
        if rate != fs:
            raise ValueError(f"{entry.params['path']}: sample rate {rate}, expected {fs}")
        x = np.resize(x, n)
    else:
        rng = np.random.default_rng([seed, audio_id, zlib.crc32(entry.name.encode())])
        t = np.arange(n) / fs
        params = dict(entry.params)
        formants = tuple(params.pop(f"formant{i}") for i in range(N_FORMANTS))
        body = params.pop("body")
        x = _RECIPE_FUNCS[entry.recipe](t, fs, rng, **params)
        x = _colour(x, fs, formants, body, rng)
    peak = np.max(np.abs(x))
    return x * (PEAK / peak) if peak > 0 else x


_STREET = (
    ("police_car", "fm_siren", dict(f0=160.0, dev=0.02, rate=0.4)),
    ("backing_car", "beep_train", dict(freq=230.0, on=0.35, period=0.6)),
    ("ambulance", "two_tone", dict(f_a=130.0, f_b=175.0, period=1.2)),
    ("car_whistle", "chirp", dict(f_lo=300.0, f_hi=4500.0, period=0.05)),
    ("fire_engine", "noise_burst", dict(f_lo=150.0, f_hi=4500.0, burst=0.3, period=0.8)),
    ("bicycle_bell", "bell", dict(f0=420.0, decay=0.25, period=0.5)),
)

_SCENE_NAMES = {
    "home": ("doorbell", "kettle", "dog_bark", "vacuum", "phone_ring", "clock_chime"),
    "animal_farm": ("rooster", "cow", "sheep", "duck", "horse", "pig"),
    "speech": ("speaker_a", "speaker_b", "speaker_c", "speaker_d", "speaker_e", "speaker_f"),
    "concert": ("violin", "trumpet", "flute", "drum", "cello", "piano"),
}


def _draw_params(recipe: str, rng: np.random.Generator) -> dict:
    u = rng.uniform
    if recipe == "fm_siren":
        return dict(f0=u(110, 220), dev=u(0.03, 0.1), rate=u(0.2, 0.8))
    if recipe == "two_tone":
        f_a = u(110, 200)
        return dict(f_a=f_a, f_b=f_a * u(1.15, 1.4), period=u(0.8, 1.6))
    if recipe == "beep_train":
        period = u(0.3, 1.0)
        return dict(freq=u(150, 300), on=period * u(0.4, 0.8), period=period)
    if recipe == "chirp":
        return dict(f_lo=u(150, 400), f_hi=u(3500, 4700), period=u(0.03, 0.06))
    if recipe == "noise_burst":
        return dict(f_lo=u(100, 300), f_hi=u(3500, 4700), burst=u(0.1, 0.5), period=u(0.4, 1.2))
    return dict(f0=u(250, 600), decay=u(0.1, 0.6), period=u(0.3, 1.0))


def _draw_colour(rng: np.random.Generator) -> dict:
    """Formant centres spread log-uniformly over the band, plus a noise-body level."""
    centres = np.sort(np.exp(rng.uniform(np.log(200.0), np.log(4500.0), N_FORMANTS)))
    out = {f"formant{i}": float(c) for i, c in enumerate(centres)}
    out["body"] = float(rng.uniform(0.6, 1.2))
    return out


def build_library(name: str = "street", n_audio: int | None = None) -> AudioLibrary:
    """Named scene library; ``n_audio`` trims or extends it by cycling recipes."""
    if name not in SCENE_SETS:
        raise ValueError(f"unknown library {name!r}; choose from {SCENE_SETS}")
    default = 30 if name == "commands30" else 6
    n_audio = default if n_audio is None else n_audio
    if n_audio < 1:
        raise ValueError("a library needs at least one audio")
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    entries = []
    for i in range(n_audio):
        recipe = RECIPES[i % len(RECIPES)]
        if name == "street" and i < len(_STREET):
            label, recipe, params = _STREET[i]
        else:
            label = _SCENE_NAMES[name][i] if name in _SCENE_NAMES and i < 6 else f"{name}_{i:02d}"
            params = _draw_params(recipe, rng)
        params = {**params, **_draw_colour(rng)}
        entries.append(AudioEntry(i, label, recipe, {k: float(v) for k, v in params.items()}))
    return AudioLibrary(name, tuple(entries))


def wav_library(paths: dict[int, str | Path], name: str = "wav") -> AudioLibrary:
    """Library backed by user WAV files keyed by audio id."""
    entries = tuple(
        AudioEntry(i, Path(paths[i]).stem, "wav", {"path": str(paths[i])}) for i in sorted(paths)
    )
    return AudioLibrary(name, entries)
