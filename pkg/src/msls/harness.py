"""Scenario rendering, listening-test campaigns and tracking runs."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import AudioLibrary, synthesize_audio
from .dictionary import MeasurementMatrix, train_dictionary
from .enclosure import EnclosureModel, direction_response
from .recovery import (
    ObjectVector,
    VoteResult,
    VspcaModel,
    majority_vote,
    omp,
    reconstruct_sources,
    transform_dictionary,
    vspca_transform,
)
from .spectra import MagnitudeSpectrum, StftConfig, frame_signal

R_REF = 2.5
MODES = ("ideal", "realistic")
Pair = tuple[int, int]


@dataclass(frozen=True)
class Source:
    direction_id: int
    audio_id: int
    gain: float = 1.0
    start: float = 0.0
    duration: float = 1.0
    clip_offset: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("source gain must be positive")
        if self.start < 0 or self.duration <= 0 or self.clip_offset < 0:
            raise ValueError("source timing must be non-negative with positive duration")

    @property
    def pair(self) -> Pair:
        return (self.direction_id, self.audio_id)


@dataclass(frozen=True)
class Scenario:
    sources: tuple[Source, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise ValueError("scenario has no sources")
        for i, a in enumerate(self.sources):
            for b in self.sources[i + 1 :]:
                overlap = a.start < b.start + b.duration and b.start < a.start + a.duration
                if overlap and a.pair == b.pair:
                    raise ValueError(f"pair {a.pair} active twice at once")

    @property
    def true_k(self) -> int:
        return len(self.sources)

    @property
    def duration(self) -> float:
        return max(s.start + s.duration for s in self.sources)

    @property
    def truth(self) -> set[Pair]:
        return {s.pair for s in self.sources}

    def to_dict(self) -> dict:
        return {"sources": [asdict(s) for s in self.sources]}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        return cls(tuple(Source(**s) for s in doc["sources"]))


@dataclass
class TrialResult:
    scenario: Scenario
    recovered: list[Pair]
    n_recognized: int
    alpha: float
    votes: VoteResult
    elapsed: float

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "k": self.scenario.true_k,
            "recovered": [list(p) for p in self.recovered],
            "n_recognized": self.n_recognized,
            "alpha": self.alpha,
            "votes": {str(k): v for k, v in sorted(self.votes.per_index_votes.items())},
            "frames_used": self.votes.frames_used,
            "elapsed_s": self.elapsed,
        }


def score(truth: Iterable[Pair], recovered: Iterable[Pair], k: int) -> tuple[int, float]:
    """Sources recognised (direction and audio both right) and the success rate n/k."""
    n = len(set(map(tuple, truth)) & set(map(tuple, recovered)))
    return n, n / k


# -- rendering ------------------------------------------------------------------


class Renderer:
    """Caches library clips, their spectra and direction responses for one setup."""

    def __init__(
        self,
        enclosure: EnclosureModel,
        library: AudioLibrary,
        cfg: StftConfig,
        seed: int = 0,
        clip_seconds: float = 3.0,
    ):
        self.enclosure = enclosure
        self.library = library
        self.cfg = cfg
        self.seed = seed
        self.clip_seconds = clip_seconds
        self._clips: dict[int, np.ndarray] = {}
        self._responses = np.stack(
            [direction_response(enclosure, d, cfg).values for d in enclosure.directions]
        )
        self._window = cfg.window_array()

    @property
    def n_directions(self) -> int:
        return len(self.enclosure.directions)

    def clip(self, audio_id: int) -> np.ndarray:
        if audio_id not in self._clips:
            self._clips[audio_id] = synthesize_audio(
                self.library, audio_id, self.clip_seconds, self.cfg.sample_rate, self.seed
            )
        return self._clips[audio_id]

    def response(self, direction_id: int) -> np.ndarray:
        if not 0 <= direction_id < self.n_directions:
            raise KeyError(f"direction {direction_id} not covered by the enclosure layout")
        return self._responses[direction_id]

    def distance_gain(self, direction_id: int) -> float:
        return R_REF / self.enclosure.directions[direction_id].distance

    def source_signal(self, src: Source, n_total: int) -> np.ndarray:
        fs = self.cfg.sample_rate
        clip = self.clip(src.audio_id)
        a = int(round(src.start * fs))
        n = min(int(round(src.duration * fs)), n_total - a)
        off = int(round(src.clip_offset * fs)) % clip.size
        x = np.zeros(n_total)
        if n > 0:
            x[a : a + n] = np.take(clip, np.arange(off, off + n), mode="wrap")
        return x

    def band_stft(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.cfg.bin_range
        frames = frame_signal(x, self.cfg)
        return np.fft.rfft(frames * self._window, n=self.cfg.fft_len, axis=-1)[:, lo : hi + 1]

    def render(
        self,
        scn: Scenario,
        mode: str = "ideal",
        snr_db: float | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Measured magnitude frames, shape ``(n_frames, P)``."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        n_total = max(int(round(scn.duration * self.cfg.sample_rate)), self.cfg.frame_len)
        total = None
        for src in scn.sources:
            h = self.response(src.direction_id) * (src.gain * self.distance_gain(src.direction_id))
            spec = self.band_stft(self.source_signal(src, n_total))
            if mode == "ideal":
                part = np.abs(spec) * h
            else:
                part = spec * h * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
            total = part if total is None else total + part
        if snr_db is not None:
            total = self._add_noise(total, mode, snr_db, n_total, rng)
        return np.abs(total)

    def _add_noise(self, total, mode, snr_db, n_total, rng):
        # white noise scaled so the in-band energy ratio matches snr_db
        signal_energy = float(np.sum(np.abs(total) ** 2))
        per_sample = np.sum(self._window**2) * total.size
        sigma = np.sqrt(signal_energy / (10.0 ** (snr_db / 10.0)) / per_sample)
        noise = self.band_stft(sigma * rng.standard_normal(n_total))
        if mode == "ideal":
            return np.abs(total) + np.abs(noise)
        return total + noise


def render_measurement(
    scn: Scenario,
    enc: EnclosureModel,
    lib: AudioLibrary,
    cfg: StftConfig,
    mode: str = "ideal",
    snr_db: float | None = None,
    seed: int = 0,
    renderer: Renderer | None = None,
) -> list[MagnitudeSpectrum]:
    renderer = renderer or Renderer(enc, lib, cfg, seed)
    frames = renderer.render(scn, mode, snr_db, np.random.default_rng([seed, 1]))
    return [MagnitudeSpectrum(f, cfg.grid_id) for f in frames]


def train_from_renderer(renderer: Renderer, mode: str = "ideal") -> MeasurementMatrix:
    """Emit every library entry from every direction on its own and average the frames.

    Columns are stored with unit mass; ``Recognizer`` scales test frames the
    same way, so source loudness and distance drop out of the match.
    """
    renders = []
    for d in range(renderer.n_directions):
        for a in range(len(renderer.library)):
            scn = Scenario((Source(d, a, duration=renderer.clip_seconds),))
            frames = renderer.render(scn, mode, rng=np.random.default_rng([renderer.seed, d, a]))
            renders.append((d, a, [MagnitudeSpectrum(f, renderer.cfg.grid_id) for f in frames]))
    return train_dictionary(renders, renderer.library.labels, renderer.cfg, unit_mass=True)


# -- recovery over many frames ------------------------------------------------------


class Recognizer:
    """Dictionary, VSPCA model and projected atoms bundled for repeated use."""

    def __init__(self, dictionary: MeasurementMatrix, vspca: VspcaModel, silence: float = 1e-6, **omp_kwargs):
        self.dictionary = dictionary
        self.vspca = vspca
        self.atoms = transform_dictionary(vspca, dictionary)
        self.silence = silence
        self.omp_kwargs = omp_kwargs

    def recover(self, frames: np.ndarray, k: int) -> tuple[list[ObjectVector], VoteResult]:
        mass = frames.sum(axis=1)
        keep = mass > self.silence * max(mass.max(), 0.0) if mass.size else mass.astype(bool)
        results = []
        for y, m in zip(frames[keep], mass[keep]):
            x = vspca_transform(self.vspca, y * (k / m), k)
            results.append(omp(self.atoms, x, k, **self.omp_kwargs))
        if not results:
            raise ValueError("no frame carries signal")
        return results, majority_vote(results, k)


def run_trial(
    scn: Scenario,
    renderer: Renderer,
    recognizer: Recognizer,
    mode: str = "ideal",
    snr_db: float | None = None,
    seed: int = 0,
) -> TrialResult:
    t0 = time.perf_counter()
    k = scn.true_k
    frames = renderer.render(scn, mode, snr_db, np.random.default_rng(seed))
    _, votes = recognizer.recover(frames, k)
    recovered = reconstruct_sources(votes, recognizer.dictionary)
    elapsed = time.perf_counter() - t0
    n, alpha = score(scn.truth, recovered, k)
    return TrialResult(scn, recovered, n, alpha, votes, elapsed)


def draw_scenario(
    rng: np.random.Generator,
    k: int,
    n_directions: int,
    n_audio: int,
    duration: float = 1.0,
    clip_seconds: float = 3.0,
) -> Scenario:
    """``k`` speakers at distinct positions, each playing a random library entry."""
    if not 1 <= k <= n_directions:
        raise ValueError(f"k={k} needs between 1 and {n_directions} speakers")
    dirs = rng.choice(n_directions, size=k, replace=False)
    auds = rng.integers(0, n_audio, size=k)
    span = max(clip_seconds - duration, 0.0)
    offs = rng.uniform(0.0, span, size=k)
    return Scenario(
        tuple(Source(int(d), int(a), 1.0, 0.0, duration, float(o)) for d, a, o in zip(dirs, auds, offs))
    )


@dataclass
class CampaignReport:
    trials: list[tuple[int, int, TrialResult]]
    n_audio: int

    def mean_alpha(self) -> dict[int, float]:
        per_k: dict[int, list[float]] = {}
        for _, k, r in self.trials:
            per_k.setdefault(k, []).append(r.alpha)
        return {k: float(np.mean(v)) for k, v in sorted(per_k.items())}

    def audio_rates(self) -> dict[tuple[int, int], tuple[int, float]]:
        """Per (k, audio): number of true sources with that audio and the share recovered."""
        hits: dict[tuple[int, int], list[int]] = {}
        for _, k, r in self.trials:
            got = set(r.recovered)
            for d, a in r.scenario.truth:
                hits.setdefault((k, a), []).append(int((d, a) in got))
        return {key: (len(v), float(np.mean(v))) for key, v in sorted(hits.items())}

    def trials_csv(self, record_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial_id", "k", "truth_pairs", "recovered_pairs", "n", "alpha", "elapsed_ms"])
        for trial_id, k, r in self.trials:
            w.writerow([
                trial_id,
                k,
                _pairs(sorted(r.scenario.truth)),
                _pairs(r.recovered),
                r.n_recognized,
                f"{r.alpha:.6f}",
                f"{1000 * r.elapsed:.3f}" if record_timing else "",
            ])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "k", "audio_id", "count", "mean_alpha"])
        counts: dict[int, int] = {}
        for _, k, _r in self.trials:
            counts[k] = counts.get(k, 0) + 1
        for k, m in self.mean_alpha().items():
            w.writerow(["k", k, "", counts[k], f"{m:.6f}"])
        for (k, a), (n, rate) in self.audio_rates().items():
            w.writerow(["audio", k, a, n, f"{rate:.6f}"])
        return buf.getvalue()


def _pairs(pairs: Iterable[Pair]) -> str:
    return ";".join(f"{d}:{a}" for d, a in pairs)


def run_campaign(
    renderer: Renderer,
    recognizer: Recognizer,
    k_range: Sequence[int] = (1, 2, 3, 4, 5),
    trials_per_k: int = 100,
    seed: int = 0,
    mode: str = "ideal",
    snr_db: float | None = None,
    duration: float = 1.0,
) -> CampaignReport:
    """Randomised listening tests: ``trials_per_k`` scenario draws for every k."""
    trials = []
    trial_id = 0
    n_dirs, n_audio = renderer.n_directions, len(renderer.library)
    for k in k_range:
        for t in range(trials_per_k):
            rng = np.random.default_rng([seed, k, t])
            scn = draw_scenario(rng, k, n_dirs, n_audio, duration, renderer.clip_seconds)
            result = run_trial(scn, renderer, recognizer, mode, snr_db, seed=int(rng.integers(2**32)))
            trials.append((trial_id, k, result))
            trial_id += 1
    return CampaignReport(trials, n_audio)


# -- tracking ------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    active: tuple[Pair, ...]

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(tuple(int(v) for v in p) for p in self.active))
        if self.end <= self.start:
            raise ValueError("segment must end after it starts")
        if len(set(self.active)) != len(self.active):
            raise ValueError("duplicate active pair in segment")


@dataclass(frozen=True)
class TrackingTimeline:
    segments: tuple[Segment, ...]
    window_len: float = 1.0
    hop: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("timeline has no segments")
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(a.end - b.start) > 1e-9:
                raise ValueError("timeline segments must be contiguous")
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")

    def to_dict(self) -> dict:
        return {
            "window_len": self.window_len,
            "hop": self.hop,
            "segments": [
                {"start": s.start, "end": s.end, "active": [list(p) for p in s.active]} for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrackingTimeline":
        segs = tuple(Segment(s["start"], s["end"], tuple(tuple(p) for p in s["active"])) for s in doc["segments"])
        return cls(segs, doc.get("window_len", 1.0), doc.get("hop", 1.0))


def stepping_timeline(
    paths: Sequence[Sequence[int]],
    audio_ids: Sequence[int],
    window_len: float = 1.0,
) -> TrackingTimeline:
    """Sources hopping along direction paths, one step per window.

    ``paths[j][w]`` is the direction of source ``j`` in window ``w``.
    """
    n_win = len(paths[0])
    if any(len(p) != n_win for p in paths):
        raise ValueError("all paths need the same length")
    segs = tuple(
        Segment(w * window_len, (w + 1) * window_len, tuple((int(p[w]), int(a)) for p, a in zip(paths, audio_ids)))
        for w in range(n_win)
    )
    return TrackingTimeline(segs, window_len, window_len)


@dataclass
class WindowResult:
    start: float
    truth: tuple[Pair, ...]
    recovered: list[Pair]
    alpha: float
    elapsed: float


def run_tracking(
    timeline: TrackingTimeline,
    renderer: Renderer,
    recognizer: Recognizer,
    mode: str = "ideal",
    snr_db: float | None = None,
    seed: int = 0,
) -> list[WindowResult]:
    """Render and recognise each window of a moving-source timeline on its own."""
    min_len = renderer.cfg.frame_len / renderer.cfg.sample_rate
    if timeline.window_len < min_len:
        raise ValueError("window shorter than one STFT frame")
    end = timeline.segments[-1].end
    out = []
    w = 0
    start = timeline.segments[0].start
    while start + timeline.window_len <= end + 1e-9:
        mid = start + timeline.window_len / 2
        seg = next(s for s in timeline.segments if s.start <= mid < s.end or s is timeline.segments[-1])
        t0 = time.perf_counter()
        k = len(seg.active)
        rng = np.random.default_rng([seed, w])
        # each source keeps playing its clip continuously across windows
        scn = Scenario(
            tuple(Source(d, a, 1.0, 0.0, timeline.window_len, start % renderer.clip_seconds) for d, a in seg.active)
        )
        frames = renderer.render(scn, mode, snr_db, rng)
        _, votes = recognizer.recover(frames, k)
        recovered = reconstruct_sources(votes, recognizer.dictionary)
        elapsed = time.perf_counter() - t0
        _, alpha = score(seg.active, recovered, k)
        out.append(WindowResult(start, seg.active, recovered, alpha, elapsed))
        start += timeline.hop
        w += 1
    return out


def tracking_csv(windows: Sequence[WindowResult], record_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_start_s", "truth_pairs", "recovered_pairs", "alpha", "elapsed_ms"])
    for r in windows:
        w.writerow([
            f"{r.start:.3f}",
            _pairs(r.truth),
            _pairs(r.recovered),
            f"{r.alpha:.6f}",
            f"{1000 * r.elapsed:.3f}" if record_timing else "",
        ])
    return buf.getvalue()
