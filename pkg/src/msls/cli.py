"""Command-line entry point.

Every command reads one JSON run configuration (all fields optional), applies
flag overrides, echoes the effective configuration into the output directory
and writes its artefacts there. Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .audio import SCENE_SETS, build_library, synthesize_audio
from .dictionary import load_dictionary, save_dictionary
from .enclosure import (
    EnclosureConfig,
    EnclosureGenerationError,
    coherence_matrix,
    generate_enclosure,
    load_enclosure,
    max_off_diagonal,
    probe_responses,
    save_enclosure,
)
from .harness import (
    MODES,
    Recognizer,
    Renderer,
    Scenario,
    TrackingTimeline,
    run_campaign,
    run_tracking,
    run_trial,
    stepping_timeline,
    tracking_csv,
    train_from_renderer,
)
from .recovery import fit_vspca, load_vspca, save_vspca
from .spectra import StftConfig, write_wav

log = logging.getLogger("msls")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass(frozen=True)
class LibraryConfig:
    name: str = "street"
    n_audio: int | None = None

    def __post_init__(self):
        if self.name not in SCENE_SETS:
            raise ValueError(f"name must be one of {SCENE_SETS}, got {self.name!r}")
        if self.n_audio is not None and self.n_audio < 1:
            raise ValueError("n_audio must be at least 1")


@dataclass(frozen=True)
class RecoveryConfig:
    variance_threshold: float = 0.99
    tol_abs: float = 1e-10
    tol_corr: float = 1e-12

    def __post_init__(self):
        if not 0 < self.variance_threshold <= 1:
            raise ValueError("variance_threshold must lie in (0, 1]")
        if self.tol_abs < 0 or self.tol_corr < 0:
            raise ValueError("tol_abs and tol_corr must be non-negative")


@dataclass(frozen=True)
class HarnessConfig:
    mode: str = "ideal"
    snr_db: float | None = None
    trials_per_k: int = 100
    k_range: tuple[int, ...] = (1, 2, 3, 4, 5)
    duration: float = 1.0
    clip_seconds: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "k_range", tuple(int(k) for k in self.k_range))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trials_per_k < 1:
            raise ValueError("trials_per_k must be at least 1")
        if not self.k_range or min(self.k_range) < 1:
            raise ValueError("k_range must list sparsities of at least 1")
        if self.duration <= 0 or self.clip_seconds < self.duration:
            raise ValueError("duration must be positive and no longer than clip_seconds")


@dataclass(frozen=True)
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    enclosure: EnclosureConfig = field(default_factory=EnclosureConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    seed: int = 0
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "stft": StftConfig,
    "enclosure": EnclosureConfig,
    "library": LibraryConfig,
    "recovery": RecoveryConfig,
    "harness": HarnessConfig,
}


def _build_section(name: str, cls, doc) -> object:
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    """Validated RunConfig from a parsed JSON document; missing fields take defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    out_dir = doc.get("output_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir: must be a non-empty string")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = dict(doc.get(name, {})) if isinstance(doc.get(name, {}), dict) else doc[name]
        if name == "enclosure" and isinstance(sub, dict):
            sub.setdefault("seed", seed)
        sections[name] = _build_section(name, cls, sub)
    return RunConfig(seed=seed, output_dir=out_dir, **sections)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        cfg = replace(cfg, seed=args.seed, enclosure=replace(cfg.enclosure, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    h = cfg.harness
    if args.mode is not None:
        h = replace(h, mode=args.mode)
    if args.snr_db is not None:
        h = replace(h, snr_db=args.snr_db)
    return replace(cfg, harness=h)


def write_effective_config(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_json_input(path: str | Path, what: str) -> dict:
    """Parse an input document, reporting the line and column of syntax errors."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{what} {path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


# -- shared setup ----------------------------------------------------------------


def _library(cfg: RunConfig):
    return build_library(cfg.library.name, cfg.library.n_audio)


def _enclosure(cfg: RunConfig, path: str | None):
    p = Path(path) if path else Path(cfg.output_dir) / "enclosure.json"
    if p.exists():
        return load_enclosure(p)
    if path:
        raise FileNotFoundError(f"enclosure file {p} not found")
    log.info("no enclosure at %s, generating one from the config", p)
    return generate_enclosure(cfg.enclosure, grid=cfg.stft)


def _renderer(cfg: RunConfig, enclosure) -> Renderer:
    return Renderer(enclosure, _library(cfg), cfg.stft, cfg.seed, cfg.harness.clip_seconds)


def _recognizer(cfg: RunConfig, args) -> Recognizer:
    out = Path(cfg.output_dir)
    dictionary = load_dictionary(args.dictionary or out / "dictionary.msd")
    vspca = load_vspca(args.vspca or out / "vspca.json")
    if dictionary.grid_id != cfg.stft.grid_id:
        raise ValueError(f"dictionary grid {dictionary.grid_id} does not match config grid {cfg.stft.grid_id}")
    if dictionary.stft_config_hash and dictionary.stft_config_hash != cfg.stft.config_hash():
        raise ValueError("dictionary was trained with different STFT settings")
    return Recognizer(dictionary, vspca, tol_abs=cfg.recovery.tol_abs, tol_corr=cfg.recovery.tol_corr)


def _matrix_csv(mu: np.ndarray) -> str:
    rows = [",".join(["direction"] + [str(j) for j in range(mu.shape[1])])]
    for i, row in enumerate(mu):
        rows.append(",".join([str(i)] + [f"{v:.12f}" for v in row]))
    return "\n".join(rows) + "\n"


# -- commands --------------------------------------------------------------------


def cmd_gen_enclosure(cfg: RunConfig, args) -> int:
    model = generate_enclosure(cfg.enclosure, grid=cfg.stft)
    out = Path(cfg.output_dir)
    save_enclosure(model, out / "enclosure.json")
    mu = coherence_matrix(probe_responses(model, cfg.stft))
    (out / "coherence.csv").write_text(_matrix_csv(mu))
    print(f"max off-diagonal coherence {max_off_diagonal(mu):.4f} after {model.attempts} draw(s)")
    return 0


def cmd_coherence(cfg: RunConfig, args) -> int:
    model = _enclosure(cfg, args.enclosure)
    mu = coherence_matrix(probe_responses(model, cfg.stft))
    (Path(cfg.output_dir) / "coherence.csv").write_text(_matrix_csv(mu))
    print(f"max off-diagonal coherence {max_off_diagonal(mu):.4f}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    renderer = _renderer(cfg, _enclosure(cfg, args.enclosure))
    dictionary = train_from_renderer(renderer, cfg.harness.mode)
    vspca = fit_vspca(dictionary, cfg.recovery.variance_threshold)
    out = Path(cfg.output_dir)
    save_dictionary(dictionary, out / "dictionary.msd")
    save_vspca(vspca, out / "vspca.json")
    p, q = dictionary.shape
    print(f"dictionary P={p} Q={q}; VSPCA keeps {vspca.retained_dim} components")
    return 0


def cmd_test(cfg: RunConfig, args) -> int:
    if not args.scenario:
        raise ValueError("test needs --scenario")
    scn = Scenario.from_dict(read_json_input(args.scenario, "scenario"))
    renderer = _renderer(cfg, _enclosure(cfg, args.enclosure))
    result = run_trial(scn, renderer, _recognizer(cfg, args), cfg.harness.mode, cfg.harness.snr_db, cfg.seed)
    doc = result.to_dict()
    (Path(cfg.output_dir) / "trial.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    pairs = " ".join(f"{d}:{a}" for d, a in result.recovered)
    print(f"alpha {result.alpha:.3f} recovered {pairs}")
    return 0


def cmd_campaign(cfg: RunConfig, args) -> int:
    renderer = _renderer(cfg, _enclosure(cfg, args.enclosure))
    h = cfg.harness
    report = run_campaign(
        renderer, _recognizer(cfg, args), h.k_range, h.trials_per_k, cfg.seed, h.mode, h.snr_db, h.duration
    )
    out = Path(cfg.output_dir)
    (out / "campaign_trials.csv").write_text(report.trials_csv(args.timing))
    (out / "campaign_summary.csv").write_text(report.summary_csv())
    for k, m in report.mean_alpha().items():
        print(f"k={k} mean alpha {m:.3f}")
    return 0


def default_timeline(n_directions: int = 8, window_len: float = 1.0) -> TrackingTimeline:
    """One source stepping once per window through adjacent inner-ring directions."""
    return stepping_timeline([list(range(n_directions))], [0], window_len)


def cmd_track(cfg: RunConfig, args) -> int:
    if args.timeline:
        timeline = TrackingTimeline.from_dict(read_json_input(args.timeline, "timeline"))
    else:
        timeline = default_timeline()
    renderer = _renderer(cfg, _enclosure(cfg, args.enclosure))
    windows = run_tracking(timeline, renderer, _recognizer(cfg, args), cfg.harness.mode, cfg.harness.snr_db, cfg.seed)
    (Path(cfg.output_dir) / "tracking.csv").write_text(tracking_csv(windows, args.timing))
    worst = max(w.elapsed for w in windows)
    print(f"{len(windows)} windows, mean alpha {np.mean([w.alpha for w in windows]):.3f}, slowest {worst:.3f} s")
    return 0


def cmd_synth_audio(cfg: RunConfig, args) -> int:
    lib = _library(cfg)
    ids = [args.audio_id] if args.audio_id is not None else range(len(lib))
    out = Path(cfg.output_dir) / "audio"
    out.mkdir(parents=True, exist_ok=True)
    for a in ids:
        x = synthesize_audio(lib, a, args.duration, cfg.stft.sample_rate, cfg.seed)
        write_wav(out / f"{a:02d}_{lib.entry(a).name}.wav", x, cfg.stft.sample_rate)
    print(f"wrote {len(ids)} clip(s) to {out}")
    return 0


COMMANDS = {
    "gen-enclosure": cmd_gen_enclosure,
    "train": cmd_train,
    "test": cmd_test,
    "campaign": cmd_campaign,
    "track": cmd_track,
    "coherence": cmd_coherence,
    "synth-audio": cmd_synth_audio,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msls", description="Single-sensor multi-source localisation runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=MODES, help="measurement mixing mode")
        p.add_argument("--snr-db", type=float, dest="snr_db", help="additive noise level")
        if name in ("train", "test", "campaign", "track", "coherence"):
            p.add_argument("--enclosure", help="enclosure JSON (default: <out>/enclosure.json)")
        if name in ("test", "campaign", "track"):
            p.add_argument("--dictionary", help="dictionary file (default: <out>/dictionary.msd)")
            p.add_argument("--vspca", help="VSPCA model (default: <out>/vspca.json)")
        if name in ("campaign", "track"):
            p.add_argument("--timing", action="store_true", help="record wall-clock times in the CSV")
        if name == "test":
            p.add_argument("--scenario", help="scenario JSON")
        if name == "track":
            p.add_argument("--timeline", help="timeline JSON (default: one source stepping 8 directions)")
        if name == "synth-audio":
            p.add_argument("--audio-id", type=int, dest="audio_id")
            p.add_argument("--duration", type=float, default=3.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get("MSLS_LOG", "WARNING").upper(), None)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        write_effective_config(cfg)
        return COMMANDS[args.command](cfg, args)
    except (EnclosureGenerationError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
