"""The measurement matrix: one trained spectrum per (direction, audio) class."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .spectra import GridMismatchError, MagnitudeSpectrum, StftConfig, grid_size

MAGIC = "MSLS-DICT-1"


class DictionaryFileError(ValueError):
    """Base class for unreadable dictionary files."""


class HeaderError(DictionaryFileError):
    pass


class PayloadSizeError(DictionaryFileError):
    pass


class ChecksumError(DictionaryFileError):
    pass


@dataclass(frozen=True)
class ColumnMeta:
    column_index: int
    direction_id: int
    audio_id: int
    label: str = ""


@dataclass(eq=False)
class MeasurementMatrix:
    data: np.ndarray
    columns: list[ColumnMeta]
    grid_id: str
    stft_config_hash: str = ""
    stft_config: dict | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("measurement matrix must be two-dimensional")
        p, q = self.data.shape
        if p != grid_size(self.grid_id):
            raise ValueError(f"matrix has {p} rows but grid {self.grid_id} has {grid_size(self.grid_id)} bins")
        if q != len(self.columns):
            raise ValueError(f"matrix has {q} columns but {len(self.columns)} column records")
        if np.any(self.data < 0):
            raise ValueError("measurement matrix entries must be non-negative")
        if np.any(~self.data.any(axis=0)):
            raise ValueError("zero column in measurement matrix")
        pairs = [(c.direction_id, c.audio_id) for c in self.columns]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (direction, audio) columns")
        if [c.column_index for c in self.columns] != list(range(q)):
            raise ValueError("column indices must be 0..Q-1 in order")
        self._lookup = {pair: i for i, pair in enumerate(pairs)}
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def index_of(self, direction_id: int, audio_id: int) -> int:
        try:
            return self._lookup[(direction_id, audio_id)]
        except KeyError:
            raise KeyError(f"no column for direction {direction_id}, audio {audio_id}") from None

    def __eq__(self, other):
        if not isinstance(other, MeasurementMatrix):
            return NotImplemented
        return (
            self.grid_id == other.grid_id
            and self.stft_config_hash == other.stft_config_hash
            and self.columns == other.columns
            and np.array_equal(self.data, other.data)
        )


def train_dictionary(
    renders: Sequence[tuple[int, int, Sequence[MagnitudeSpectrum]]],
    labels: dict[int, str] | None = None,
    stft: StftConfig | None = None,
    unit_mass: bool = False,
) -> MeasurementMatrix:
    """Average each class's frame spectra into one column.

    ``renders`` holds ``(direction_id, audio_id, frames)`` triples; columns
    come out sorted by ``(direction_id, audio_id)``. With ``unit_mass`` every
    column is rescaled to sum to one, which matches how test frames are
    normalised before recovery.
    """
    if not renders:
        raise ValueError("no training renders")
    grids = set()
    columns: dict[tuple[int, int], np.ndarray] = {}
    for direction_id, audio_id, frames in renders:
        key = (int(direction_id), int(audio_id))
        if not frames:
            raise ValueError(f"class {key} has no frames")
        if key in columns:
            raise ValueError(f"class {key} rendered twice")
        grids.update(f.grid_id for f in frames)
        columns[key] = np.mean([f.values for f in frames], axis=0)
    if len(grids) != 1:
        raise GridMismatchError(f"training frames on different grids: {sorted(grids)}")
    grid = grids.pop()
    if stft is not None and stft.grid_id != grid:
        raise GridMismatchError(f"frames on {grid}, config says {stft.grid_id}")
    keys = sorted(columns)
    for key in keys:
        if not columns[key].any():
            raise ValueError(f"zero column for class {key}")
    labels = labels or {}
    meta = [ColumnMeta(i, d, a, labels.get(a, "")) for i, (d, a) in enumerate(keys)]
    data = np.stack([columns[k] for k in keys], axis=1)
    if unit_mass:
        data = data / data.sum(axis=0)
    return MeasurementMatrix(
        data,
        meta,
        grid,
        stft.config_hash() if stft else "",
        asdict(stft) if stft else None,
    )


def column(m: MeasurementMatrix, direction_id: int, audio_id: int) -> tuple[np.ndarray, ColumnMeta]:
    i = m.index_of(direction_id, audio_id)
    return m.data[:, i].copy(), m.columns[i]


def column_spectrum(m: MeasurementMatrix, index: int) -> MagnitudeSpectrum:
    return MagnitudeSpectrum(m.data[:, index], m.grid_id)


def _payload(m: MeasurementMatrix) -> bytes:
    return m.data.astype("<f8").tobytes(order="F")


def save_dictionary(m: MeasurementMatrix, path: str | Path) -> None:
    """Write a JSON header line followed by the column-major float64 payload."""
    payload = _payload(m)
    header = {
        "magic": MAGIC,
        "P": m.shape[0],
        "Q": m.shape[1],
        "grid_id": m.grid_id,
        "stft_config": m.stft_config,
        "stft_config_hash": m.stft_config_hash,
        "columns": [asdict(c) for c in m.columns],
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        fh.write(payload)


def load_dictionary(path: str | Path) -> MeasurementMatrix:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise HeaderError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise HeaderError(f"{path}: bad magic")
    try:
        p, q = int(header["P"]), int(header["Q"])
        cols = [ColumnMeta(**c) for c in header["columns"]]
        grid_id = header["grid_id"]
        checksum = header["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: incomplete header ({exc})") from None
    if len(cols) != q:
        raise HeaderError(f"{path}: header declares Q={q} but lists {len(cols)} columns")
    payload = raw[newline + 1 :]
    if len(payload) != 8 * p * q:
        raise PayloadSizeError(f"{path}: payload size mismatch ({len(payload)} bytes, expected {8 * p * q})")
    if "sha256:" + hashlib.sha256(payload).hexdigest() != checksum:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    cfg_doc, cfg_hash = header.get("stft_config"), header.get("stft_config_hash", "")
    if cfg_doc is not None:
        try:
            recomputed = StftConfig(**cfg_doc).config_hash()
        except (TypeError, ValueError) as exc:
            raise HeaderError(f"{path}: invalid stft_config ({exc})") from None
        if recomputed != cfg_hash:
            raise HeaderError(f"{path}: stft_config does not match its hash")
        if StftConfig(**cfg_doc).grid_id != grid_id:
            raise HeaderError(f"{path}: stft_config does not match grid {grid_id}")
    data = np.frombuffer(payload, dtype="<f8").reshape((p, q), order="F")
    return MeasurementMatrix(data.copy(), cols, grid_id, cfg_hash, cfg_doc)
