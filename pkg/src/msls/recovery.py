"""Variable-sparsity PCA, orthogonal matching pursuit and frame voting.

The pipeline per test frame is: divide the measured spectrum by the sparsity
``k``, centre and project it with the VSPCA basis fitted on the dictionary,
run ``k`` OMP iterations against the projected dictionary columns, and
finally tally the per-frame supports into a single ``k``-element answer.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dictionary import MeasurementMatrix
from .spectra import GridMismatchError, MagnitudeSpectrum


@dataclass(eq=False)
class VspcaModel:
    mean: np.ndarray
    basis: np.ndarray
    variance_threshold: float
    retained_variance: float = 1.0
    grid_id: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.basis = np.atleast_2d(np.asarray(self.basis, dtype=float))
        if self.basis.shape[1] != self.mean.size:
            raise ValueError("basis width does not match the mean vector")

    @property
    def retained_dim(self) -> int:
        return self.basis.shape[0]

    def __eq__(self, other):
        if not isinstance(other, VspcaModel):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.basis, other.basis)
            and self.variance_threshold == other.variance_threshold
            and self.grid_id == other.grid_id
        )


@dataclass(frozen=True)
class ObjectVector:
    support: tuple[int, ...]
    weights: tuple[float, ...]
    residual_norm: float
    history: tuple[float, ...] = ()

    def as_dense(self, q: int) -> np.ndarray:
        s = np.zeros(q)
        s[list(self.support)] = self.weights
        return s


@dataclass(frozen=True)
class VoteResult:
    per_index_votes: dict[int, int]
    final_support: tuple[int, ...]
    frames_used: int
    weight_sums: dict[int, float] = field(default_factory=dict)


def _as_matrix(a: MeasurementMatrix | np.ndarray) -> tuple[np.ndarray, str]:
    if isinstance(a, MeasurementMatrix):
        return a.data, a.grid_id
    return np.asarray(a, dtype=float), ""


def fit_vspca(a: MeasurementMatrix | np.ndarray, variance_threshold: float = 0.99) -> VspcaModel:
    """Principal basis of the mean-centred dictionary columns.

    Keeps the fewest components whose share of the centred variance reaches
    ``variance_threshold``. Each component is signed so that its
    largest-magnitude entry is positive.
    """
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError(f"variance_threshold must lie in (0, 1], got {variance_threshold}")
    data, grid = _as_matrix(a)
    p, q = data.shape
    if q < 2:
        raise ValueError("need at least two dictionary columns")
    mean = data.mean(axis=1)
    centred = data - mean[:, None]
    u, s, _ = np.linalg.svd(centred, full_matrices=False)
    var = s**2
    total = var.sum()
    if s.size == 0 or s[0] <= 0 or total <= 0:
        raise ValueError("degenerate dictionary: columns have no variance")
    rank = int(np.sum(s > s[0] * max(p, q) * np.finfo(float).eps))
    frac = np.cumsum(var) / total
    d = min(int(np.searchsorted(frac, variance_threshold - 1e-12)) + 1, rank)
    basis = u[:, :d].T.copy()
    peak = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(d), peak])
    basis *= signs[:, None]
    return VspcaModel(mean, basis, variance_threshold, float(frac[d - 1]), grid)


def vspca_transform(model: VspcaModel, x: MagnitudeSpectrum | np.ndarray, k: int = 1) -> np.ndarray:
    """Project ``x / k`` after removing the training mean."""
    if k < 1:
        raise ValueError("sparsity k must be at least 1")
    if isinstance(x, MagnitudeSpectrum):
        if model.grid_id and x.grid_id != model.grid_id:
            raise GridMismatchError(f"{x.grid_id} != {model.grid_id}")
        x = x.values
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.mean.size:
        raise ValueError(f"expected {model.mean.size} bins, got {x.shape[0]}")
    if x.ndim == 2:
        return model.basis @ (x / k - model.mean[:, None])
    return model.basis @ (x / k - model.mean)


def transform_dictionary(model: VspcaModel, a: MeasurementMatrix | np.ndarray) -> np.ndarray:
    """Every dictionary column projected with ``k = 1``; shape ``(d, Q)``."""
    data, _ = _as_matrix(a)
    return vspca_transform(model, data, 1)


def omp(
    atoms: np.ndarray,
    y: np.ndarray,
    k: int,
    tol_abs: float = 1e-10,
    tol_corr: float = 1e-12,
) -> ObjectVector:
    """Orthogonal matching pursuit with at most ``k`` iterations.

    Each step picks the unused atom with the largest normalised correlation
    against the residual, then refits all picked atoms by least squares.
    Stops early once the residual or the best correlation falls below
    tolerance.
    """
    a = np.asarray(atoms, dtype=float)
    y = np.asarray(y, dtype=float)
    if a.ndim != 2 or y.shape != (a.shape[0],):
        raise ValueError(f"shape mismatch: atoms {a.shape}, observation {y.shape}")
    n_atoms = a.shape[1]
    if k < 1:
        raise ValueError("sparsity k must be at least 1")
    if k > n_atoms:
        raise ValueError(f"sparsity k={k} exceeds the number of atoms {n_atoms}")
    norms = np.linalg.norm(a, axis=0)
    usable = norms > 0
    if not usable.any():
        raise ValueError("all atoms are zero")
    inv_norm = np.where(usable, 1.0 / np.where(usable, norms, 1.0), 0.0)

    support: list[int] = []
    weights = np.zeros(0)
    residual = y.copy()
    rnorm = float(np.linalg.norm(residual))
    history = [rnorm]
    for _ in range(k):
        if rnorm < tol_abs:
            break
        corr = np.abs(a.T @ residual) * inv_norm
        corr[~usable] = -np.inf
        corr[support] = -np.inf
        best = int(np.argmax(corr))
        if not corr[best] >= tol_corr:
            break
        support.append(best)
        sub = a[:, support]
        weights, *_ = np.linalg.lstsq(sub, y, rcond=None)
        residual = y - sub @ weights
        rnorm = float(np.linalg.norm(residual))
        history.append(rnorm)
    return ObjectVector(tuple(support), tuple(float(w) for w in weights), rnorm, tuple(history))


def recover_frame(
    dictionary: MeasurementMatrix,
    vspca: VspcaModel,
    frame: MagnitudeSpectrum,
    k: int,
    atoms: np.ndarray | None = None,
    **omp_kwargs,
) -> ObjectVector:
    """Sparse code of one measured frame; ``atoms`` may carry a precomputed projected dictionary."""
    if frame.grid_id != dictionary.grid_id:
        raise GridMismatchError(f"frame on {frame.grid_id}, dictionary on {dictionary.grid_id}")
    if atoms is None:
        atoms = transform_dictionary(vspca, dictionary)
    return omp(atoms, vspca_transform(vspca, frame, k), k, **omp_kwargs)


def majority_vote(frame_results: Sequence[ObjectVector], k: int) -> VoteResult:
    """One vote per atom per frame; the ``k`` most-voted atoms win.

    Ties go to the larger summed ``|weight|``, then to the lower index.
    """
    if not frame_results:
        raise ValueError("no frame results to vote on")
    votes: Counter[int] = Counter()
    wsum: defaultdict[int, float] = defaultdict(float)
    for res in frame_results:
        for idx, w in zip(res.support, res.weights):
            votes[idx] += 1
            wsum[idx] += abs(w)
    ranked = sorted(votes, key=lambda i: (-votes[i], -wsum[i], i))
    return VoteResult(dict(votes), tuple(ranked[:k]), len(frame_results), dict(wsum))


def reconstruct_sources(v: VoteResult, dictionary: MeasurementMatrix) -> list[tuple[int, int]]:
    out = []
    for idx in v.final_support:
        if not 0 <= idx < len(dictionary.columns):
            raise IndexError(f"support index {idx} outside dictionary of {len(dictionary.columns)} columns")
        meta = dictionary.columns[idx]
        out.append((meta.direction_id, meta.audio_id))
    return out


def save_vspca(model: VspcaModel, path: str | Path) -> None:
    doc = {
        "format": "msls-vspca-1",
        "grid_id": model.grid_id,
        "variance_threshold": model.variance_threshold,
        "retained_variance": model.retained_variance,
        "d": model.retained_dim,
        "mean": model.mean.tolist(),
        "basis": model.basis.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_vspca(path: str | Path) -> VspcaModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "msls-vspca-1":
        raise ValueError(f"{path}: not a VSPCA model file")
    basis = np.asarray(doc["basis"], dtype=float).reshape(int(doc["d"]), -1)
    return VspcaModel(doc["mean"], basis, doc["variance_threshold"], doc["retained_variance"], doc["grid_id"])
