"""Fisher scores, empirical Fisher information, whitened feature maps.

A fitted generative model turns each scanpath into the gradient of its
log-likelihood at the pooled maximum-likelihood estimate. The empirical
second moment of those gradients, ridge-regularized, whitens them into the
feature space whose inner product is the kernel used by the classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_RIDGE = 1e-3


@dataclass(frozen=True)
class FisherScore:
    """Log-likelihood gradient of one item under the pooled model."""

    g: np.ndarray
    model_tag: str
    subject_id: str = ""
    image_id: str = ""

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        object.__setattr__(self, "g", g)
        if g.ndim != 1:
            raise ValueError("score must be a vector")
        if not np.all(np.isfinite(g)):
            raise ValueError("score entries must be finite")


@dataclass(frozen=True)
class FisherInformation:
    """Empirical information (1/N) sum g g^T with a scaled ridge.

    ``factor`` is the lower Cholesky factor of matrix + ridge * Id where
    ridge = eps_reg * trace / dim; whitening solves factor @ phi = g.
    """

    matrix: np.ndarray
    eps_reg: float
    n_scores: int
    factor: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def ridge(self) -> float:
        return self.eps_reg * float(np.trace(self.matrix)) / self.dim


def estimate_information(scores: Sequence[FisherScore], eps_reg: float = DEFAULT_RIDGE) -> FisherInformation:
    """Average outer product of the scores, regularized and factorized.

    Summation order is fixed (list order) for bit-reproducibility.
    """
    if not scores:
        raise ValueError("need at least one score")
    if not eps_reg > 0:
        raise ValueError("eps_reg must be positive")
    dim = scores[0].g.size
    info = np.zeros((dim, dim))
    for s in scores:
        if s.g.size != dim:
            raise ValueError(f"score dimension {s.g.size} does not match {dim}")
        info += np.outer(s.g, s.g)
    info /= len(scores)
    ridge = eps_reg * float(np.trace(info)) / dim
    if not ridge > 0:
        raise ValueError("information trace is zero; all scores vanish")
    factor = np.linalg.cholesky(info + ridge * np.eye(dim))
    return FisherInformation(matrix=info, eps_reg=eps_reg, n_scores=len(scores), factor=factor)


def compute_scores(
    items: Iterable[Any],
    grad_fn: Callable[[Any], np.ndarray],
    model_tag: str,
    ids: Callable[[Any], tuple[str, str]] | None = None,
) -> list[FisherScore]:
    """One FisherScore per item via the model's log-likelihood gradient.

    ``ids`` optionally extracts (subject_id, image_id) for export.
    """
    out = []
    for item in items:
        subject_id, image_id = ids(item) if ids is not None else ("", "")
        out.append(
            FisherScore(
                g=np.asarray(grad_fn(item), dtype=float),
                model_tag=model_tag,
                subject_id=subject_id,
                image_id=image_id,
            )
        )
    return out


def feature_map(score: FisherScore | np.ndarray, info: FisherInformation, normalize: bool = False) -> np.ndarray:
    """Whitened feature vector phi = factor^{-1} g by forward substitution.

    With ``normalize`` the vector is scaled to unit L2 norm (gradient
    magnitudes grow with scanpath length, which otherwise leaks length
    into the classifier).
    """
    g = score.g if isinstance(score, FisherScore) else np.asarray(score, dtype=float)
    if g.size != info.dim:
        raise ValueError(f"score dimension {g.size} does not match information dim {info.dim}")
    phi = solve_triangular(info.factor, g, lower=True)
    if normalize:
        norm = float(np.linalg.norm(phi))
        if norm > 0:
            phi = phi / norm
    return phi


def kernel(
    score_i: FisherScore | np.ndarray,
    score_j: FisherScore | np.ndarray,
    info: FisherInformation,
    normalize: bool = False,
) -> float:
    """Inner product in the whitened space: g_i^T (I + ridge)^{-1} g_j."""
    return float(feature_map(score_i, info, normalize) @ feature_map(score_j, info, normalize))


def export_features_csv(
    scores: Sequence[FisherScore],
    info: FisherInformation,
    csv_path: str | Path,
    normalize: bool = False,
) -> None:
    """One row per item: subject_id, image_id, phi_1..phi_dim."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "image_id"] + [f"phi_{k + 1}" for k in range(info.dim)])
        for s in scores:
            phi = feature_map(s, info, normalize)
            writer.writerow([s.subject_id, s.image_id] + [repr(float(v)) for v in phi])


def load_features_csv(csv_path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """Read an exported feature matrix: (subject_ids, image_ids, matrix)."""
    csv_path = Path(csv_path)
    subjects, images, rows = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["subject_id", "image_id"]:
            raise ValueError(f"{csv_path}: expected subject_id,image_id,phi_* header, got {header[:2]}")
        width = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(
                    f"{csv_path}: row {lineno} has {len(row)} columns, expected {len(header)}"
                )
            subjects.append(row[0])
            images.append(row[1])
            try:
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ValueError(f"{csv_path}: row {lineno}: {exc}") from exc
    return subjects, images, np.asarray(rows, dtype=float).reshape(len(rows), width)
