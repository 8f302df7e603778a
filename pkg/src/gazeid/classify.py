"""Multiclass linear classifier over Fisher features and the evaluation
harness: image-disjoint splits, cross-validated hyperparameter search, and
accuracy as a function of the number of test images.

Six model families are evaluated: generative Bayes identification and
Fisher-SVM classification, each over the base Markov model, the Markov
model with saccade dynamics, or the saliency-walk model.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fisher, markov, scenewalk
from .core import BASE_CHANNELS, DYNAMICS_CHANNELS, extract_features
from .dataset import DatasetItem, GazeDataset

FAMILIES = (
    "bayes-markov",
    "bayes-markov-dyn",
    "bayes-scenewalk",
    "fisher-svm-markov",
    "fisher-svm-markov-dyn",
    "fisher-svm-scenewalk",
)


# ---------------------------------------------------------------------------
# Linear one-vs-rest SVM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModel:
    """One weight vector per class; the last weight is the bias term."""

    weights: np.ndarray
    classes: tuple[str, ...]
    C: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != len(self.classes):
            raise ValueError("weights must have one row per class")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")


def train(
    features: np.ndarray,
    labels: Sequence[str],
    C: float = 1.0,
    seed: int = 0,
    max_epochs: int = 1000,
    tol: float = 1e-6,
) -> LinearModel:
    """One-vs-rest L2-regularized hinge-loss training by dual coordinate
    descent on explicit feature vectors.

    All one-vs-rest subproblems share the per-epoch visiting order (a
    permutation drawn from ``seed``) and are updated in lockstep, which
    keeps the solver deterministic and lets the inner step be vectorized
    over classes. Stops when every subproblem's largest projected-gradient
    violation falls below ``tol``, when the dual objective improves by
    less than ``tol`` (relative) over an epoch, or after ``max_epochs``.
    """
    X = np.ascontiguousarray(np.asarray(features, dtype=float))
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    labels = list(labels)
    if len(labels) != X.shape[0]:
        raise ValueError("one label per feature row required")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ValueError("training requires at least 2 classes")

    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    n, d = Xb.shape
    sq = np.einsum("ij,ij->i", Xb, Xb)
    label_idx = np.array([classes.index(lbl) for lbl in labels])
    Y = np.where(label_idx[None, :] == np.arange(len(classes))[:, None], 1.0, -1.0)

    rng = np.random.default_rng(seed)
    W = np.zeros((len(classes), d))
    alpha = np.zeros((len(classes), n))
    objective_prev = 0.0
    for epoch in range(max_epochs):
        max_violation = 0.0
        for i in rng.permutation(n):
            xi = Xb[i]
            yi = Y[:, i]
            g = yi * (W @ xi) - 1.0
            a = alpha[:, i]
            pg = np.where(a <= 0.0, np.minimum(g, 0.0), g)
            pg = np.where(a >= C, np.maximum(g, 0.0), pg)
            violation = float(np.max(np.abs(pg)))
            if violation > max_violation:
                max_violation = violation
            if sq[i] > 0 and violation > 1e-14:
                new = np.clip(a - g / sq[i], 0.0, C)
                delta = np.where(np.abs(pg) > 1e-14, new - a, 0.0)
                if np.any(delta != 0.0):
                    alpha[:, i] += delta
                    W += np.outer(delta * yi, xi)
        if max_violation < tol:
            break
        objective = float(alpha.sum() - 0.5 * np.sum(W * W))
        if epoch > 0 and abs(objective - objective_prev) < tol * (1.0 + abs(objective)):
            break
        objective_prev = objective
    return LinearModel(weights=W, classes=classes, C=C)


def decision_scores(model: LinearModel, feature: np.ndarray) -> np.ndarray:
    """Per-class decision values for one feature vector."""
    x = np.asarray(feature, dtype=float)
    if x.size != model.weights.shape[1] - 1:
        raise ValueError(
            f"feature dimension {x.size} does not match model ({model.weights.shape[1] - 1})"
        )
    return model.weights @ np.append(x, 1.0)


def decision_matrix(model: LinearModel, features: np.ndarray) -> np.ndarray:
    """(n_items, n_classes) decision values for a feature matrix."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    return Xb @ model.weights.T


def identify(model: LinearModel, features: np.ndarray) -> str:
    """Class whose summed decision score over the given feature rows is
    largest; ties break toward the lowest class index."""
    total = decision_matrix(model, features).sum(axis=0)
    return model.classes[int(np.argmax(total))]


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalProtocol:
    """Split/CV configuration for ``run_protocol``."""

    train_fraction: float = 0.5
    n_splits: int = 5
    cv_folds: int = 3
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    eps_grid: tuple[float, ...] = (1e-3,)
    normalize_grid: tuple[bool, ...] = (True, False)
    max_k: int = 10
    seed: int = 0
    svm_max_epochs: int = 1000
    scenewalk_rho: float = 1.0
    scenewalk_max_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.n_splits < 1 or self.cv_folds < 1 or self.max_k < 1:
            raise ValueError("n_splits, cv_folds, and max_k must be positive")
        if not (self.c_grid and self.eps_grid and self.normalize_grid):
            raise ValueError("hyperparameter grids must be non-empty")


@dataclass(frozen=True)
class Split:
    """Per-subject image-disjoint train/test partition."""

    train: dict[str, tuple[str, ...]]
    test: dict[str, tuple[str, ...]]


@dataclass(frozen=True)
class AccuracyCurve:
    """Mean accuracy and standard error across splits, per image count k."""

    entries: tuple[tuple[int, float, float], ...]

    def mean_at(self, k: int) -> float:
        for kk, mean, _ in self.entries:
            if kk == k:
                return mean
        raise KeyError(f"no entry for k={k}")


@dataclass(frozen=True)
class ProtocolResult:
    family: str
    curve: AccuracyCurve
    per_split: dict[int, tuple[float, ...]]
    hyperparams: tuple[dict | None, ...]
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "model_family": self.family,
            "splits": len(self.hyperparams),
            "curve": [
                {"k": k, "mean_acc": mean, "stderr": se} for k, mean, se in self.curve.entries
            ],
            "per_split": {str(k): list(v) for k, v in self.per_split.items()},
            "hyperparams_chosen": list(self.hyperparams),
            "warnings": list(self.warnings),
        }


def make_splits(data: GazeDataset, protocol: EvalProtocol) -> list[Split]:
    """Deterministic per-subject image splits; no image is shared between a
    subject's train and test sets."""
    subjects = data.subjects
    roots = np.random.SeedSequence(protocol.seed).spawn(protocol.n_splits)
    splits = []
    for seq in roots:
        rng = np.random.default_rng(seq)
        train: dict[str, tuple[str, ...]] = {}
        test: dict[str, tuple[str, ...]] = {}
        for subject in subjects:
            images = data.images_of(subject)
            if len(images) < 2:
                raise ValueError(
                    f"subject {subject!r} has {len(images)} image(s); need at least 2"
                )
            perm = rng.permutation(len(images))
            n_train = int(round(protocol.train_fraction * len(images)))
            n_train = min(max(n_train, 1), len(images) - 1)
            train[subject] = tuple(images[i] for i in perm[:n_train])
            test[subject] = tuple(images[i] for i in perm[n_train:])
            assert not set(train[subject]) & set(test[subject])
        splits.append(Split(train=train, test=test))
    return splits


def _test_groups(test_images: Sequence[str], k: int) -> list[tuple[str, ...]]:
    """Disjoint consecutive groups of k test images (remainder dropped)."""
    return [tuple(test_images[i : i + k]) for i in range(0, len(test_images) - k + 1, k)]


class _FamilyOps:
    """Per-family generative-model hooks plus item/feature caching."""

    def __init__(self, data: GazeDataset, family: str, protocol: EvalProtocol):
        self.data = data
        self.family = family
        self.index = {(it.subject_id, it.image_id): it for it in data.items}
        self._feature_cache: dict[tuple[str, str], list] = {}
        if family in ("bayes-markov", "fisher-svm-markov"):
            self.kind, self.channels = "markov", BASE_CHANNELS
        elif family in ("bayes-markov-dyn", "fisher-svm-markov-dyn"):
            self.kind, self.channels = "markov", DYNAMICS_CHANNELS
        elif family in ("bayes-scenewalk", "fisher-svm-scenewalk"):
            self.kind, self.channels = "scenewalk", None
            if not data.saliency:
                raise ValueError("scenewalk families require saliency maps in the dataset")
        else:
            raise ValueError(f"unknown model family {family!r}; choose one of {FAMILIES}")
        self.protocol = protocol

    def item(self, subject: str, image: str) -> DatasetItem:
        return self.index[(subject, image)]

    def features(self, subject: str, image: str) -> list:
        key = (subject, image)
        if key not in self._feature_cache:
            item = self.index[key]
            self._feature_cache[key] = (
                list(item.features) if item.features is not None else extract_features(item.scanpath)
            )
        return self._feature_cache[key]

    def fit(self, keys: Sequence[tuple[str, str]]):
        if self.kind == "markov":
            return markov.fit([self.features(*key) for key in keys], self.channels)
        pairs = [
            (self.index[key].scanpath, self.data.saliency[key[1]]) for key in keys
        ]
        return scenewalk.fit(
            pairs,
            rho=self.protocol.scenewalk_rho,
            max_iter=self.protocol.scenewalk_max_iter,
        ).params

    def loglik(self, key: tuple[str, str], params) -> float:
        if self.kind == "markov":
            return markov.loglik(self.features(*key), params)
        item = self.index[key]
        return scenewalk.loglik(item.scanpath, self.data.saliency[key[1]], params)

    def grad(self, key: tuple[str, str], params) -> np.ndarray:
        if self.kind == "markov":
            return markov.grad_loglik(self.features(*key), params)
        item = self.index[key]
        return scenewalk.grad_loglik(item.scanpath, self.data.saliency[key[1]], params)


def _accuracy_from_rows(
    subjects: tuple[str, ...],
    split: Split,
    ks: Sequence[int],
    row_scores: dict[tuple[str, str], np.ndarray],
) -> dict[int, float]:
    """Group accuracies when per-item per-class scores are additive."""
    accuracies = {}
    for k in ks:
        correct = total = 0
        for s_idx, subject in enumerate(subjects):
            for group in _test_groups(split.test[subject], k):
                summed = np.sum([row_scores[(subject, image)] for image in group], axis=0)
                correct += int(np.argmax(summed)) == s_idx
                total += 1
        accuracies[k] = correct / total if total else math.nan
    return accuracies


def _run_bayes_split(ops: _FamilyOps, split: Split, ks: Sequence[int]):
    subjects = ops.data.subjects
    user_models = [
        ops.fit([(s, img) for img in split.train[s]]) for s in subjects
    ]
    # Per-item log-likelihood under every user model; group identification
    # then sums rows, exactly matching bayes_identify's aggregation.
    rows = {
        (subject, image): np.array(
            [ops.loglik((subject, image), m) for m in user_models]
        )
        for subject in subjects
        for image in split.test[subject]
    }
    return _accuracy_from_rows(subjects, split, ks, rows), None


def _cv_folds_of(train_images: Sequence[str], n_folds: int) -> list[tuple[list[str], list[str]]]:
    folds = []
    for f in range(n_folds):
        val = list(train_images[f::n_folds])
        fit = [img for img in train_images if img not in val]
        folds.append((fit, val))
    return folds


def _run_fisher_split(ops: _FamilyOps, split: Split, ks: Sequence[int], svm_seed: int):
    protocol = ops.protocol
    subjects = ops.data.subjects
    train_keys = [(s, img) for s in subjects for img in split.train[s]]
    test_keys = [(s, img) for s in subjects for img in split.test[s]]
    pooled = ops.fit(train_keys)

    raw = {key: ops.grad(key, pooled) for key in train_keys + test_keys}
    train_scores = {key: fisher.FisherScore(g=raw[key], model_tag=ops.family) for key in train_keys}

    if len(subjects) < 2:
        rows = {key: np.array([0.0]) for key in test_keys}
        return _accuracy_from_rows(subjects, split, ks, rows), {"degenerate": True}

    # Hyperparameter search: evaluated on single test images (k = 1) within
    # image-disjoint folds of the training portion. Candidates are ranked
    # by CV accuracy with ties broken toward smaller C, then smaller ridge,
    # then normalization on.
    folds = {s: _cv_folds_of(split.train[s], protocol.cv_folds) for s in subjects}
    candidates = []
    for eps, norm in itertools.product(sorted(protocol.eps_grid), protocol.normalize_grid):
        fold_data = []
        for f in range(protocol.cv_folds):
            fit_keys = [(s, img) for s in subjects for img in folds[s][f][0]]
            val_keys = [(s, img) for s in subjects for img in folds[s][f][1]]
            if not fit_keys or not val_keys or len({s for s, _ in fit_keys}) < 2:
                continue
            info = fisher.estimate_information([train_scores[k_] for k_ in fit_keys], eps)
            X_fit = np.array([fisher.feature_map(raw[k_], info, norm) for k_ in fit_keys])
            X_val = np.array([fisher.feature_map(raw[k_], info, norm) for k_ in val_keys])
            fold_data.append((X_fit, [s for s, _ in fit_keys], X_val, [s for s, _ in val_keys]))
        for C in sorted(protocol.c_grid):
            accs = []
            for X_fit, fit_labels, X_val, val_labels in fold_data:
                model = train(
                    X_fit, fit_labels, C=C, seed=svm_seed, max_epochs=protocol.svm_max_epochs
                )
                pred_idx = np.argmax(decision_matrix(model, X_val), axis=1)
                accs.append(
                    float(np.mean([model.classes[p] == lbl for p, lbl in zip(pred_idx, val_labels)]))
                )
            cv_acc = float(np.mean(accs)) if accs else -1.0
            candidates.append((cv_acc, C, eps, norm))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], not c[3]))
    _, C, eps, norm = candidates[0]

    info = fisher.estimate_information([train_scores[k_] for k_ in train_keys], eps)
    X_train = np.array([fisher.feature_map(raw[k_], info, norm) for k_ in train_keys])
    model = train(
        X_train,
        [s for s, _ in train_keys],
        C=C,
        seed=svm_seed,
        max_epochs=protocol.svm_max_epochs,
    )
    X_test = np.array([fisher.feature_map(raw[k_], info, norm) for k_ in test_keys])
    decisions = decision_matrix(model, X_test)
    class_order = [model.classes.index(s) for s in subjects]
    rows = {
        key: decisions[i][class_order] for i, key in enumerate(test_keys)
    }
    chosen = {"C": C, "eps_reg": eps, "normalize": bool(norm)}
    return _accuracy_from_rows(subjects, split, ks, rows), chosen


def run_protocol(
    data: GazeDataset,
    family: str,
    protocol: EvalProtocol | None = None,
    threads: int = 1,
) -> ProtocolResult:
    """Full evaluation: splits, per-split fitting/tuning, accuracy curve.

    Bayes families fit one generative model per subject on its training
    images and identify by summed log-likelihood. Fisher families fit one
    pooled generative model per split on all training items, whiten the
    score vectors with the empirical information of the training scores,
    tune (C, ridge, normalization) by image-disjoint CV on the training
    portion, and identify by summed decision scores. Accuracy at k
    averages over disjoint consecutive groups of k test images per
    subject; the curve reports mean and standard error across splits.
    Results depend only on (data, family, protocol), not on ``threads``.
    """
    protocol = protocol or EvalProtocol()
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; choose one of {FAMILIES}")
    ops = _FamilyOps(data, family, protocol)
    splits = make_splits(data, protocol)

    warnings: list[str] = []
    if len(data.subjects) < 2:
        warnings.append("single-subject dataset: identification accuracy is trivially 1.0")

    min_test = min(len(images) for split in splits for images in split.test.values())
    ks = [k for k in range(1, protocol.max_k + 1) if k <= min_test]

    svm_seeds = [
        int(seq.generate_state(1)[0] % (2**31))
        for seq in np.random.SeedSequence(protocol.seed + 1).spawn(protocol.n_splits)
    ]

    def run_one(idx: int):
        split = splits[idx]
        if family.startswith("bayes"):
            if len(data.subjects) < 2:
                rows = {
                    (s, img): np.array([0.0])
                    for s in data.subjects
                    for img in split.test[s]
                }
                return _accuracy_from_rows(data.subjects, split, ks, rows), None
            return _run_bayes_split(ops, split, ks)
        return _run_fisher_split(ops, split, ks, svm_seeds[idx])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, range(len(splits))))
    else:
        outcomes = [run_one(i) for i in range(len(splits))]

    per_split = {k: tuple(acc[k] for acc, _ in outcomes) for k in ks}
    entries = []
    for k in ks:
        vals = np.array(per_split[k])
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        entries.append((k, float(vals.mean()), se))
    return ProtocolResult(
        family=family,
        curve=AccuracyCurve(entries=tuple(entries)),
        per_split=per_split,
        hyperparams=tuple(chosen for _, chosen in outcomes),
        warnings=tuple(warnings),
    )


def save_results_json(result: ProtocolResult, path: str | Path, extra: dict | None = None) -> None:
    doc = result.to_json_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def save_results_csv(result: ProtocolResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "mean_acc", "stderr"])
        for k, mean, se in result.curve.entries:
            writer.writerow([k, repr(mean), repr(se)])
