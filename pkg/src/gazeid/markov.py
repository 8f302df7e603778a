"""Markov scanpath model: a multinomial over saccade types plus per-type
Gamma channels, with fitting, log-likelihood, analytic gradient, and
generative sampling.

The base configuration models saccade amplitude and the following fixation
duration; the saccade-dynamics configuration adds mean velocity, mean
absolute acceleration, per-axis acceleration ratios, and per-axis vigor.
All channel blocks share one structure, so the two configurations differ
only in their channel set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma

from .core import (
    BASE_CHANNELS,
    DYNAMICS_CHANNELS,
    SaccadeFeatures,
    Scanpath,
)
from .distributions import (
    ConvergenceError,
    DegenerateSampleError,
    GammaParams,
    N_SACCADE_TYPES,
    as_rng,
    gamma_logpdf,
    gamma_mle,
    multinomial_mle,
)

# Direction-change bins (degrees) used when reconstructing positions for
# sampled saccades of each type; the 1e-9 inset keeps drawn angles strictly
# inside the half-open classification bins.
_TYPE_BINS = {1: (-45.0, 45.0), 2: (-135.0, -45.0), 3: (45.0, 135.0), 4: (135.0, 225.0)}
_BIN_INSET = 1e-9


def canonical_channels(channels: Sequence[str]) -> tuple[str, ...]:
    """Order a channel set by the fixed model order."""
    requested = set(channels)
    unknown = requested - set(DYNAMICS_CHANNELS)
    if unknown:
        raise ValueError(f"unknown channels: {sorted(unknown)}")
    return tuple(ch for ch in DYNAMICS_CHANNELS if ch in requested)


@dataclass(frozen=True)
class MarkovFitReport:
    """Cells that fell back to the channel's pooled-across-types fit."""

    fallback_cells: tuple[tuple[str, int], ...] = ()
    skipped_values: int = 0


@dataclass(frozen=True)
class MarkovModelParams:
    """Type probabilities plus per-(channel, type) Gamma parameters.

    ``pi`` is stored as a raw positive vector rather than a strict
    MultinomialParams: gradient checks probe the likelihood at perturbed,
    unrenormalized pi coordinates (the scores are the unconstrained
    categorical derivatives K_u / pi_u). Fitted models always carry a
    proper probability vector.
    """

    pi: np.ndarray
    channels: dict[str, tuple[GammaParams, ...]]
    b_star: float | None = None
    fit_report: MarkovFitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if pi.shape != (N_SACCADE_TYPES,):
            raise ValueError(f"pi must have shape ({N_SACCADE_TYPES},)")
        if not np.all(np.isfinite(pi)) or np.any(pi <= 0):
            raise ValueError("pi entries must be positive and finite")
        ordered = {ch: tuple(self.channels[ch]) for ch in canonical_channels(self.channels)}
        if len(ordered) != len(self.channels):
            raise ValueError("duplicate channels")
        object.__setattr__(self, "channels", ordered)
        for ch, cells in ordered.items():
            if len(cells) != N_SACCADE_TYPES:
                raise ValueError(f"channel {ch!r} needs {N_SACCADE_TYPES} Gamma cells")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(self.channels)

    @property
    def config(self) -> str:
        names = self.channel_names
        if names == BASE_CHANNELS:
            return "base"
        if names == DYNAMICS_CHANNELS:
            return "dynamics"
        return "custom"

    @property
    def dim(self) -> int:
        """Gradient/parameter vector length: 4 + 8 * number of channels."""
        return N_SACCADE_TYPES * (1 + 2 * len(self.channels))


def params_to_vector(params: MarkovModelParams) -> np.ndarray:
    """Flatten to per-type blocks [pi_u, (alpha, beta) per channel]."""
    out = []
    for u in range(N_SACCADE_TYPES):
        out.append(params.pi[u])
        for cells in params.channels.values():
            out.extend((cells[u].shape, cells[u].scale))
    return np.array(out)


def vector_to_params(
    vec: np.ndarray, channel_names: Sequence[str], b_star: float | None = None
) -> MarkovModelParams:
    names = canonical_channels(channel_names)
    block = 1 + 2 * len(names)
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (N_SACCADE_TYPES * block,):
        raise ValueError(f"expected vector of length {N_SACCADE_TYPES * block}, got {vec.shape}")
    pi = np.empty(N_SACCADE_TYPES)
    cells: dict[str, list[GammaParams]] = {ch: [] for ch in names}
    for u in range(N_SACCADE_TYPES):
        b = vec[u * block : (u + 1) * block]
        pi[u] = b[0]
        for i, ch in enumerate(names):
            cells[ch].append(GammaParams(shape=float(b[1 + 2 * i]), scale=float(b[2 + 2 * i])))
    return MarkovModelParams(
        pi=pi,
        channels={ch: tuple(v) for ch, v in cells.items()},
        b_star=b_star,
    )


def _channel_matrix(features: Sequence[SaccadeFeatures], names: Sequence[str]) -> np.ndarray:
    """(n_channels, n_saccades) value matrix; invalid entries are NaN."""
    return np.array(
        [[f.channel_value(ch) for f in features] for ch in names], dtype=float
    ).reshape(len(names), len(features))


def fit(
    data: Sequence[Sequence[SaccadeFeatures]],
    channels: Sequence[str] = BASE_CHANNELS,
    b_star: float | None = None,
) -> MarkovModelParams:
    """Factorized maximum likelihood over pooled training scanpaths.

    Type probabilities come from pooled type counts; each (channel, type)
    cell gets its own Gamma MLE. A cell with fewer than two usable samples
    (or a degenerate one) falls back to the channel's pooled-across-types
    fit, recorded in the fit report.
    """
    names = canonical_channels(channels)
    pooled = [f for path in data for f in path]
    if not pooled:
        raise ValueError("no saccades in training data")
    types = np.array([f.saccade_type for f in pooled], dtype=int)
    counts = np.bincount(types - 1, minlength=N_SACCADE_TYPES).astype(float)
    pi = multinomial_mle(counts).pi

    values = _channel_matrix(pooled, names)
    valid = np.isfinite(values) & (values > 0)
    skipped = int(np.size(values) - valid.sum()) if values.size else 0

    cells: dict[str, tuple[GammaParams, ...]] = {}
    fallbacks: list[tuple[str, int]] = []
    for i, ch in enumerate(names):
        ch_valid = valid[i]
        pooled_vals = values[i][ch_valid]
        pooled_fit: GammaParams | None = None
        per_type = []
        for u in range(1, N_SACCADE_TYPES + 1):
            cell_vals = values[i][ch_valid & (types == u)]
            try:
                if cell_vals.size < 2:
                    raise DegenerateSampleError(f"{cell_vals.size} samples")
                per_type.append(gamma_mle(cell_vals))
            except (DegenerateSampleError, ConvergenceError):
                if pooled_fit is None:
                    pooled_fit = gamma_mle(pooled_vals)
                per_type.append(pooled_fit)
                fallbacks.append((ch, u))
        cells[ch] = tuple(per_type)

    return MarkovModelParams(
        pi=pi,
        channels=cells,
        b_star=b_star,
        fit_report=MarkovFitReport(fallback_cells=tuple(fallbacks), skipped_values=skipped),
    )


@dataclass
class LikelihoodDiagnostics:
    """Counts of channel values skipped as non-positive or undefined."""

    skipped: dict[str, int] = field(default_factory=dict)

    def add(self, channel: str, n: int) -> None:
        self.skipped[channel] = self.skipped.get(channel, 0) + n


def loglik(
    features: Sequence[SaccadeFeatures],
    params: MarkovModelParams,
    diagnostics: LikelihoodDiagnostics | None = None,
) -> float:
    """Scanpath log-likelihood under the factorized model.

    Uses the categorical form sum_t ln pi_{u_t}; the parameter-free
    multinomial coefficient is omitted, so values are comparable across
    parameter settings but are not normalized counts-likelihoods.
    """
    if not features:
        raise ValueError("features must be non-empty")
    types = np.array([f.saccade_type for f in features], dtype=int)
    total = float(np.sum(np.log(params.pi[types - 1])))
    names = params.channel_names
    values = _channel_matrix(features, names)
    valid = np.isfinite(values) & (values > 0)
    for i, ch in enumerate(names):
        n_skip = int(values.shape[1] - valid[i].sum())
        if n_skip and diagnostics is not None:
            diagnostics.add(ch, n_skip)
        for u in range(1, N_SACCADE_TYPES + 1):
            mask = valid[i] & (types == u)
            if mask.any():
                total += float(np.sum(gamma_logpdf(values[i][mask], params.channels[ch][u - 1])))
    return total


def grad_loglik(features: Sequence[SaccadeFeatures], params: MarkovModelParams) -> np.ndarray:
    """Gradient of ``loglik`` with respect to the flattened parameter vector.

    Layout matches ``params_to_vector``: per-type blocks of
    [K_u / pi_u, then per channel (d/d shape, d/d scale) sums]. The pi
    coordinates are the unconstrained categorical derivatives K_u / pi_u.
    Values skipped by ``loglik`` are excluded here symmetrically.
    """
    if not features:
        raise ValueError("features must be non-empty")
    types = np.array([f.saccade_type for f in features], dtype=int)
    names = params.channel_names
    values = _channel_matrix(features, names)
    valid = np.isfinite(values) & (values > 0)

    block = 1 + 2 * len(names)
    grad = np.zeros(N_SACCADE_TYPES * block)
    for u in range(1, N_SACCADE_TYPES + 1):
        type_mask = types == u
        base = (u - 1) * block
        grad[base] = type_mask.sum() / params.pi[u - 1]
        for i, ch in enumerate(names):
            mask = valid[i] & type_mask
            if not mask.any():
                continue
            x = values[i][mask]
            g = params.channels[ch][u - 1]
            grad[base + 1 + 2 * i] = float(
                np.sum(np.log(x)) - x.size * (digamma(g.shape) + math.log(g.scale))
            )
            grad[base + 2 + 2 * i] = float(np.sum(x / g.scale - g.shape) / g.scale)
    return grad


def sample_scanpath(
    params: MarkovModelParams,
    n_fixations: int,
    start: tuple[float, float] = (0.0, 0.0),
    seed_or_rng=0,
    subject_id: str = "",
    image_id: str = "",
) -> tuple[Scanpath, list[SaccadeFeatures]]:
    """Draw a scanpath of ``n_fixations`` fixations from the model.

    Saccade types and channel values follow the generative process; the
    position trace is reconstructed by rotating the previous direction by
    an angle drawn uniformly inside the sampled type's bin and stepping by
    the sampled amplitude, so re-extracting features recovers the drawn
    types, amplitudes, and durations. Channel values without a spatial
    footprint (velocities, ratios, vigor) are carried in the returned
    feature records. Deterministic for a given seed.
    """
    if n_fixations < 2:
        raise ValueError("need at least 2 fixations")
    rng = as_rng(seed_or_rng)
    names = params.channel_names
    if "amplitude" not in names or "duration" not in names:
        raise ValueError("sampling requires amplitude and duration channels")
    n_sacc = n_fixations - 1

    pi = params.pi
    first_type = int(rng.choice(N_SACCADE_TYPES, p=pi / pi.sum())) + 1
    dur_cells = params.channels["duration"]
    first_duration = float(
        rng.gamma(dur_cells[first_type - 1].shape, dur_cells[first_type - 1].scale)
    )

    types = rng.choice(N_SACCADE_TYPES, size=n_sacc, p=pi / pi.sum()) + 1
    deltas = np.empty(n_sacc)
    for t, u in enumerate(types):
        lo, hi = _TYPE_BINS[int(u)]
        deltas[t] = rng.uniform(lo + _BIN_INSET, hi - _BIN_INSET)

    drawn: dict[str, np.ndarray] = {}
    for ch in names:
        cells = params.channels[ch]
        shapes = np.array([cells[u - 1].shape for u in types])
        scales = np.array([cells[u - 1].scale for u in types])
        drawn[ch] = rng.gamma(shapes, scales)

    positions = np.empty((n_fixations, 2))
    positions[0] = start
    durations = np.empty(n_fixations)
    durations[0] = first_duration
    direction = 0.0
    features = []
    for t in range(n_sacc):
        direction = float(((direction + deltas[t]) + 180.0) % 360.0 - 180.0)
        if direction == -180.0:
            direction = 180.0
        amp = float(drawn["amplitude"][t])
        rad = math.radians(direction)
        positions[t + 1] = positions[t] + amp * np.array([math.cos(rad), math.sin(rad)])
        durations[t + 1] = drawn["duration"][t]
        extras = {
            attr: float(drawn[ch][t])
            for ch, attr in (
                ("velocity", "mean_velocity"),
                ("acceleration", "mean_abs_acceleration"),
                ("ratio_x", "accel_ratio_x"),
                ("ratio_y", "accel_ratio_y"),
                ("vigor_x", "vigor_x"),
                ("vigor_y", "vigor_y"),
            )
            if ch in drawn
        }
        features.append(
            SaccadeFeatures(
                saccade_type=int(types[t]),
                amplitude=amp,
                duration=float(drawn["duration"][t]),
                direction=direction,
                **extras,
            )
        )
    path = Scanpath(
        positions=positions, durations=durations, subject_id=subject_id, image_id=image_id
    )
    return path, features


def bayes_identify(
    per_image_features: Sequence[Sequence[SaccadeFeatures]],
    user_params: Sequence[MarkovModelParams],
) -> int:
    """Index of the user whose model maximizes the summed log-likelihood.

    Ties break toward the lowest user index.
    """
    if not user_params:
        raise ValueError("need at least one user model")
    totals = np.array(
        [sum(loglik(feats, m) for feats in per_image_features) for m in user_params]
    )
    return int(np.argmax(totals))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def params_to_json_dict(params: MarkovModelParams) -> dict:
    return {
        "config": params.config,
        "pi": [float(v) for v in params.pi],
        "channels": {
            ch: [{"alpha": c.shape, "beta": c.scale} for c in cells]
            for ch, cells in params.channels.items()
        },
        "b_star": params.b_star,
    }


def params_from_json_dict(doc: dict) -> MarkovModelParams:
    channels = {
        ch: tuple(GammaParams(shape=c["alpha"], scale=c["beta"]) for c in cells)
        for ch, cells in doc["channels"].items()
    }
    return MarkovModelParams(
        pi=np.asarray(doc["pi"], dtype=float),
        channels=channels,
        b_star=doc.get("b_star"),
    )


def save_params_json(params: MarkovModelParams, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_json_dict(params), fh, indent=2)


def load_params_json(path: str | Path) -> MarkovModelParams:
    with open(path) as fh:
        return params_from_json_dict(json.load(fh))


def default_params(channels: Sequence[str] = BASE_CHANNELS) -> MarkovModelParams:
    """A plausible scene-viewing model used as a simulation baseline.

    Amplitudes of a few degrees, fixation durations around 250 ms, mean
    saccade velocities around 150 deg/s, with mild per-type variation.
    """
    names = canonical_channels(channels)
    per_type = {
        "amplitude": [(2.6, 1.6), (2.2, 1.3), (2.3, 1.4), (3.0, 1.1)],
        "duration": [(7.0, 34.0), (6.0, 40.0), (6.5, 38.0), (5.5, 44.0)],
        "velocity": [(9.0, 17.0), (8.0, 18.0), (8.5, 17.5), (10.0, 16.0)],
        "acceleration": [(6.0, 900.0), (5.5, 950.0), (5.8, 920.0), (6.5, 850.0)],
        "ratio_x": [(8.0, 0.14), (7.5, 0.15), (7.8, 0.145), (8.5, 0.13)],
        "ratio_y": [(7.0, 0.16), (6.8, 0.165), (7.2, 0.155), (7.5, 0.15)],
        "vigor_x": [(10.0, 40.0), (9.0, 44.0), (9.5, 42.0), (11.0, 38.0)],
        "vigor_y": [(9.0, 38.0), (8.5, 41.0), (9.2, 39.0), (10.0, 36.0)],
    }
    cells = {
        ch: tuple(GammaParams(shape=a, scale=b) for a, b in per_type[ch]) for ch in names
    }
    return MarkovModelParams(
        pi=np.array([0.45, 0.22, 0.21, 0.12]),
        channels=cells,
        b_star=3.0 if set(names) >= {"vigor_x"} else None,
    )
