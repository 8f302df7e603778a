"""Core gaze data types, saccade detection, and per-saccade features.

Positions are degrees of visual angle, timestamps and durations are
milliseconds, velocities deg/s, accelerations deg/s^2 throughout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SACCADE_TYPE_NAMES = {1: "maintain", 2: "right", 3: "left", 4: "reverse"}

# Feature channels in their fixed model order. The first two form the base
# model configuration; all eight form the saccade-dynamics configuration.
BASE_CHANNELS = ("amplitude", "duration")
DYNAMICS_CHANNELS = (
    "amplitude",
    "duration",
    "velocity",
    "acceleration",
    "ratio_x",
    "ratio_y",
    "vigor_x",
    "vigor_y",
)

# Channel name -> SaccadeFeatures attribute.
CHANNEL_ATTRS = {
    "amplitude": "amplitude",
    "duration": "duration",
    "velocity": "mean_velocity",
    "acceleration": "mean_abs_acceleration",
    "ratio_x": "accel_ratio_x",
    "ratio_y": "accel_ratio_y",
    "vigor_x": "vigor_x",
    "vigor_y": "vigor_y",
}


class DegenerateRecordingError(ValueError):
    """Recording yields fewer than two fixations."""


class ChannelUnavailableError(ValueError):
    """A requested feature channel cannot be computed from the given inputs."""


@dataclass(frozen=True)
class GazeRecording:
    """Raw eye-tracker samples for one trial."""

    t_ms: np.ndarray
    x_deg: np.ndarray
    y_deg: np.ndarray
    sampling_rate: float
    subject_id: str = ""
    image_id: str = ""

    def __post_init__(self):
        t = np.asarray(self.t_ms, dtype=float)
        x = np.asarray(self.x_deg, dtype=float)
        y = np.asarray(self.y_deg, dtype=float)
        object.__setattr__(self, "t_ms", t)
        object.__setattr__(self, "x_deg", x)
        object.__setattr__(self, "y_deg", y)
        if not (t.ndim == 1 and t.shape == x.shape == y.shape):
            raise ValueError("t_ms, x_deg, y_deg must be 1-D arrays of equal length")
        if t.size == 0:
            raise ValueError("recording has no samples")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("recording contains non-finite samples; reject NaN rows at load time")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not self.sampling_rate > 0:
            raise ValueError("sampling_rate must be positive")

    def __len__(self) -> int:
        return self.t_ms.size


@dataclass(frozen=True)
class Scanpath:
    """Ordered fixations: positions (T, 2) in degrees, durations (T,) in ms."""

    positions: np.ndarray
    durations: np.ndarray
    subject_id: str = ""
    image_id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        dur = np.asarray(self.durations, dtype=float)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "durations", dur)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must have shape (T, 2)")
        if dur.shape != (pos.shape[0],):
            raise ValueError("durations must have shape (T,)")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(dur))):
            raise ValueError("scanpath entries must be finite")
        if np.any(dur <= 0):
            raise ValueError("all fixation durations must be positive")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SaccadeFeatures:
    """All channel values for one saccade.

    ``duration`` is the duration of the fixation *following* the saccade.
    Channels that could not be computed (no raw samples, undefined ratio,
    zero displacement) are NaN and get skipped by model likelihoods.
    """

    saccade_type: int
    amplitude: float
    duration: float
    direction: float
    mean_velocity: float = math.nan
    mean_abs_acceleration: float = math.nan
    peak_velocity_x: float = math.nan
    peak_velocity_y: float = math.nan
    accel_ratio_x: float = math.nan
    accel_ratio_y: float = math.nan
    vigor_x: float = math.nan
    vigor_y: float = math.nan

    def channel_value(self, channel: str) -> float:
        return getattr(self, CHANNEL_ATTRS[channel])


@dataclass(frozen=True)
class VigorFit:
    """Main-sequence rate fit v_max = g * (1 - exp(-a / b)).

    ``b_star`` is the across-subject mean of the per-subject rates and is
    the value used when computing vigor channels at feature extraction.
    """

    b_per_subject: dict[str, float]
    b_star: float
    g_values: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.b_star > 0:
            raise ValueError("b_star must be positive")
        mean_b = float(np.mean(list(self.b_per_subject.values())))
        if abs(mean_b - self.b_star) > 1e-9 * max(1.0, abs(mean_b)):
            raise ValueError("b_star must equal the mean of per-subject rates")


def wrap_angle_deg(angle):
    """Wrap an angle (degrees) into (-180, 180]."""
    wrapped = (np.asarray(angle, dtype=float) + 180.0) % 360.0 - 180.0
    return np.where(wrapped == -180.0, 180.0, wrapped)


def classify_saccade_type(delta_deg: float) -> int:
    """Map a direction change in (-180, 180] to a type in {1, 2, 3, 4}.

    Boundary rule: exactly +/-45 counts as maintain, exactly -135 as right
    and +135 as left, so the four bins partition the circle.
    """
    d = float(delta_deg)
    if abs(d) <= 45.0:
        return 1
    if -135.0 <= d < -45.0:
        return 2
    if 45.0 < d <= 135.0:
        return 3
    return 4


def smoothed_velocity(x: np.ndarray, y: np.ndarray, sampling_rate: float):
    """Moving-average-smoothed central-difference velocity, deg/s per axis.

    Interior samples use the 5-point window
    v[k] = rate/6 * (p[k+2] + p[k+1] - p[k-1] - p[k-2]); the two samples
    next to each border fall back to plain central differences and the
    borders themselves are zero.
    """
    n = x.size
    vx = np.zeros(n)
    vy = np.zeros(n)
    if n >= 5:
        vx[2 : n - 2] = sampling_rate / 6.0 * (x[4:] + x[3:-1] - x[1:-3] - x[:-4])
        vy[2 : n - 2] = sampling_rate / 6.0 * (y[4:] + y[3:-1] - y[1:-3] - y[:-4])
    if n >= 3:
        vx[1] = sampling_rate / 2.0 * (x[2] - x[0])
        vy[1] = sampling_rate / 2.0 * (y[2] - y[0])
        vx[n - 2] = sampling_rate / 2.0 * (x[n - 1] - x[n - 3])
        vy[n - 2] = sampling_rate / 2.0 * (y[n - 1] - y[n - 3])
    return vx, vy


def _median_based_sd(v: np.ndarray) -> float:
    med = np.median(v)
    msd = math.sqrt(float(np.median((v - med) ** 2)))
    if msd < 1e-10:
        # Degenerate median spread; fall back to the ordinary deviation.
        msd = math.sqrt(max(float(np.mean(v**2) - np.mean(v) ** 2), 0.0))
    return msd


@dataclass(frozen=True)
class Segmentation:
    """Sample-index spans of fixations and of the saccades between them."""

    fixation_spans: tuple[tuple[int, int], ...]
    saccade_spans: tuple[tuple[int, int], ...]
    vx: np.ndarray
    vy: np.ndarray
    thresholds: tuple[float, float]


def segment_recording(
    rec: GazeRecording,
    vel_threshold_multiplier: float = 6.0,
    min_saccade_duration_ms: float = 6.0,
) -> Segmentation:
    """Split samples into fixation and saccade spans.

    Per-axis thresholds are ``multiplier`` times a median-based velocity
    standard deviation; samples where the elliptic criterion
    (vx/eta_x)^2 + (vy/eta_y)^2 > 1 holds in runs of at least
    ``min_saccade_duration_ms`` form saccades.
    """
    if len(rec) < 3:
        raise ValueError("saccade detection needs at least 3 samples")
    vx, vy = smoothed_velocity(rec.x_deg, rec.y_deg, rec.sampling_rate)
    sd_x = _median_based_sd(vx)
    sd_y = _median_based_sd(vy)
    if sd_x < 1e-10 or sd_y < 1e-10:
        # Zero velocity spread on an axis: nothing can cross the threshold.
        criterion = np.zeros(len(rec), dtype=bool)
        eta = (math.inf, math.inf)
    else:
        eta = (vel_threshold_multiplier * sd_x, vel_threshold_multiplier * sd_y)
        criterion = (vx / eta[0]) ** 2 + (vy / eta[1]) ** 2 > 1.0

    min_samples = max(1, int(round(min_saccade_duration_ms * rec.sampling_rate / 1000.0)))
    padded = np.concatenate(([False], criterion, [False]))
    edges = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    runs = [(int(s), int(e)) for s, e in zip(starts, ends) if e - s + 1 >= min_samples]

    fix_spans: list[tuple[int, int]] = []
    cursor = 0
    for s, e in runs:
        if s > cursor:
            fix_spans.append((cursor, s - 1))
        cursor = e + 1
    if cursor <= len(rec) - 1:
        fix_spans.append((cursor, len(rec) - 1))

    sacc_spans = tuple(
        (fix_spans[j][1] + 1, fix_spans[j + 1][0] - 1) for j in range(len(fix_spans) - 1)
    )
    return Segmentation(
        fixation_spans=tuple(fix_spans),
        saccade_spans=sacc_spans,
        vx=vx,
        vy=vy,
        thresholds=eta,
    )


def detect_saccades(
    rec: GazeRecording,
    vel_threshold_multiplier: float = 6.0,
    min_saccade_duration_ms: float = 6.0,
) -> Scanpath:
    """Velocity-threshold saccade detection; returns the fixation sequence.

    Fixations take the mean sample position over their span and the span
    length (in ms) as duration. Raises DegenerateRecordingError if fewer
    than two fixations are found.
    """
    seg = segment_recording(rec, vel_threshold_multiplier, min_saccade_duration_ms)
    if len(seg.fixation_spans) < 2:
        raise DegenerateRecordingError(
            f"recording produced {len(seg.fixation_spans)} fixation(s); need at least 2"
        )
    dt_nominal = 1000.0 / rec.sampling_rate
    positions = []
    durations = []
    for s, e in seg.fixation_spans:
        positions.append((float(np.mean(rec.x_deg[s : e + 1])), float(np.mean(rec.y_deg[s : e + 1]))))
        durations.append(float(rec.t_ms[e] - rec.t_ms[s]) + dt_nominal)
    return Scanpath(
        positions=np.array(positions),
        durations=np.array(durations),
        subject_id=rec.subject_id,
        image_id=rec.image_id,
    )


def _dynamics_from_recording(
    rec: GazeRecording,
    n_saccades: int,
    vel_threshold_multiplier: float,
    min_saccade_duration_ms: float,
):
    """Per-saccade velocity/acceleration summaries from the raw trace."""
    seg = segment_recording(rec, vel_threshold_multiplier, min_saccade_duration_ms)
    if len(seg.saccade_spans) != n_saccades:
        raise ChannelUnavailableError(
            f"recording segments into {len(seg.saccade_spans)} saccades but the "
            f"scanpath implies {n_saccades}; dynamics channels unavailable"
        )
    dt = 1.0 / rec.sampling_rate
    speed = np.hypot(seg.vx, seg.vy)
    accel_speed = np.gradient(speed, dt)
    accel_x = np.gradient(seg.vx, dt)
    accel_y = np.gradient(seg.vy, dt)

    out = []
    for s, e in seg.saccade_spans:
        sl = slice(s, e + 1)
        pos_ax, neg_ax = np.max(accel_x[sl]), np.min(accel_x[sl])
        pos_ay, neg_ay = np.max(accel_y[sl]), np.min(accel_y[sl])
        out.append(
            {
                "mean_velocity": float(np.mean(speed[sl])),
                "mean_abs_acceleration": float(np.mean(np.abs(accel_speed[sl]))),
                "peak_velocity_x": float(np.max(np.abs(seg.vx[sl]))),
                "peak_velocity_y": float(np.max(np.abs(seg.vy[sl]))),
                "accel_ratio_x": float(pos_ax / -neg_ax) if pos_ax > 0 and neg_ax < 0 else math.nan,
                "accel_ratio_y": float(pos_ay / -neg_ay) if pos_ay > 0 and neg_ay < 0 else math.nan,
            }
        )
    return out


def extract_features(
    path: Scanpath,
    rec: GazeRecording | None = None,
    vigor: VigorFit | None = None,
    channels: Sequence[str] = BASE_CHANNELS,
    vel_threshold_multiplier: float = 6.0,
    min_saccade_duration_ms: float = 6.0,
) -> list[SaccadeFeatures]:
    """Per-saccade feature records for a scanpath of T >= 2 fixations.

    Saccade t runs from fixation t to fixation t+1 and is paired with the
    duration of fixation t+1. Its type is classified from the direction
    change relative to the previous saccade; the first saccade's reference
    direction is the positive x axis. Velocity/acceleration channels need
    ``rec`` (the raw recording the scanpath was detected from, with the
    same detection parameters); vigor channels additionally need ``vigor``.
    """
    T = len(path)
    if T < 2:
        raise ValueError("scanpath must contain at least 2 fixations")
    unknown = set(channels) - set(DYNAMICS_CHANNELS)
    if unknown:
        raise ValueError(f"unknown channels: {sorted(unknown)}")

    needs_rec = {"velocity", "acceleration", "ratio_x", "ratio_y", "vigor_x", "vigor_y"}
    needs_vigor = {"vigor_x", "vigor_y"}
    if needs_rec & set(channels) and rec is None:
        raise ChannelUnavailableError(
            "dynamics channels requested but no raw recording was provided"
        )
    if needs_vigor & set(channels) and vigor is None:
        raise ChannelUnavailableError("vigor channels requested but no vigor fit was provided")

    steps = np.diff(path.positions, axis=0)
    amplitudes = np.hypot(steps[:, 0], steps[:, 1])
    directions = np.degrees(np.arctan2(steps[:, 1], steps[:, 0]))

    dyn = None
    if rec is not None:
        dyn = _dynamics_from_recording(
            rec, T - 1, vel_threshold_multiplier, min_saccade_duration_ms
        )

    features = []
    prev_dir = 0.0
    for t in range(T - 1):
        delta = float(wrap_angle_deg(directions[t] - prev_dir))
        prev_dir = directions[t]
        extra = dict(dyn[t]) if dyn is not None else {}
        if vigor is not None and dyn is not None:
            for axis, disp in (("x", steps[t, 0]), ("y", steps[t, 1])):
                denom = 1.0 - math.exp(-abs(float(disp)) / vigor.b_star)
                peak = extra[f"peak_velocity_{axis}"]
                extra[f"vigor_{axis}"] = peak / denom if denom > 0 else math.nan
        features.append(
            SaccadeFeatures(
                saccade_type=classify_saccade_type(delta),
                amplitude=float(amplitudes[t]) if amplitudes[t] > 0 else math.nan,
                duration=float(path.durations[t + 1]),
                direction=float(directions[t]),
                **extra,
            )
        )
    return features


def _profiled_vigor_residual(b: float, vmax: np.ndarray, amp: np.ndarray) -> float:
    """Residual of the shared-vigor least-squares fit at rate b."""
    z = 1.0 - np.exp(-amp / b)
    zz = float(z @ z)
    if zz <= 0:
        return float(vmax @ vmax)
    g = float(vmax @ z) / zz
    r = vmax - g * z
    return float(r @ r)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def fit_vigor_rate(
    training: Mapping[str, Sequence[tuple[float, float]]],
    b_range: tuple[float, float] = (0.1, 100.0),
    tol: float = 1e-10,
    max_iter: int = 200,
) -> VigorFit:
    """Fit the main-sequence rate parameter per subject, then average.

    ``training`` maps subject id -> (peak velocity, amplitude) pairs. For
    each subject the profiled least-squares residual (one shared vigor per
    subject) is minimized over b by golden-section search; per-saccade
    vigor estimates then follow from the subject's fitted rate.
    """
    if not training:
        raise ValueError("no training subjects given")
    b_per_subject: dict[str, float] = {}
    g_values: dict[str, np.ndarray] = {}
    for subject, pairs in training.items():
        arr = np.asarray(pairs, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 5:
            raise ValueError(f"subject {subject!r} needs at least 5 (v_max, a) pairs")
        vmax, amp = arr[:, 0], arr[:, 1]
        if np.any(vmax <= 0) or np.any(amp <= 0):
            raise ValueError(f"subject {subject!r} has non-positive v_max or amplitude")

        lo, hi = b_range
        c = hi - _GOLDEN * (hi - lo)
        d = lo + _GOLDEN * (hi - lo)
        fc = _profiled_vigor_residual(c, vmax, amp)
        fd = _profiled_vigor_residual(d, vmax, amp)
        for _ in range(max_iter):
            if hi - lo < tol * max(1.0, abs(hi)):
                break
            if fc < fd:
                hi, d, fd = d, c, fc
                c = hi - _GOLDEN * (hi - lo)
                fc = _profiled_vigor_residual(c, vmax, amp)
            else:
                lo, c, fc = c, d, fd
                d = lo + _GOLDEN * (hi - lo)
                fd = _profiled_vigor_residual(d, vmax, amp)
        else:
            raise RuntimeError(
                f"vigor rate search for subject {subject!r} did not converge after "
                f"{max_iter} iterations; bracket [{lo}, {hi}]"
            )
        b = (lo + hi) / 2.0
        b_per_subject[subject] = b
        g_values[subject] = vmax / (1.0 - np.exp(-amp / b))

    b_star = float(np.mean(list(b_per_subject.values())))
    return VigorFit(b_per_subject=b_per_subject, b_star=b_star, g_values=g_values)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_recording_csv(rec: GazeRecording, csv_path: str | Path) -> None:
    """Write samples as ``t_ms,x_deg,y_deg`` plus a metadata sidecar JSON."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ms", "x_deg", "y_deg"])
        for t, x, y in zip(rec.t_ms, rec.x_deg, rec.y_deg):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
    sidecar = csv_path.with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump(
            {
                "subject_id": rec.subject_id,
                "image_id": rec.image_id,
                "sampling_rate": rec.sampling_rate,
            },
            fh,
            indent=2,
        )


def load_recording_csv(csv_path: str | Path, sidecar_path: str | Path | None = None) -> GazeRecording:
    """Read a recording CSV; NaN rows are rejected (dropped)."""
    csv_path = Path(csv_path)
    sidecar = Path(sidecar_path) if sidecar_path is not None else csv_path.with_suffix(".json")
    with open(sidecar) as fh:
        meta = json.load(fh)
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["t_ms", "x_deg", "y_deg"]:
            raise ValueError(f"{csv_path}: expected header t_ms,x_deg,y_deg, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 3:
                raise ValueError(f"{csv_path}: row {lineno} has {len(row)} columns, expected 3")
            try:
                vals = [float(v) for v in row[:3]]
            except ValueError as exc:
                raise ValueError(f"{csv_path}: row {lineno}: {exc}") from exc
            if any(math.isnan(v) for v in vals):
                continue
            rows.append(vals)
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{csv_path}: no valid samples")
    return GazeRecording(
        t_ms=arr[:, 0],
        x_deg=arr[:, 1],
        y_deg=arr[:, 2],
        sampling_rate=float(meta["sampling_rate"]),
        subject_id=str(meta.get("subject_id", "")),
        image_id=str(meta.get("image_id", "")),
    )


def save_scanpath_csv(path: Scanpath, csv_path: str | Path) -> None:
    """Write fixations as ``fix_index,x_deg,y_deg,dur_ms``."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fix_index", "x_deg", "y_deg", "dur_ms"])
        for i in range(len(path)):
            writer.writerow(
                [
                    i,
                    repr(float(path.positions[i, 0])),
                    repr(float(path.positions[i, 1])),
                    repr(float(path.durations[i])),
                ]
            )


def load_scanpath_csv(csv_path: str | Path, subject_id: str = "", image_id: str = "") -> Scanpath:
    csv_path = Path(csv_path)
    positions = []
    durations = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["fix_index", "x_deg", "y_deg", "dur_ms"]:
            raise ValueError(
                f"{csv_path}: expected header fix_index,x_deg,y_deg,dur_ms, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 4:
                raise ValueError(f"{csv_path}: row {lineno} has {len(row)} columns, expected 4")
            try:
                positions.append((float(row[1]), float(row[2])))
                durations.append(float(row[3]))
            except ValueError as exc:
                raise ValueError(f"{csv_path}: row {lineno}: {exc}") from exc
    return Scanpath(
        positions=np.asarray(positions),
        durations=np.asarray(durations),
        subject_id=subject_id,
        image_id=image_id,
    )


_FEATURE_COLUMNS = [
    "saccade_index",
    "type",
    "amplitude_deg",
    "duration_ms",
    "direction_deg",
    "mean_velocity",
    "mean_abs_acceleration",
    "peak_velocity_x",
    "peak_velocity_y",
    "accel_ratio_x",
    "accel_ratio_y",
    "vigor_x",
    "vigor_y",
]


def save_features_csv(features: Sequence[SaccadeFeatures], csv_path: str | Path) -> None:
    """Persist per-saccade feature records (used for simulated cohorts,
    whose dynamics channels have no raw trace to recompute them from)."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FEATURE_COLUMNS)
        for i, f in enumerate(features):
            writer.writerow(
                [i, f.saccade_type]
                + [
                    repr(float(v))
                    for v in (
                        f.amplitude,
                        f.duration,
                        f.direction,
                        f.mean_velocity,
                        f.mean_abs_acceleration,
                        f.peak_velocity_x,
                        f.peak_velocity_y,
                        f.accel_ratio_x,
                        f.accel_ratio_y,
                        f.vigor_x,
                        f.vigor_y,
                    )
                ]
            )


def load_features_csv(csv_path: str | Path) -> list[SaccadeFeatures]:
    csv_path = Path(csv_path)
    out = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _FEATURE_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected feature CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(_FEATURE_COLUMNS):
                raise ValueError(
                    f"{csv_path}: row {lineno} has {len(row)} columns, "
                    f"expected {len(_FEATURE_COLUMNS)}"
                )
            vals = [float(v) for v in row[2:]]
            out.append(
                SaccadeFeatures(
                    saccade_type=int(row[1]),
                    amplitude=vals[0],
                    duration=vals[1],
                    direction=vals[2],
                    mean_velocity=vals[3],
                    mean_abs_acceleration=vals[4],
                    peak_velocity_x=vals[5],
                    peak_velocity_y=vals[6],
                    accel_ratio_x=vals[7],
                    accel_ratio_y=vals[8],
                    vigor_x=vals[9],
                    vigor_y=vals[10],
                )
            )
    return out
