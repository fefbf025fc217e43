"""Timetag edit distance and the distance-based Bell function.

The distance between two sorted tag sequences is the cheapest way to turn one
into the other by deleting/inserting tags (``del_cost`` each) and shifting
tags (``min(shift_rate * |dt|, cap)`` per pair).  With ``cap <= 2 * del_cost``
it is cheapest to pair up as many tags as possible, which gives

    m = del * (nx + ny - 2k) + cap * (k + G(x, y; w)),    k = min(nx, ny)

where ``w = cap / shift_rate`` and ``G`` is the minimum over order-preserving
partial matchings of ``sum(min(|dt| / w, 1) - 1)``.  ``G`` only depends on
``w``, so for a fixed window the distance is linear in ``(del, cap)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kernels import monotone_match_gain, nearest_differences
from .timetags import SETTINGS, SettingsPair, TrialRecord, pulse_indices, read_kv


class SettingsDependentDelayWarning(UserWarning):
    """Coincidence delays differ between settings (a possible hacked source)."""


@dataclass(frozen=True)
class DistanceParams:
    del_cost: float = 1.0
    shift_rate: float = 1.0 / 64
    cap: float = 2.0
    gamma: float = 0.0
    delta: float = 0.0
    offset_units: int = 0
    beta: float = math.inf

    def __post_init__(self):
        if not self.del_cost > 0:
            raise ValueError("del_cost must be > 0")
        if not self.shift_rate >= 0:
            raise ValueError("shift_rate must be >= 0")
        if not 0 < self.cap <= 2 * self.del_cost:
            raise ValueError("cap must lie in (0, 2 * del_cost]")
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("gamma and delta must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    @property
    def window(self) -> float:
        """Separation beyond which shifting a tag costs the full cap."""
        return self.cap / self.shift_rate if self.shift_rate > 0 else math.inf

    @classmethod
    def from_window(cls, window: float, cap: float = 2.0, del_cost: float = 1.0,
                    **kw) -> "DistanceParams":
        rate = 0.0 if math.isinf(window) else cap / window
        return cls(del_cost=del_cost, shift_rate=rate, cap=cap, **kw)

    def with_(self, **kw) -> "DistanceParams":
        return replace(self, **kw)


PARAM_KEYS = ("del_cost", "shift_rate", "cap", "gamma", "delta", "offset_units", "beta")


def write_params(params: DistanceParams, path: str | Path) -> None:
    d = asdict(params)
    with open(path, "w", encoding="utf-8") as fh:
        for k in PARAM_KEYS:
            fh.write(f"{k}={d[k]!r}\n")


def read_params(path: str | Path) -> DistanceParams:
    kv = read_kv(path)
    unknown = set(kv) - set(PARAM_KEYS)
    if unknown:
        raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
    args = {k: float(v) for k, v in kv.items()}
    if "offset_units" in args:
        args["offset_units"] = int(args["offset_units"])
    return DistanceParams(**args)


# --- the metric ------------------------------------------------------------

def _sorted(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("tag sequences must be one-dimensional")
    if arr.size > 1 and np.any(np.diff(arr) < 0):
        arr = np.sort(arr)
    return arr


def match_gain(x, y, window: float) -> float:
    """``G(x, y; window)`` from the module docstring."""
    return float(monotone_match_gain(_sorted(x), _sorted(y), float(window)))


def timetag_metric(x, y, params: DistanceParams) -> float:
    """Edit distance between two tag sequences (the offset is not applied here)."""
    x = _sorted(x)
    y = _sorted(y)
    nx, ny = x.size, y.size
    g = float(monotone_match_gain(x, y, params.window))
    k = min(nx, ny)
    # grouped so that identical sequences give exactly 0
    return params.del_cost * (nx + ny - 2 * k) + params.cap * (k + g)


def _shifted_a(trial: TrialRecord, params: DistanceParams) -> np.ndarray:
    return trial.a.astype(np.float64) + params.offset_units


def trial_distance(trial: TrialRecord, params: DistanceParams) -> float:
    return timetag_metric(_shifted_a(trial, params), trial.b, params)


def distance(sa: int, sb: int, x, y, params: DistanceParams) -> float:
    """Settings-dependent distance ``l_{sa sb}``: ``m - gamma`` at (1,1), else ``m + delta``."""
    m = timetag_metric(x, y, params)
    return m - params.gamma if (sa, sb) == (1, 1) else m + params.delta


def bell_from_distance(settings_index: int, m: float, params: DistanceParams) -> float:
    if settings_index == 3:
        return m - params.gamma
    return -(m + params.delta)


@dataclass(frozen=True)
class BellValue:
    """One trial's Bell-function value.

    ``lower_bound`` is ``L`` with ``value >= -L`` guaranteed, when known.
    """

    value: float
    settings: SettingsPair
    trial_id: int = -1
    lower_bound: float | None = None


def bell_value(trial: TrialRecord, params: DistanceParams) -> BellValue:
    """Bell function: ``+l_11`` at settings (1,1) and ``-l_s`` otherwise.

    Under local realism the settings-averaged expectation is <= 0.
    """
    v = bell_from_distance(trial.settings.index, trial_distance(trial, params), params)
    return BellValue(v, trial.settings, trial.trial_id)


def max_distance(params: DistanceParams, max_len: int) -> float:
    """Largest distance between sequences of at most ``max_len`` tags each."""
    return params.del_cost * 2 * max_len


def truncate(bell: BellValue, beta: float, lower_bound: float | None = None) -> BellValue:
    """Clip from above at ``beta``; this never raises the local-realist mean."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    lb = bell.lower_bound if lower_bound is None else lower_bound
    return BellValue(min(bell.value, beta), bell.settings, bell.trial_id, lb)


def capped_bell_from_distance(settings_index: int, m: float, params: DistanceParams,
                              beta: float | None = None) -> tuple[float, float]:
    """Bell value from the capped distance ``min(m, beta)``, and its lower-bound magnitude.

    A capped metric is still a metric, so the capped Bell function keeps a
    non-positive local-realist mean, and it is bounded below by
    ``-(beta + delta)``.
    """
    beta = params.beta if beta is None else beta
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError("the distance cap must be finite and > 0")
    return bell_from_distance(settings_index, min(m, beta), params), beta + params.delta


def capped_bell_value(trial: TrialRecord, params: DistanceParams,
                      beta: float | None = None) -> BellValue:
    v, lb = capped_bell_from_distance(trial.settings.index, trial_distance(trial, params),
                                      params, beta)
    return BellValue(v, trial.settings, trial.trial_id, lb)


# --- pulsed data -----------------------------------------------------------

def pulse_patterns(trial: TrialRecord, ticks: np.ndarray, half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Binarized per-pulse detection patterns (bool arrays aligned with ``ticks``)."""
    ticks = np.asarray(ticks, dtype=np.int64)
    a = np.zeros(ticks.size, dtype=bool)
    b = np.zeros(ticks.size, dtype=bool)
    a[pulse_indices(trial.a, ticks, half_width)] = True
    b[pulse_indices(trial.b, ticks, half_width)] = True
    return a, b


def pulse_bell_value(trial: TrialRecord, ticks: np.ndarray, half_width: int) -> BellValue:
    """Per-pulse CH Bell function summed over the trial's pulses.

    Each pulse contributes ``c(s) [a and b] - 1/2 [s_a = 0] a - 1/2 [s_b = 0] b``
    with ``c = -1`` at (1,1) and ``+1`` otherwise; its settings-averaged mean
    is a quarter of the per-pulse CH parameter.
    """
    if ticks is None or len(ticks) == 0:
        raise ValueError("pulse Bell values need the pulse tick list")
    a, b = pulse_patterns(trial, ticks, half_width)
    sa, sb = trial.settings.as_tuple()
    both = int(np.count_nonzero(a & b))
    coeff = -1.0 if (sa, sb) == (1, 1) else 1.0
    v = coeff * both
    if sa == 0:
        v -= 0.5 * np.count_nonzero(a)
    if sb == 0:
        v -= 0.5 * np.count_nonzero(b)
    return BellValue(float(v), trial.settings, trial.trial_id, None)


def pulse_distance(trial: TrialRecord, ticks: np.ndarray, half_width: int) -> float:
    """Hamming distance between the parties' binarized pulse patterns."""
    if ticks is None or len(ticks) == 0:
        raise ValueError("pulse distances need the pulse tick list")
    a, b = pulse_patterns(trial, ticks, half_width)
    return float(np.count_nonzero(a != b))


# --- offset and training ---------------------------------------------------

@dataclass(frozen=True)
class OffsetEstimate:
    offset: int            # add to A tags to line them up with B
    spread: float          # robust width of the coincidence peak
    n: int                 # number of nearest-neighbour differences used
    setting_delays: dict   # per-setting peak position from the wide survey


def _mode(diffs: np.ndarray, window: float, bin_width: float) -> float:
    nb = max(1, int(math.ceil(2 * window / bin_width)))
    hist, edges = np.histogram(diffs, bins=nb, range=(-window, window))
    k = int(np.argmax(hist))
    center = 0.5 * (edges[k] + edges[k + 1])
    near = diffs[np.abs(diffs - center) <= 2 * bin_width]
    return float(np.median(near)) if near.size else center


def _diffs(trials: Iterable[TrialRecord], window: float) -> np.ndarray:
    parts = [nearest_differences(t.a, t.b, float(window)) for t in trials if t.a.size and t.b.size]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def estimate_offset(trials: Sequence[TrialRecord], window: int = 2000,
                    survey_window: int = 32000, min_events: int = 20) -> OffsetEstimate:
    """Locate the A/B coincidence peak from nearest-neighbour time differences.

    The per-setting peak positions are also surveyed over a wider range; a
    spread between settings is reported with a warning, since a well-behaved
    source has a settings-independent delay.
    """
    diffs = _diffs(trials, window).astype(np.float64)
    if diffs.size >= min_events:
        offset = _mode(diffs, window, 16.0)
        dev = np.abs(diffs - offset)
        spread = float(1.4826 * np.median(dev))
    else:
        offset, spread = 0.0, math.nan
    delays = {}
    for s in SETTINGS:
        sub = [t for t in trials if t.settings.as_tuple() == s]
        d = _diffs(sub, survey_window).astype(np.float64)
        if d.size >= min_events:
            delays[s] = _mode(d, survey_window, 64.0)
    if len(delays) >= 2:
        vals = list(delays.values())
        tol = max(320.0, 8 * spread) if math.isfinite(spread) else 320.0
        if max(vals) - min(vals) > tol:
            warnings.warn(
                "coincidence delays depend on the settings: "
                + ", ".join(f"{s}: {v:.0f}" for s, v in sorted(delays.items())),
                SettingsDependentDelayWarning, stacklevel=2)
    return OffsetEstimate(int(round(offset)), spread, int(diffs.size), delays)


@dataclass(frozen=True)
class TrialFeatures:
    """Per-trial quantities from which ``m`` follows for any (del, cap) at fixed window."""

    settings_index: int
    n_sum: int
    n_min: int
    gain: float

    def distance(self, del_cost: float, cap: float) -> float:
        return del_cost * (self.n_sum - 2 * self.n_min) + cap * (self.n_min + self.gain)


def trial_features(trial: TrialRecord, window: float, offset: int = 0) -> TrialFeatures:
    a = trial.a.astype(np.float64) + offset
    b = trial.b.astype(np.float64)
    g = float(monotone_match_gain(a, b, float(window)))
    return TrialFeatures(trial.settings.index, a.size + b.size, min(a.size, b.size), g)


_SIGN = np.array([-1.0, -1.0, -1.0, 1.0])


def balanced_mean(values: np.ndarray, settings_index: np.ndarray) -> float:
    """Average over settings of the per-setting means (missing settings raise)."""
    means = []
    for k in range(4):
        sel = settings_index == k
        if not sel.any():
            raise ValueError(f"no trials at settings {SETTINGS[k]}")
        means.append(values[sel].mean())
    return float(np.mean(means))


def _objective_terms(feats: list[TrialFeatures]) -> tuple[float, float]:
    """Balanced-mean Bell value as ``a0 + a1 * cap`` (del_cost = 1, gamma = delta = 0)."""
    idx = np.array([f.settings_index for f in feats])
    base = np.array([f.n_sum - 2.0 * f.n_min for f in feats])
    slope = np.array([f.n_min + f.gain for f in feats])
    a0 = a1 = 0.0
    for k in range(4):
        sel = idx == k
        if not sel.any():
            raise ValueError(f"no training trials at settings {SETTINGS[k]}")
        a0 += _SIGN[k] * base[sel].mean() / 4
        a1 += _SIGN[k] * slope[sel].mean() / 4
    return a0, a1


@dataclass(frozen=True)
class TrainingResult:
    params: DistanceParams
    objective: float
    offset: OffsetEstimate


DEFAULT_WINDOWS = tuple(float(w) for w in np.geomspace(8, 256000, 31))


def train(trials: Sequence[TrialRecord], *, windows: Sequence[float] | None = None,
          min_cap: float = 0.25, estimate: bool = True, offset_window: int = 2000,
          refine_steps: int = 12) -> TrainingResult:
    """Choose distance parameters maximizing the settings-balanced mean Bell value.

    ``del_cost`` is fixed at 1 (the Bell value is homogeneous in the costs).
    For each candidate window the best cap is at an end of ``[min_cap, 2]``
    because the objective is linear in it; gamma and delta only lower the
    objective and stay at 0.  The best window is then refined by golden-section
    search in log space.
    """
    trials = list(trials)
    have = {t.settings.index for t in trials}
    if have != {0, 1, 2, 3}:
        missing = [SETTINGS[k] for k in range(4) if k not in have]
        raise ValueError(f"training set lacks settings {missing}")
    off = estimate_offset(trials, offset_window) if estimate else \
        OffsetEstimate(0, math.nan, 0, {})
    if windows is None:
        if math.isfinite(off.spread) and off.spread > 0:
            windows = tuple(off.spread * f for f in np.geomspace(0.5, 4096, 27))
        else:
            windows = DEFAULT_WINDOWS
    windows = sorted(float(w) for w in windows if w > 0)

    def evaluate(w: float) -> tuple[float, float]:
        feats = [trial_features(t, w, off.offset) for t in trials]
        a0, a1 = _objective_terms(feats)
        cap = 2.0 if a1 > 0 else min_cap
        return a0 + a1 * cap, cap

    scores = [evaluate(w) for w in windows]
    k = int(np.argmax([s[0] for s in scores]))
    best_w, (best_obj, best_cap) = windows[k], scores[k]
    if refine_steps and len(windows) > 1:
        lo = math.log(windows[max(k - 1, 0)])
        hi = math.log(windows[min(k + 1, len(windows) - 1)])
        phi = (math.sqrt(5) - 1) / 2
        c, d = hi - phi * (hi - lo), lo + phi * (hi - lo)
        fc, fd = evaluate(math.exp(c)), evaluate(math.exp(d))
        for _ in range(refine_steps):
            for w_log, res in ((c, fc), (d, fd)):
                if res[0] > best_obj:
                    best_w, (best_obj, best_cap) = math.exp(w_log), res
            if fc[0] >= fd[0]:
                hi, d, fd = d, c, fc
                c = hi - phi * (hi - lo)
                fc = evaluate(math.exp(c))
            else:
                lo, c, fc = c, d, fd
                d = lo + phi * (hi - lo)
                fd = evaluate(math.exp(d))
    params = DistanceParams.from_window(best_w, cap=best_cap, offset_units=off.offset)
    return TrainingResult(params, float(best_obj), off)


def train_params(trials: Sequence[TrialRecord], **kw) -> DistanceParams:
    return train(trials, **kw).params
