"""Conservative estimation of the total Bell violation and PBR p-value bounds.

The estimator subtracts a settings-dependent prediction made from earlier
trials from each Bell value.  Because the settings are uniformly random and
independent of the past, the running total ``b_hat`` is an unbiased estimate
of the summed conditional means, and ``u_hat`` (the sum of squared prediction
errors) is a biased-high variance estimate.

The prediction-based ratio (PBR) bound multiplies test factors
``T = 1 + lam * (B - c(s))`` whose local-realist expectation is at most 1, so
``2**-sum(log2 T)`` bounds the p-value.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .coincidence import (WindowSpec, bell_ch, count_predefined, detection_centered_counts,
                          window_spacing, DegenerateNormalizationError)
from .distance import (BellValue, DistanceParams, bell_from_distance, capped_bell_from_distance,
                       pulse_bell_value, pulse_distance, train, trial_distance)
from .timetags import Dataset, TrialRecord, apply_offset, read_kv

EPS = 1e-6
DEFAULT_PULSE_HALF_WIDTH = 7680   # 2.4 us coincidence window around each sync tick


# --- predictions and the estimator -----------------------------------------

@dataclass(frozen=True)
class Prediction:
    b_pred: np.ndarray        # per settings index (2 * s_a + s_b)
    b_bar_pred: float
    fallback: bool = False    # some settings were missing; pooled mean used for them


def predict(buffer: Iterable[tuple[int, float]]) -> Prediction:
    """Settings-conditional sample means of the buffered ``(settings_index, value)`` pairs."""
    sums = np.zeros(4)
    counts = np.zeros(4)
    for s, v in buffer:
        sums[s] += v
        counts[s] += 1
    n = counts.sum()
    if n == 0:
        raise ValueError("cannot predict from an empty buffer")
    pooled = sums.sum() / n
    have = counts > 0
    b = np.where(have, sums / np.maximum(counts, 1), pooled)
    return Prediction(b, float(b.mean()), bool(not have.all()))


@dataclass
class EstimatorState:
    b_hat: float = 0.0
    u_hat: float = 0.0
    i: int = 0
    prediction_buffer: deque = field(default_factory=lambda: deque(maxlen=800))

    @classmethod
    def with_window(cls, window: int) -> "EstimatorState":
        if window < 1:
            raise ValueError("prediction window must be >= 1")
        return cls(prediction_buffer=deque(maxlen=window))


def estimator_update(state: EstimatorState, pred: Prediction, trial_bell: BellValue) -> EstimatorState:
    """Apply one trial's increments (in place) and append it to the buffer."""
    s = trial_bell.settings.index
    b = trial_bell.value
    state.b_hat += float(b - (pred.b_pred[s] - pred.b_bar_pred))
    state.u_hat += float((b - pred.b_pred[s]) ** 2)
    state.i += 1
    state.prediction_buffer.append((s, b))
    return state


@dataclass(frozen=True)
class Estimate:
    total: float
    sigma: float

    @property
    def snr(self) -> float:
        if self.sigma == 0:
            return math.copysign(math.inf, self.total) if self.total else 0.0
        return self.total / self.sigma


def estimator_report(state: EstimatorState) -> Estimate:
    if state.i == 0:
        raise ValueError("no trials have been processed")
    return Estimate(state.b_hat, math.sqrt(state.u_hat))


# --- PBR ---------------------------------------------------------------------

def optimal_lambda(x: np.ndarray, lam_max: float) -> float:
    """Maximize ``mean(log(1 + lam * x))`` over ``lam`` in ``[0, lam_max]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or lam_max <= 0 or x.mean() <= 0:
        return 0.0

    def slope(lam):
        return float(np.mean(x / (1 + lam * x)))

    if slope(lam_max) >= 0:
        return float(lam_max)
    return float(brentq(slope, 0.0, lam_max, xtol=1e-14 * max(lam_max, 1e-300), rtol=1e-12))


def centering(buffer: Iterable[tuple[int, float]]) -> np.ndarray:
    """Per-settings offsets ``c(s) = mean_s - mean over s of mean_s`` (they sum to 0)."""
    pred = predict(buffer)
    return pred.b_pred - pred.b_bar_pred


@dataclass
class PbrState:
    log2_p_sum: float = 0.0
    lam: float = 0.0
    L: float = math.inf
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(4))
    update_every: int = 10
    window: int = 400
    training_buffer: deque = field(default_factory=deque)
    n: int = 0
    min_factor: float = math.inf

    def __post_init__(self):
        if self.update_every < 1 or self.window < 1:
            raise ValueError("update_every and window must be >= 1")
        self.training_buffer = deque(self.training_buffer, maxlen=self.window)

    @property
    def bound(self) -> float:
        return max(0.0, self.log2_p_sum)

    def lam_cap(self, bound_L: float) -> float:
        worst = bound_L + max(float(np.max(self.offsets)), 0.0)
        return (1 - EPS) / worst if worst > 0 else math.inf

    def reoptimize(self, bound_L: float | None = None) -> None:
        """Refit the settings offsets and ``lam`` on the training buffer."""
        if bound_L is not None:
            self.L = bound_L
        if not self.training_buffer or not math.isfinite(self.L):
            self.lam = 0.0
            return
        self.offsets = centering(self.training_buffer)
        x = np.array([v - self.offsets[s] for s, v in self.training_buffer])
        self.lam = optimal_lambda(x, self.lam_cap(self.L))


def pbr_update(state: PbrState, truncated_bell: float, bound_L: float,
               settings_index: int | None = None) -> PbrState:
    """Multiply in one test factor (in place).

    ``lam`` and the offsets were fixed before this trial.  With a settings
    index the factor uses the centered value ``truncated_bell - c(s)``.
    """
    if truncated_bell < -bound_L * (1 + 1e-12) - 1e-12:
        raise ValueError(f"value {truncated_bell} is below the stated bound -{bound_L}")
    c = float(state.offsets[settings_index]) if settings_index is not None else 0.0
    lam = min(state.lam, state.lam_cap(bound_L))
    factor = 1.0 + lam * (truncated_bell - c)
    if not factor > 0:
        raise ArithmeticError(f"test factor {factor} <= 0 (lambda out of range)")
    state.log2_p_sum += math.log2(factor)
    state.min_factor = min(state.min_factor, factor)
    state.n += 1
    if settings_index is not None:
        state.training_buffer.append((settings_index, truncated_bell))
    if state.n % state.update_every == 0:
        state.reoptimize(bound_L)
    return state


def gaussian_equivalent(log2_p: float) -> float:
    """One-sided Gaussian deviation with tail probability ``2**-log2_p`` (0 when p >= 1/2)."""
    if log2_p < 0:
        raise ValueError("log2_p must be >= 0")
    if log2_p <= 1:
        return 0.0
    target = -log2_p * math.log(2)
    hi = 10.0
    while norm.logsf(hi) > target:
        hi *= 2
    return float(brentq(lambda x: norm.logsf(x) - target, 0.0, hi, xtol=1e-9))


# --- pipeline ---------------------------------------------------------------

@dataclass(frozen=True)
class Protocol:
    training_size: int = 200
    retrain_every: int = 400
    retrain_window: int = 800
    predict_window: int = 800
    pbr_update_every: int | None = None
    pbr_window: int | None = None
    bell_kind: str = "distance"
    pulse_half_width: int | None = None
    offset_window: int = 2000
    beta_quantiles: tuple = (0.5, 0.75, 0.9, 0.95, 0.99, 1.0)

    def __post_init__(self):
        if self.bell_kind not in ("distance", "pulse"):
            raise ValueError("bell_kind must be 'distance' or 'pulse'")
        if self.training_size < 1 or self.retrain_every < 1 or self.retrain_window < 1 \
                or self.predict_window < 1:
            raise ValueError("schedule sizes must be >= 1")

    @property
    def pbr_every(self) -> int:
        if self.pbr_update_every is not None:
            return self.pbr_update_every
        return 10 if self.bell_kind == "distance" else 200

    @property
    def pbr_win(self) -> int:
        if self.pbr_window is not None:
            return self.pbr_window
        return 400 if self.bell_kind == "distance" else 1600


PROTOCOL_KEYS = ("training_size", "retrain_every", "retrain_window", "predict_window",
                 "pbr_update_every", "pbr_window", "bell_kind", "pulse_half_width",
                 "offset_window")


def protocol_from_kv(kv: dict[str, str]) -> Protocol:
    unknown = set(kv) - set(PROTOCOL_KEYS)
    if unknown:
        raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
    args = {}
    for k, v in kv.items():
        if k == "bell_kind":
            args[k] = v
        elif v.strip().lower() in ("", "none"):
            args[k] = None
        else:
            args[k] = int(v)
    return Protocol(**args)


def load_protocol(path: str | Path) -> Protocol:
    return protocol_from_kv(read_kv(path))


@dataclass
class Report:
    total: float
    sigma: float
    snr: float
    log2_p: float
    sigma_equivalent: float
    n_analyzed: int
    n_training: int
    fallback_count: int
    naive_b_ch: float
    naive_sigma: float
    params: DistanceParams | None
    protocol: Protocol
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def naive_snr(self) -> float:
        return self.naive_b_ch / self.naive_sigma if self.naive_sigma > 0 else math.nan

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("trial_id", "b_hat", "u_hat", "log2p"))
            for r in self.rows:
                w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])

    def summary(self) -> dict:
        return {
            "total": self.total, "sigma": self.sigma, "snr": self.snr,
            "log2_p_bound": self.log2_p, "sigma_equivalent": self.sigma_equivalent,
            "n_analyzed": self.n_analyzed, "n_training": self.n_training,
            "prediction_fallbacks": self.fallback_count,
            "naive_b_ch": self.naive_b_ch, "naive_sigma": self.naive_sigma,
            "naive_snr": self.naive_snr,
        }

    def to_text(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.summary().items()]
        if self.params is not None:
            lines += [f"param.{k}={v!r}" for k, v in asdict(self.params).items()]
        lines += [f"protocol.{k}={v!r}" for k, v in asdict(self.protocol).items()]
        lines += [f"note={n}" for n in self.notes]
        return "\n".join(lines) + "\n"


class _Evaluator:
    """Per-trial raw Bell values and PBR distances under the current parameters."""

    def __init__(self, dataset: Dataset, protocol: Protocol):
        self.trials = dataset.trials
        self.kind = protocol.bell_kind
        self.params: DistanceParams | None = None
        self.cache: dict[int, tuple[float, float]] = {}
        if self.kind == "pulse":
            if dataset.ticks is None or len(dataset.ticks) == 0:
                raise ValueError("pulse analysis needs sync ticks")
            self.ticks = np.asarray(dataset.ticks)
            self.half = protocol.pulse_half_width or DEFAULT_PULSE_HALF_WIDTH
            self.params = DistanceParams()

    def set_params(self, params: DistanceParams) -> None:
        self.params = params
        self.cache.clear()

    def values(self, i: int) -> tuple[float, float]:
        """(Bell value for the estimator, distance for PBR) of trial ``i``."""
        if i not in self.cache:
            t = self.trials[i]
            if self.kind == "pulse":
                self.cache[i] = (pulse_bell_value(t, self.ticks, self.half).value,
                                 pulse_distance(t, self.ticks, self.half))
            else:
                m = trial_distance(t, self.params)
                self.cache[i] = (bell_from_distance(t.settings.index, m, self.params), m)
        return self.cache[i]

    def bound(self, beta: float) -> float:
        """Lower-bound magnitude of capped Bell values; fixed before any trial is seen."""
        return beta + (self.params.delta if self.kind == "distance" else 0.0)

    def capped(self, i: int, beta: float) -> tuple[float, float]:
        s = self.trials[i].settings.index
        m = self.values(i)[1]
        params = self.params if self.kind == "distance" else DistanceParams()
        return capped_bell_from_distance(s, m, params, beta)


def _choose_beta(ev: _Evaluator, idx: Sequence[int], quantiles: Sequence[float],
                 pbr: PbrState) -> tuple[float, list]:
    """Pick the distance cap with the best in-sample log-growth on past trials."""
    ms = np.array([ev.values(i)[1] for i in idx])
    cands = sorted({float(q) for q in np.quantile(ms, quantiles) if q > 0}) or [1.0]
    best = (-math.inf, cands[-1], [])
    for beta in cands:
        buf = [(ev.trials[i].settings.index, ev.capped(i, beta)[0]) for i in idx]
        trial = PbrState(offsets=np.zeros(4), update_every=pbr.update_every,
                         window=pbr.window, training_buffer=buf)
        trial.reoptimize(ev.bound(beta))
        x = np.array([v - trial.offsets[s] for s, v in buf])
        gain = float(np.mean(np.log1p(trial.lam * x)))
        if gain > best[0]:
            best = (gain, beta, buf)
    return best[1], best[2]


def _shift_a(t: TrialRecord, offset: int) -> TrialRecord:
    seq = apply_offset(t.seq_a, offset)
    if t.duration is not None:
        seq = seq.with_tags(seq.tags[seq.tags < t.duration])
    return t.replace(seq_a=seq)


def _naive(dataset: Dataset, analyzed: Sequence[TrialRecord], protocol: Protocol,
           params: DistanceParams | None, half: int | None) -> tuple[float, float]:
    try:
        if protocol.bell_kind == "pulse":
            spec = WindowSpec.predefined(2 * half, sync_period=None)
            sub = dataset.subset(analyzed)
            counts = count_predefined(sub, spec, sync_ticks=dataset.ticks)
            res = bell_ch(counts, 1.0 / window_spacing(spec, dataset.ticks))
        else:
            radius = max(1, int(round(min(params.window, 1e9))))
            shifted = [_shift_a(t, params.offset_units) for t in analyzed]
            res = bell_ch(detection_centered_counts(dataset.subset(shifted), radius))
    except (DegenerateNormalizationError, ValueError):
        return math.nan, math.nan
    return res.b_ch, res.naive_sigma


def run_pipeline(dataset: Dataset, protocol: Protocol | None = None) -> Report:
    """Train, then analyze every later trial strictly in order.

    Parameters are trained on the first ``training_size`` trials and retrained
    every ``retrain_every`` trials on the previous ``retrain_window``.  Training
    trials only feed the predictions; they never enter ``b_hat``, ``u_hat`` or
    the PBR bound.  All quantities used for trial ``i`` depend only on trials
    before ``i``.
    """
    protocol = protocol or Protocol()
    trials = dataset.trials
    n = len(trials)
    if n <= protocol.training_size:
        raise ValueError(f"need more than {protocol.training_size} trials, got {n}")
    ev = _Evaluator(dataset, protocol)
    est = EstimatorState.with_window(protocol.predict_window)
    pbr = PbrState(update_every=protocol.pbr_every, window=protocol.pbr_win)
    notes: list[str] = []
    fallbacks = 0
    first_params = None
    beta = math.nan
    rows = []
    lookback = max(protocol.predict_window, pbr.window)
    for i in range(protocol.training_size, n):
        k = i - protocol.training_size
        retrain = k % protocol.retrain_every == 0
        if retrain:
            if ev.kind == "distance":
                lo = max(0, i - (protocol.training_size if k == 0 else protocol.retrain_window))
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    ev.set_params(train(trials[lo:i], offset_window=protocol.offset_window).params)
                notes += [f"trial {i}: {w.message}" for w in caught]
                first_params = first_params or ev.params
            past = range(max(0, i - lookback), i)
            est.prediction_buffer.clear()
            est.prediction_buffer.extend(
                (trials[j].settings.index, ev.values(j)[0])
                for j in past[-protocol.predict_window:])
        if retrain or k % pbr.update_every == 0:
            idx = list(range(max(0, i - pbr.window), i))
            beta, buf = _choose_beta(ev, idx, protocol.beta_quantiles, pbr)
            pbr.training_buffer.clear()
            pbr.training_buffer.extend(buf)
            pbr.reoptimize(ev.bound(beta))
        pred = predict(est.prediction_buffer)
        fallbacks += pred.fallback
        t = trials[i]
        b, _ = ev.values(i)
        estimator_update(est, pred, BellValue(b, t.settings, t.trial_id))
        v, lb = ev.capped(i, beta)
        # the cap is re-chosen every update_every trials, so the state's own
        # refit is superseded; keep its counter in step
        pbr_update(pbr, v, lb, t.settings.index)
        rows.append((t.trial_id, est.b_hat, est.u_hat, pbr.log2_p_sum))
    rep = estimator_report(est)
    analyzed = trials[protocol.training_size:]
    naive = _naive(dataset, analyzed, protocol, first_params, getattr(ev, "half", None))
    if fallbacks:
        notes.append(f"{fallbacks} predictions used the pooled mean for a missing setting")
    return Report(rep.total, rep.sigma, rep.snr, pbr.bound, gaussian_equivalent(pbr.bound),
                  n - protocol.training_size, protocol.training_size, fallbacks,
                  naive[0], naive[1], ev.params if ev.kind == "distance" else None,
                  protocol, rows, notes)
