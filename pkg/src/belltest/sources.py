"""Monte Carlo photon sources.

* :class:`ClassicalSourceConfig` describes a classical pulse source built to
  exploit detection-centered coincidence counting: each group holds four
  polarized pulses, two per party, each pulse crossed with one analyzer setting
  so that it can only be detected at the other.
* :class:`QuantumSourceConfig` describes a polarization-entangled pair source
  ``cos(t)|HH> + sin(t)|VV>`` with finite detector efficiency, either
  continuous-wave or pulsed.

Angles in configs are in degrees; times are in 156.25 ps timetag units.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, minimize

from .coincidence import CoincidenceCounts, bell_ch
from .timetags import (SETTINGS, TIME_UNIT_S, UNITS_PER_US, Dataset, SettingsPair,
                       TimetagSequence, TrialRecord, read_kv)

FIG_ANGLES_DEG = (-11.25, 33.75, 11.25, -33.75)   # a0, a1, b0, b1


class TuningError(RuntimeError):
    """The requested Bell value is out of reach for the classical source."""


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _jitter(rng: np.random.Generator, n: int, sigma: float, cutoff: float = 5.0) -> np.ndarray:
    """Gaussian timing jitter truncated at +-cutoff sigma (by resampling)."""
    out = rng.normal(0.0, sigma, n)
    if sigma <= 0:
        return np.zeros(n)
    bad = np.abs(out) > cutoff * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > cutoff * sigma
    return out


def _dark(rng: np.random.Generator, rate_hz: float, duration: int) -> np.ndarray:
    n = rng.poisson(rate_hz * duration * TIME_UNIT_S)
    return rng.uniform(0, duration, n)


def _finish(times: np.ndarray, duration: int) -> np.ndarray:
    t = np.floor(times).astype(np.int64)
    t = t[(t >= 0) & (t < duration)]
    t.sort()
    return t


# --- classical source ------------------------------------------------------

@dataclass(frozen=True)
class ClassicalSourceConfig:
    """Four-pulse classical source.

    Group layout (offsets from the group start, ``T = pulse_spacing``): A pulse
    crossed with a0 at 0, B pulse crossed with b1 at T, A pulse crossed with a1
    at 2T, B pulse crossed with b0 at 3T.  ``rotation_deg`` turns every pulse
    away from its crossed analyzer toward the intended one; with
    ``compensate=True`` the brightness is raised so the intended click
    probability stays fixed.
    """

    analyzer_deg: tuple = FIG_ANGLES_DEG
    rotation_deg: float = 0.0
    compensate: bool = True
    mean_photons: float = 10.0
    efficiency: float = 1.0
    pulse_spacing: int = UNITS_PER_US
    pulse_width: int = 640
    group_rate: float = 100e3
    emission: str = "periodic"
    clock_drift_ppm: float = 5.0
    phase: float = 1000.0
    jitter_sigma: float = 3.0
    dark_rate: float = 100.0
    trial_duration: int = 192_000_000

    def __post_init__(self):
        if len(self.analyzer_deg) != 4:
            raise ValueError("analyzer_deg needs four angles (a0, a1, b0, b1)")
        if self.emission not in ("periodic", "poisson"):
            raise ValueError("emission must be 'periodic' or 'poisson'")
        if self.mean_photons < 0 or not 0 <= self.efficiency <= 1:
            raise ValueError("mean_photons must be >= 0 and efficiency in [0, 1]")
        if self.group_rate <= 0 or self.pulse_spacing <= 0 or self.trial_duration <= 0:
            raise ValueError("group_rate, pulse_spacing and trial_duration must be > 0")
        if self.pulse_width < 0 or self.jitter_sigma < 0 or self.dark_rate < 0:
            raise ValueError("pulse_width, jitter_sigma and dark_rate must be >= 0")
        for d in self.pulse_separations_deg():
            if not 0 <= self.rotation_deg < d:
                raise ValueError(f"rotation_deg must lie in [0, {d}) for these analyzers")

    def pulse_separations_deg(self) -> tuple[float, float]:
        a0, a1, b0, b1 = self.analyzer_deg
        return (abs(_signed_sep(a0, a1)), abs(_signed_sep(b1, b0)))

    def pulses(self) -> list[tuple[str, int, float, float]]:
        """``(party, offset, crossed angle in rad, mean photon number)`` per pulse."""
        a0, a1, b0, b1 = self.analyzer_deg
        out = []
        for party, k, crossed, intended in (("A", 0, a0, a1), ("B", 1, b1, b0),
                                            ("A", 2, a1, a0), ("B", 3, b0, b1)):
            sep = _signed_sep(crossed, intended)
            phi = crossed + math.copysign(self.rotation_deg, sep)
            mu = self.mean_photons
            if self.compensate and self.rotation_deg:
                mu *= _sin2(sep) / _sin2(abs(sep) - self.rotation_deg)
            out.append((party, k * self.pulse_spacing, math.radians(phi), mu))
        return out

    @property
    def group_period(self) -> float:
        return 1.0 / (self.group_rate * TIME_UNIT_S) * (1 + 1e-6 * self.clock_drift_ppm)


def _signed_sep(frm: float, to: float) -> float:
    """Signed angle from ``frm`` to ``to`` modulo 180, in [-90, 90)."""
    return ((to - frm + 90.0) % 180.0) - 90.0


def _sin2(deg: float) -> float:
    return math.sin(math.radians(deg)) ** 2


def classical_click_probs(cfg: ClassicalSourceConfig, settings: tuple[int, int]) -> list[float]:
    """Detection probability of each pulse (in :meth:`pulses` order) at the given settings."""
    a = cfg.analyzer_deg
    ang = {"A": math.radians(a[settings[0]]), "B": math.radians(a[2 + settings[1]])}
    return [1 - math.exp(-mu * cfg.efficiency * math.sin(phi - ang[p]) ** 2)
            for p, _, phi, mu in cfg.pulses()]


def _group_starts(cfg: ClassicalSourceConfig, rng, duration: int, start: int) -> np.ndarray:
    lead = 3 * cfg.pulse_spacing + cfg.pulse_width
    if cfg.emission == "periodic":
        p = cfg.group_period
        k0 = math.ceil((start - lead - cfg.phase) / p)
        k1 = math.ceil((start + duration - cfg.phase) / p)
        return cfg.phase + p * np.arange(k0, k1) - start
    span = duration + lead
    n = rng.poisson(cfg.group_rate * span * TIME_UNIT_S)
    return np.sort(rng.uniform(-lead, duration, n))


def simulate_classical_trial(cfg: ClassicalSourceConfig, settings: SettingsPair | tuple[int, int],
                             duration: int | None = None, rng_seed=None, start: int = 0,
                             trial_id: int = 0) -> TrialRecord:
    """One trial of the classical source.

    ``start`` is the trial's position on the global timeline, which sets the
    phase of the periodic group comb inside the trial.
    """
    if not isinstance(settings, SettingsPair):
        settings = SettingsPair(*settings)
    duration = cfg.trial_duration if duration is None else int(duration)
    rng = _rng(rng_seed)
    groups = _group_starts(cfg, rng, duration, start)
    probs = classical_click_probs(cfg, settings.as_tuple())
    tags = {"A": [], "B": []}
    for (party, offset, _, _), p in zip(cfg.pulses(), probs):
        hit = groups[rng.random(groups.size) < p]
        t = hit + offset + rng.uniform(-0.5, 0.5, hit.size) * cfg.pulse_width
        tags[party].append(t + _jitter(rng, hit.size, cfg.jitter_sigma))
    for party in ("A", "B"):
        tags[party].append(_dark(rng, cfg.dark_rate, duration))
    seqs = [TimetagSequence(_finish(np.concatenate(tags[p]), duration), p) for p in ("A", "B")]
    return TrialRecord(trial_id, settings, seqs[0], seqs[1], duration)


def cycled_settings(n: int) -> list[SettingsPair]:
    return [SettingsPair(*SETTINGS[i % 4]) for i in range(n)]


def random_settings(n: int, seed) -> list[SettingsPair]:
    idx = _rng(np.random.SeedSequence(seed, spawn_key=(0,))).integers(0, 4, n)
    return [SettingsPair(*SETTINGS[i]) for i in idx]


def _trial_seed(seed, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(1, i))


def simulate_classical_dataset(cfg: ClassicalSourceConfig, n_trials: int, seed: int,
                               settings: Sequence[SettingsPair] | str = "cycle") -> Dataset:
    """Back-to-back trials on one timeline; settings cycle through the four pairs by default."""
    if n_trials < 0:
        raise ValueError("n_trials must be >= 0")
    if isinstance(settings, str):
        settings = cycled_settings(n_trials) if settings == "cycle" else random_settings(n_trials, seed)
    d = cfg.trial_duration
    trials = [simulate_classical_trial(cfg, s, d, _trial_seed(seed, i), start=i * d, trial_id=i)
              for i, s in enumerate(settings)]
    meta = {"source": "classical", "seed": str(seed), "duration": str(d)}
    return Dataset(trials, meta)


def classical_expected_counts(cfg: ClassicalSourceConfig, radius: float) -> CoincidenceCounts:
    """Expected per-group counts under detection-centered matching.

    Enumerates the 16 click patterns of a group with pulses at their nominal
    times.  Pulse width, jitter and dark counts are ignored, so the result is
    exact only for radii well away from multiples of the pulse spacing.
    """
    from ._kernels import greedy_coincidences

    pulses = cfg.pulses()
    counts = CoincidenceCounts()
    for s in SETTINGS:
        probs = classical_click_probs(cfg, s)
        for pattern in itertools.product((0, 1), repeat=4):
            w = 1.0
            for p, c in zip(probs, pattern):
                w *= p if c else 1 - p
            if w == 0:
                continue
            a = np.array([pu[1] for pu, c in zip(pulses, pattern) if c and pu[0] == "A"], float)
            b = np.array([pu[1] for pu, c in zip(pulses, pattern) if c and pu[0] == "B"], float)
            n = int(greedy_coincidences(a, b, float(radius))) if a.size and b.size else 0
            counts.add(*s, w * n, w * (a.size - n), w * (b.size - n), 0.0)
        counts.exposure[s] = 1.0
    return counts


def classical_expected_ch(cfg: ClassicalSourceConfig, radius: float) -> float:
    return bell_ch(classical_expected_counts(cfg, radius)).b_ch


# --- quantum source --------------------------------------------------------

def pair_probabilities(theta: float, alpha: float, beta: float) -> tuple[float, float, float]:
    """(P(both), P_A, P_B) for projections at angles alpha, beta (radians)."""
    amp = math.cos(theta) * math.cos(alpha) * math.cos(beta) \
        + math.sin(theta) * math.sin(alpha) * math.sin(beta)
    pa = (math.cos(theta) * math.cos(alpha)) ** 2 + (math.sin(theta) * math.sin(alpha)) ** 2
    pb = (math.cos(theta) * math.cos(beta)) ** 2 + (math.sin(theta) * math.sin(beta)) ** 2
    return amp * amp, pa, pb


def ch_value(theta: float, angles_rad: Sequence[float], efficiency: float | tuple = 1.0) -> float:
    """CH parameter per pair for analyzer angles ``(a0, a1, b0, b1)``."""
    ea, eb = (efficiency, efficiency) if np.isscalar(efficiency) else efficiency
    a0, a1, b0, b1 = angles_rad
    tot = 0.0
    for (sa, sb), sign in zip(SETTINGS, (1, 1, 1, -1)):
        p11, _, _ = pair_probabilities(theta, (a0, a1)[sa], (b0, b1)[sb])
        tot += sign * ea * eb * p11
    _, pa, pb = pair_probabilities(theta, a0, b0)
    return tot - ea * pa - eb * pb


def optimal_ch_angles(theta: float, efficiency: float = 1.0, step_deg: float = 0.5) -> tuple[tuple, float]:
    """Analyzer angles (radians) maximizing CH, and the maximum.

    A grid over (a0, a1) with b0 and b1 maximized independently on the same
    grid, then a Nelder-Mead polish of all four angles.
    """
    g = np.radians(np.arange(0.0, 180.0, step_deg))
    c, s = math.cos(theta), math.sin(theta)
    amp = c * np.outer(np.cos(g), np.cos(g)) + s * np.outer(np.sin(g), np.sin(g))
    joint = efficiency ** 2 * amp ** 2                  # [alpha, beta]
    marg = efficiency * ((c * np.cos(g)) ** 2 + (s * np.sin(g)) ** 2)
    best = (-math.inf, None)
    for i in range(g.size):
        f0 = joint[i][None, :] + joint - marg[None, :]  # rows: a1, cols: b0
        f1 = joint[i][None, :] - joint                  # rows: a1, cols: b1
        k0 = f0.argmax(axis=1)
        k1 = f1.argmax(axis=1)
        tot = f0[np.arange(g.size), k0] + f1[np.arange(g.size), k1] - marg[i]
        j = int(tot.argmax())
        if tot[j] > best[0]:
            best = (float(tot[j]), (g[i], g[j], g[k0[j]], g[k1[j]]))
    res = minimize(lambda x: -ch_value(theta, x, efficiency), np.array(best[1]),
                   method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    if -res.fun >= best[0]:
        return tuple(float(v) for v in res.x), float(-res.fun)
    return tuple(float(v) for v in best[1]), best[0]


def quantum_ch_max(theta: float, efficiency: float = 1.0) -> float:
    return optimal_ch_angles(theta, efficiency)[1]


@dataclass(frozen=True)
class QuantumSourceConfig:
    """Entangled-pair source with detector efficiencies and timing noise.

    ``analyzer_deg=None`` picks the CH-optimal angles for ``theta`` and the
    efficiencies.  In ``pulsed`` mode pairs are emitted at clock ticks
    (``pulse_period`` apart, at most one pair per pulse) and the dataset
    carries the ticks.
    """

    theta: float = math.pi / 4
    analyzer_deg: tuple | None = None
    efficiency_a: float = 0.9
    efficiency_b: float = 0.9
    pair_rate: float = 5000.0
    mode: str = "continuous"
    trial_duration: int = 64_000_000
    pulse_period: int = 64 * UNITS_PER_US
    pulse_spread: float = 0.0
    tick_phase: int = 32 * UNITS_PER_US
    jitter_sigma: float = 64.0
    latency_a: int = 0
    latency_b: int = 0
    dark_rate: float = 100.0
    background_rate: float = 0.0

    def __post_init__(self):
        if not 0 <= self.theta <= math.pi / 4 + 1e-12:
            raise ValueError("theta must lie in [0, pi/4]")
        if self.dark_rate < 0 or self.background_rate < 0 or self.jitter_sigma < 0:
            raise ValueError("dark_rate, background_rate and jitter_sigma must be >= 0")
        if self.mode not in ("continuous", "pulsed"):
            raise ValueError("mode must be 'continuous' or 'pulsed'")
        for e in (self.efficiency_a, self.efficiency_b):
            if not 0 <= e <= 1:
                raise ValueError("efficiencies must lie in [0, 1]")
        if self.pair_rate < 0 or self.trial_duration <= 0 or self.pulse_period <= 0:
            raise ValueError("pair_rate >= 0, trial_duration > 0 and pulse_period > 0 required")
        if self.mode == "pulsed" and self.pair_probability > 1:
            raise ValueError("pair_rate * pulse_period exceeds one pair per pulse")
        if self.analyzer_deg is not None and len(self.analyzer_deg) != 4:
            raise ValueError("analyzer_deg needs four angles (a0, a1, b0, b1)")

    @property
    def pair_probability(self) -> float:
        return self.pair_rate * self.pulse_period * TIME_UNIT_S

    def angles_rad(self) -> tuple[float, float, float, float]:
        if self.analyzer_deg is not None:
            return tuple(math.radians(a) for a in self.analyzer_deg)
        eff = math.sqrt(self.efficiency_a * self.efficiency_b)
        return optimal_ch_angles(self.theta, eff)[0]

    def resolved(self) -> "QuantumSourceConfig":
        """Copy with ``analyzer_deg`` filled in."""
        if self.analyzer_deg is not None:
            return self
        return dataclasses.replace(self, analyzer_deg=tuple(math.degrees(a) for a in self.angles_rad()))

    def ticks(self) -> np.ndarray:
        n = int((self.trial_duration - self.tick_phase) // self.pulse_period) + 1
        t = self.tick_phase + self.pulse_period * np.arange(max(n, 0), dtype=np.int64)
        return t[t < self.trial_duration]


def quantum_outcome_probs(cfg: QuantumSourceConfig, settings: tuple[int, int]) -> np.ndarray:
    """Per-pair probabilities of (both, A only, B only, neither)."""
    a0, a1, b0, b1 = cfg.angles_rad()
    p11, pa, pb = pair_probabilities(cfg.theta, (a0, a1)[settings[0]], (b0, b1)[settings[1]])
    both = cfg.efficiency_a * cfg.efficiency_b * p11
    ao = cfg.efficiency_a * pa - both
    bo = cfg.efficiency_b * pb - both
    p = np.clip(np.array([both, ao, bo, 1 - both - ao - bo]), 0, None)
    return p / p.sum()


def simulate_quantum_trial(cfg: QuantumSourceConfig, settings: SettingsPair | tuple[int, int],
                           rng_seed=None, trial_id: int = 0) -> TrialRecord:
    if not isinstance(settings, SettingsPair):
        settings = SettingsPair(*settings)
    rng = _rng(rng_seed)
    dur = cfg.trial_duration
    if cfg.mode == "continuous":
        n = rng.poisson(cfg.pair_rate * dur * TIME_UNIT_S)
        emit = rng.uniform(0, dur, n)
    else:
        ticks = cfg.ticks()
        emit = ticks[rng.random(ticks.size) < cfg.pair_probability].astype(np.float64)
        if cfg.pulse_spread > 0:
            emit = emit + rng.uniform(-0.5, 0.5, emit.size) * cfg.pulse_spread
    outcome = rng.choice(4, size=emit.size, p=quantum_outcome_probs(cfg, settings.as_tuple()))
    a = emit[(outcome == 0) | (outcome == 1)]
    b = emit[(outcome == 0) | (outcome == 2)]
    a = a + cfg.latency_a + _jitter(rng, a.size, cfg.jitter_sigma)
    b = b + cfg.latency_b + _jitter(rng, b.size, cfg.jitter_sigma)
    noise = cfg.dark_rate + cfg.background_rate
    a = np.concatenate((a, _dark(rng, noise, dur)))
    b = np.concatenate((b, _dark(rng, noise, dur)))
    return TrialRecord(trial_id, settings, TimetagSequence(_finish(a, dur), "A"),
                       TimetagSequence(_finish(b, dur), "B"), dur)


def simulate_quantum_dataset(cfg: QuantumSourceConfig, n_trials: int, seed: int,
                             settings: Sequence[SettingsPair] | str = "random") -> Dataset:
    """Independent trials with uniformly random settings (or the given sequence)."""
    if n_trials < 0:
        raise ValueError("n_trials must be >= 0")
    cfg = cfg.resolved()
    if isinstance(settings, str):
        settings = random_settings(n_trials, seed) if settings == "random" else cycled_settings(n_trials)
    trials = [simulate_quantum_trial(cfg, s, _trial_seed(seed, i), trial_id=i)
              for i, s in enumerate(settings)]
    meta = {"source": "quantum", "seed": str(seed), "duration": str(cfg.trial_duration),
            "mode": cfg.mode}
    ticks = cfg.ticks() if cfg.mode == "pulsed" else None
    return Dataset(trials, meta, ticks)


# --- tuning ----------------------------------------------------------------

def tune_for_theta(target_theta: float, radius: int = 2 * UNITS_PER_US,
                   base: ClassicalSourceConfig | None = None, efficiency: float = 1.0,
                   tol: float = 1e-4) -> ClassicalSourceConfig:
    """Configure the classical source to mimic the quantum CH value at ``target_theta``.

    The analyzers are set to the CH-optimal angles for the target state, and the
    input pulses are turned toward their intended analyzers by the rotation
    that brings the detection-centered CH value (at ``radius``) down to the
    quantum maximum.
    """
    base = base or ClassicalSourceConfig()
    angles, target = optimal_ch_angles(target_theta, efficiency)
    cfg0 = dataclasses.replace(base, analyzer_deg=tuple(math.degrees(a) for a in angles),
                               rotation_deg=0.0)
    limit = min(cfg0.pulse_separations_deg())

    def f(eps):
        return classical_expected_ch(dataclasses.replace(cfg0, rotation_deg=eps), radius) - target

    grid = np.linspace(0.0, limit * (1 - 1e-6), 400)
    vals = [f(e) for e in grid]
    for lo, hi, vlo, vhi in zip(grid, grid[1:], vals, vals[1:]):
        if vlo == 0:
            return dataclasses.replace(cfg0, rotation_deg=float(lo))
        if vlo > 0 > vhi:
            eps = brentq(f, lo, hi, xtol=tol * 1e-3)
            return dataclasses.replace(cfg0, rotation_deg=float(eps))
    raise TuningError(f"CH value {target:.5f} at theta={target_theta:.4f} is out of reach "
                      f"(range {min(vals) + target:.4f}..{max(vals) + target:.4f})")


# --- config files ----------------------------------------------------------

def _convert(value: str, default):
    if isinstance(default, bool):
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1")
    if isinstance(default, int):
        return int(float(value))
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple) or default is None:
        if value.strip().lower() in ("", "none"):
            return None
        return tuple(float(v) for v in value.split(","))
    return value


def config_from_kv(kv: dict[str, str]) -> ClassicalSourceConfig | QuantumSourceConfig:
    kv = dict(kv)
    kind = kv.pop("source", "classical")
    cls = {"classical": ClassicalSourceConfig, "quantum": QuantumSourceConfig}.get(kind)
    if cls is None:
        raise ValueError(f"unknown source {kind!r}")
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    unknown = set(kv) - set(defaults)
    if unknown:
        raise ValueError(f"unknown {kind} source keys: {sorted(unknown)}")
    return cls(**{k: _convert(v, defaults[k]) for k, v in kv.items()})


def load_source_config(path: str | Path) -> ClassicalSourceConfig | QuantumSourceConfig:
    return config_from_kv(read_kv(path))


def config_to_kv(cfg: ClassicalSourceConfig | QuantumSourceConfig) -> dict[str, str]:
    out = {"source": "classical" if isinstance(cfg, ClassicalSourceConfig) else "quantum"}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            out[f.name] = "none"
        elif isinstance(v, tuple):
            out[f.name] = ",".join(repr(float(x)) for x in v)
        else:
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
    return out


def write_source_config(cfg, path: str | Path) -> None:
    kv = config_to_kv(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(kv):
            fh.write(f"{k}={kv[k]}\n")
