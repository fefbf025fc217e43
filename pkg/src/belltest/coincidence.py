"""Conventional coincidence analyses and the CH Bell parameter.

Two ways of defining coincidences are supported:

* detection-centered: a window of +-radius around every A detection (this is
  the analysis a coincidence-time-loophole source can fool);
* predefined: windows fixed by a synchronization comb, independent of which
  settings are in force.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kernels import greedy_coincidences
from .timetags import SETTINGS, Dataset, TrialRecord, UNITS_PER_US


class DegenerateNormalizationError(ValueError):
    """No events at any setting, so the pair rate cannot be inferred."""


def _zeros():
    return np.zeros((2, 2), dtype=np.float64)


@dataclass
class CoincidenceCounts:
    """Settings-resolved tallies; arrays are indexed ``[s_a, s_b]``.

    ``singles_a`` counts A detections without a matched B detection (and vice
    versa).  ``exposure`` is the total time, in timetag units, spent at each
    joint setting.
    """

    coinc: np.ndarray = field(default_factory=_zeros)
    singles_a: np.ndarray = field(default_factory=_zeros)
    singles_b: np.ndarray = field(default_factory=_zeros)
    exposure: np.ndarray = field(default_factory=_zeros)

    def add(self, sa: int, sb: int, coinc: float, singles_a: float, singles_b: float,
            exposure: float) -> None:
        self.coinc[sa, sb] += coinc
        self.singles_a[sa, sb] += singles_a
        self.singles_b[sa, sb] += singles_b
        self.exposure[sa, sb] += exposure

    def __iadd__(self, other: "CoincidenceCounts") -> "CoincidenceCounts":
        self.coinc += other.coinc
        self.singles_a += other.singles_a
        self.singles_b += other.singles_b
        self.exposure += other.exposure
        return self

    def scaled(self, k: float) -> "CoincidenceCounts":
        return CoincidenceCounts(self.coinc * k, self.singles_a * k, self.singles_b * k,
                                 self.exposure * k)

    @property
    def total_a(self) -> np.ndarray:
        return self.coinc + self.singles_a

    @property
    def total_b(self) -> np.ndarray:
        return self.coinc + self.singles_b

    def rows(self) -> list[tuple]:
        return [
            (sa, sb, self.coinc[sa, sb], self.singles_a[sa, sb], self.singles_b[sa, sb],
             self.exposure[sa, sb])
            for sa, sb in SETTINGS
        ]


COUNTS_HEADER = ("s_a", "s_b", "coinc", "singles_a", "singles_b", "exposure_units")
SWEEP_HEADER = ("radius_units", "b_ch", "naive_sigma")


def _fmt(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def write_counts_csv(counts: CoincidenceCounts, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUNTS_HEADER)
        for row in counts.rows():
            w.writerow([row[0], row[1], *(_fmt(v) for v in row[2:])])


@dataclass(frozen=True)
class WindowSpec:
    """Coincidence-window definition, all times in timetag units.

    For ``predefined`` windows, ``sync_period=None`` tiles time with contiguous
    windows of the given width starting at each trial's origin.  Otherwise a
    sync comb with that period is synthesized from the data and re-centered
    every ``recenter_every`` detections; the re-centering uses detection phases
    modulo ``pulse_spacing`` (default: the sync period).
    """

    kind: str
    radius: int | None = None
    width: int | None = None
    sync_period: int | None = None
    recenter_every: int = 500
    pulse_spacing: int | None = None

    def __post_init__(self):
        if self.kind == "detection_centered":
            if self.radius is None or self.radius <= 0:
                raise ValueError("detection-centered windows need radius > 0")
        elif self.kind == "predefined":
            if self.width is None or self.width <= 0:
                raise ValueError("predefined windows need width > 0")
            if self.sync_period is not None and self.sync_period <= 0:
                raise ValueError("sync_period must be > 0")
            if self.recenter_every < 0:
                raise ValueError("recenter_every must be >= 0")
        else:
            raise ValueError(f"unknown window kind {self.kind!r}")

    @classmethod
    def detection_centered(cls, radius: int) -> "WindowSpec":
        return cls("detection_centered", radius=radius)

    @classmethod
    def predefined(cls, width: int, sync_period: int | None = 10 * UNITS_PER_US,
                   recenter_every: int = 500, pulse_spacing: int | None = None) -> "WindowSpec":
        return cls("predefined", width=width, sync_period=sync_period,
                   recenter_every=recenter_every, pulse_spacing=pulse_spacing)


# --- detection-centered ----------------------------------------------------

@dataclass(frozen=True)
class TrialCounts:
    coinc: int
    singles_a: int
    singles_b: int


def count_detection_centered(trial: TrialRecord, radius: int) -> TrialCounts:
    """Greedy nearest-first matching of B tags to A-centered windows."""
    a, b = trial.a, trial.b
    c = int(greedy_coincidences(a, b, float(radius))) if a.size and b.size else 0
    return TrialCounts(c, a.size - c, b.size - c)


def optimal_coincidences(a: np.ndarray, b: np.ndarray, radius: int) -> int:
    """Maximum number of A/B pairs with ``|a - b| <= radius``.

    All windows have the same length, so assigning each A tag (in time order)
    the earliest still-free B tag inside its window is optimal.
    """
    j = 0
    count = 0
    m = b.size
    for ai in a.tolist():
        while j < m and b[j] < ai - radius:
            j += 1
        if j < m and b[j] <= ai + radius:
            count += 1
            j += 1
    return count


def trial_exposure(trial: TrialRecord, dataset: Dataset | None = None) -> int:
    if trial.duration is not None:
        return int(trial.duration)
    if dataset is not None and dataset.duration is not None:
        return dataset.duration
    last = max([int(s[-1]) + 1 for s in (trial.a, trial.b) if s.size] or [1])
    return last


def detection_centered_counts(dataset: Dataset | Iterable[TrialRecord], radius: int) -> CoincidenceCounts:
    trials = dataset.trials if isinstance(dataset, Dataset) else list(dataset)
    ds = dataset if isinstance(dataset, Dataset) else None
    counts = CoincidenceCounts()
    for t in trials:
        tc = count_detection_centered(t, radius)
        counts.add(t.settings.sa, t.settings.sb, tc.coinc, tc.singles_a, tc.singles_b,
                   trial_exposure(t, ds))
    return counts


def matching_discrepancy(dataset: Dataset | Iterable[TrialRecord], radius: int) -> tuple[int, int]:
    """(greedy, optimal) total coincidence counts over the trials."""
    trials = dataset.trials if isinstance(dataset, Dataset) else list(dataset)
    g = o = 0
    for t in trials:
        g += count_detection_centered(t, radius).coinc
        o += optimal_coincidences(t.a, t.b, radius)
    return g, o


# --- predefined windows ----------------------------------------------------

@dataclass(frozen=True)
class SyncComb:
    """Piecewise-periodic comb on the concatenated dataset timeline."""

    starts: np.ndarray    # segment start times (global)
    anchors: np.ndarray   # comb phase anchor valid from each start
    period: float

    def centers(self, t0: float, t1: float) -> np.ndarray:
        """Window centers falling in ``[t0, t1)``."""
        out = []
        nseg = self.starts.size
        for k in range(nseg):
            s0 = max(t0, self.starts[k])
            s1 = min(t1, self.starts[k + 1] if k + 1 < nseg else math.inf)
            if s0 >= s1:
                continue
            anchor = self.anchors[k]
            j0 = math.ceil((s0 - anchor) / self.period)
            j1 = math.ceil((s1 - anchor) / self.period)
            if j1 > j0:
                out.append(anchor + self.period * np.arange(j0, j1))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)


def _trial_starts(dataset: Dataset) -> np.ndarray:
    durations = [trial_exposure(t, dataset) for t in dataset.trials]
    return np.concatenate(([0], np.cumsum(durations)))


def synthesize_sync(dataset: Dataset, spec: WindowSpec) -> SyncComb:
    """Build the post-processing sync comb.

    The first window is centered midway between the first two detection events
    of the dataset; the comb then runs at ``spec.sync_period`` and, every
    ``spec.recenter_every`` detections, its phase is corrected by the circular
    mean phase error of the block's detections modulo the pulse spacing.  With
    no pulse spacing there is no re-centering.
    """
    if spec.kind != "predefined" or spec.sync_period is None:
        raise ValueError("sync synthesis needs a predefined spec with a sync period")
    starts = _trial_starts(dataset)
    parts = []
    for k, t in enumerate(dataset.trials):
        if t.a.size or t.b.size:
            parts.append(np.concatenate((t.a, t.b)).astype(np.float64) + starts[k])
    times = np.sort(np.concatenate(parts)) if parts else np.zeros(0)
    if times.size == 0:
        raise ValueError("no detections: cannot seed the sync phase")
    anchor = 0.5 * (times[0] + times[1]) if times.size > 1 else float(times[0])
    period = float(spec.sync_period)
    # Modulo the pulse spacing every detection has the same phase whatever the
    # settings, so re-centering cannot follow the data.  Without a pulse
    # spacing the comb stays strictly periodic.
    spacing = float(spec.pulse_spacing or 0)
    seg_starts = [-math.inf]
    anchors = [anchor]
    step = spec.recenter_every
    if step > 0 and spacing > 0:
        for end in range(step, times.size + 1, step):
            block = times[end - step:end]
            phase = 2 * np.pi * (block - anchor - 0.5 * spacing) / spacing
            err = math.atan2(np.sin(phase).mean(), np.cos(phase).mean())
            anchor = anchor + err * spacing / (2 * np.pi)
            seg_starts.append(float(block[-1]))
            anchors.append(anchor)
    return SyncComb(np.asarray(seg_starts), np.asarray(anchors), period)


def _window_hits(tags: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    if tags.size == 0 or centers.size == 0:
        return np.zeros(centers.size, dtype=bool)
    lo = np.searchsorted(tags, centers - half, side="left")
    hi = np.searchsorted(tags, centers + half, side="right")
    return hi > lo


def _window_centers(dataset: Dataset, spec: WindowSpec, sync_ticks: np.ndarray | None,
                    comb: SyncComb | None) -> list[np.ndarray]:
    out = []
    if sync_ticks is not None:
        ticks = np.asarray(sync_ticks, dtype=np.float64)
        return [ticks for _ in dataset.trials]
    starts = _trial_starts(dataset)
    comb = comb or synthesize_sync(dataset, spec)
    for k in range(len(dataset.trials)):
        out.append(comb.centers(starts[k], starts[k + 1]) - starts[k])
    return out


def count_predefined(dataset: Dataset, spec: WindowSpec, sync_ticks: np.ndarray | None = None,
                     comb: SyncComb | None = None) -> CoincidenceCounts:
    """Count coincidences in predefined windows.

    Windows are centered on ``sync_ticks`` (trial-local times, shared by all
    trials) when given; otherwise on a synthesized comb.  A window is a
    coincidence when both parties have at least one tag inside it, a single
    when only one does.  ``exposure`` is the number of windows times the
    window spacing, so ``bell_ch(counts, 1 / spacing)`` normalizes per window.
    """
    if spec.kind != "predefined":
        raise ValueError("count_predefined needs a predefined WindowSpec")
    if sync_ticks is None and spec.sync_period is not None and comb is None:
        if not any(t.a.size or t.b.size for t in dataset.trials):
            raise ValueError("no detections: cannot seed the sync phase")
    spacing = window_spacing(spec, sync_ticks)
    counts = CoincidenceCounts()
    if sync_ticks is None and spec.sync_period is None:
        # contiguous tiling: a tag's window is simply tag // width
        for t in dataset.trials:
            n = int(trial_exposure(t, dataset) // spec.width)
            wa = np.unique(t.a // spec.width)
            wb = np.unique(t.b // spec.width)
            wa, wb = wa[wa < n], wb[wb < n]
            both = np.intersect1d(wa, wb, assume_unique=True).size
            counts.add(t.settings.sa, t.settings.sb, both, wa.size - both, wb.size - both,
                       n * spacing)
        return counts
    centers = _window_centers(dataset, spec, sync_ticks, comb)
    half = spec.width / 2.0
    for t, c in zip(dataset.trials, centers):
        ha = _window_hits(t.a, c, half)
        hb = _window_hits(t.b, c, half)
        both = int(np.count_nonzero(ha & hb))
        counts.add(t.settings.sa, t.settings.sb, both,
                   int(np.count_nonzero(ha)) - both, int(np.count_nonzero(hb)) - both,
                   c.size * spacing)
    return counts


def window_spacing(spec: WindowSpec, sync_ticks: np.ndarray | None = None) -> float:
    if sync_ticks is not None and len(sync_ticks) > 1:
        return float(np.median(np.diff(np.asarray(sync_ticks, dtype=np.float64))))
    if spec.sync_period is not None:
        return float(spec.sync_period)
    return float(spec.width)


# --- Bell parameter --------------------------------------------------------

def infer_pair_rate(counts: CoincidenceCounts) -> float:
    """Lower bound on the pair rate: max over settings of (A + B - coincidences) / exposure."""
    if np.any(counts.exposure <= 0):
        missing = [s for s in SETTINGS if counts.exposure[s] <= 0]
        raise ValueError(f"no exposure at settings {missing}")
    n = counts.total_a + counts.total_b - counts.coinc
    return float(np.max(n / counts.exposure))


@dataclass(frozen=True)
class CHResult:
    b_ch: float
    naive_sigma: float   # Gaussian-assumption only; not a certificate
    pair_rate: float

    @property
    def naive_snr(self) -> float:
        return self.b_ch / self.naive_sigma if self.naive_sigma > 0 else math.inf


def bell_ch(counts: CoincidenceCounts, pair_rate: float | None = None) -> CHResult:
    """CH parameter with every probability estimated as rate / pair_rate.

    ``p_A(t_0=1)`` is the average of the A detection rates at (0,0) and (0,1),
    and likewise for B.  Without an explicit ``pair_rate`` the inferred lower
    bound from :func:`infer_pair_rate` is used.
    """
    if pair_rate is None:
        pair_rate = infer_pair_rate(counts)
        if pair_rate <= 0:
            raise DegenerateNormalizationError("no events at any setting; pair rate is 0")
    if pair_rate <= 0:
        raise ValueError(f"pair_rate must be > 0, got {pair_rate}")
    exp = counts.exposure
    if np.any(exp <= 0):
        missing = [s for s in SETTINGS if exp[s] <= 0]
        raise ValueError(f"no exposure at settings {missing}")
    n = pair_rate * exp
    pc = counts.coinc / n
    pa = counts.total_a / n
    pb = counts.total_b / n
    b = pc[0, 0] + pc[0, 1] + pc[1, 0] - pc[1, 1] - 0.5 * (pa[0, 0] + pa[0, 1]) \
        - 0.5 * (pb[0, 0] + pb[1, 0])

    def var(p, k):
        p = min(max(p, 0.0), 1.0)
        return p * (1 - p) / k

    v = sum(var(pc[s], n[s]) for s in SETTINGS)
    v += 0.25 * (var(pa[0, 0], n[0, 0]) + var(pa[0, 1], n[0, 1]))
    v += 0.25 * (var(pb[0, 0], n[0, 0]) + var(pb[1, 0], n[1, 0]))
    return CHResult(float(b), float(math.sqrt(v)), float(pair_rate))


# --- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    radius: int
    b_ch: float
    naive_sigma: float


def _sweep_one(dataset: Dataset, kind: str, radius: int, spec_kwargs: dict,
               sync_ticks, comb, pair_rate) -> SweepPoint:
    if kind == "detection_centered":
        counts = detection_centered_counts(dataset, radius)
        rate = pair_rate
    else:
        spec = WindowSpec.predefined(2 * radius, **spec_kwargs)
        counts = count_predefined(dataset, spec, sync_ticks, comb)
        rate = pair_rate if pair_rate is not None else 1.0 / window_spacing(spec, sync_ticks)
    try:
        res = bell_ch(counts, rate)
    except DegenerateNormalizationError:
        return SweepPoint(int(radius), math.nan, math.nan)
    return SweepPoint(int(radius), res.b_ch, res.naive_sigma)


def window_sweep(dataset: Dataset, kind: str, radii: Sequence[int], *,
                 sync_period: int | None = 10 * UNITS_PER_US, recenter_every: int = 500,
                 pulse_spacing: int | None = None, sync_ticks: np.ndarray | None = None,
                 pair_rate: float | None = None, threads: int = 1) -> list[SweepPoint]:
    """B_CH as a function of window radius.

    For ``predefined`` sweeps the window width is twice the radius and each
    window counts as one trial (pair rate = one per window spacing).  Detection-
    centered sweeps use the inferred pair rate unless ``pair_rate`` is given.
    """
    kind = kind.replace("-", "_")
    if kind not in ("detection_centered", "predefined"):
        raise ValueError(f"unknown sweep kind {kind!r}")
    radii = [int(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be sorted ascending")
    if not radii:
        return []
    spec_kwargs = dict(sync_period=sync_period, recenter_every=recenter_every,
                       pulse_spacing=pulse_spacing)
    comb = None
    if kind == "predefined" and sync_ticks is None and sync_period is not None:
        comb = synthesize_sync(dataset, WindowSpec.predefined(2 * radii[0], **spec_kwargs))

    def run(r):
        return _sweep_one(dataset, kind, r, spec_kwargs, sync_ticks, comb, pair_rate)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, radii))
    return [run(r) for r in radii]


def write_sweep_csv(points: Iterable[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p in points:
            w.writerow([p.radius, repr(p.b_ch), repr(p.naive_sigma)])
