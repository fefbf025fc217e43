"""Timetag data model, the dataset file format and preprocessing transforms.

All times are integers in units of 156.25 ps (``TIME_UNIT_S``).  Sequences are
stored as sorted ``int64`` numpy arrays; values are always non-negative.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

TIME_UNIT_S = 156.25e-12
UNITS_PER_US = 6400
UNITS_PER_NS = 6.4

CSV_HEADER = ("trial_id", "s_a", "s_b", "party", "timetag")
EMPTY_PARTY = "-"

SETTINGS = ((0, 0), (0, 1), (1, 0), (1, 1))


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def seconds_to_units(t: float) -> int:
    return int(round(t / TIME_UNIT_S))


def units_to_seconds(n: float) -> float:
    return n * TIME_UNIT_S


def _as_tags(values: Iterable[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.size and arr.min() < 0:
        raise ValueError("timetags must be non-negative")
    return arr


@dataclass(frozen=True, eq=False)
class TimetagSequence:
    """Detection times of one party in one trial, sorted ascending."""

    tags: np.ndarray
    party: str = "A"

    def __post_init__(self):
        if self.party not in ("A", "B"):
            raise ValueError(f"party must be 'A' or 'B', got {self.party!r}")
        tags = _as_tags(self.tags)
        if tags.size > 1 and np.any(np.diff(tags) < 0):
            tags = np.sort(tags, kind="stable")
        tags.setflags(write=False)
        object.__setattr__(self, "tags", tags)

    def __len__(self) -> int:
        return int(self.tags.size)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tags.tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimetagSequence):
            return NotImplemented
        return self.party == other.party and np.array_equal(self.tags, other.tags)

    def with_tags(self, tags: np.ndarray) -> "TimetagSequence":
        return TimetagSequence(tags, self.party)


@dataclass(frozen=True)
class SettingsPair:
    sa: int
    sb: int

    def __post_init__(self):
        if self.sa not in (0, 1) or self.sb not in (0, 1):
            raise ValueError(f"settings must be 0 or 1, got ({self.sa}, {self.sb})")

    @property
    def probability(self) -> Fraction:
        return Fraction(1, 4)

    @property
    def index(self) -> int:
        """Position in ``SETTINGS``: (0,0)->0, (0,1)->1, (1,0)->2, (1,1)->3."""
        return 2 * self.sa + self.sb

    def as_tuple(self) -> tuple[int, int]:
        return (self.sa, self.sb)


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    settings: SettingsPair
    seq_a: TimetagSequence
    seq_b: TimetagSequence
    duration: int | None = None

    def __post_init__(self):
        if self.seq_a.party != "A" or self.seq_b.party != "B":
            raise ValueError("seq_a must belong to party A and seq_b to party B")
        if self.duration is not None:
            for seq in (self.seq_a, self.seq_b):
                if len(seq) and seq.tags[-1] >= self.duration:
                    raise ValueError(
                        f"trial {self.trial_id}: tag {seq.tags[-1]} outside [0, {self.duration})"
                    )

    @property
    def a(self) -> np.ndarray:
        return self.seq_a.tags

    @property
    def b(self) -> np.ndarray:
        return self.seq_b.tags

    def replace(self, seq_a: TimetagSequence | None = None,
                seq_b: TimetagSequence | None = None) -> "TrialRecord":
        return TrialRecord(
            self.trial_id,
            self.settings,
            seq_a if seq_a is not None else self.seq_a,
            seq_b if seq_b is not None else self.seq_b,
            self.duration,
        )


def make_trial(trial_id: int, sa: int, sb: int, a: Iterable[int], b: Iterable[int],
               duration: int | None = None) -> TrialRecord:
    return TrialRecord(
        trial_id,
        SettingsPair(sa, sb),
        TimetagSequence(np.asarray(list(a) if not isinstance(a, np.ndarray) else a), "A"),
        TimetagSequence(np.asarray(list(b) if not isinstance(b, np.ndarray) else b), "B"),
        duration,
    )


@dataclass
class Dataset:
    trials: list[TrialRecord] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    ticks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.trials)

    def __getitem__(self, i):
        return self.trials[i]

    @property
    def duration(self) -> int | None:
        d = self.metadata.get("duration")
        return int(d) if d not in (None, "") else None

    def subset(self, trials: Sequence[TrialRecord]) -> "Dataset":
        return Dataset(list(trials), dict(self.metadata), self.ticks)


# --- file format -----------------------------------------------------------

def meta_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix(".meta")


def ticks_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix(".ticks.csv")


def format_dataset(dataset: Dataset) -> str:
    """Render the canonical CSV text of a dataset."""
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for trial in dataset.trials:
        sa, sb = trial.settings.as_tuple()
        prefix = f"{trial.trial_id},{sa},{sb},"
        if len(trial.seq_a) == 0 and len(trial.seq_b) == 0:
            buf.write(prefix + EMPTY_PARTY + ",\n")
            continue
        for party, tags in (("A", trial.a), ("B", trial.b)):
            if tags.size:
                head = prefix + party + ","
                buf.write("".join(f"{head}{t}\n" for t in tags.tolist()))
    return buf.getvalue()


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write dataset CSV plus ``.meta`` and (when present) ``.ticks.csv`` sidecars."""
    path = Path(path)
    path.write_text(format_dataset(dataset), encoding="utf-8")
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        for key in sorted(dataset.metadata):
            fh.write(f"{key}={dataset.metadata[key]}\n")
    if dataset.ticks is not None:
        write_ticks(dataset.ticks, ticks_path(path))


def write_ticks(ticks: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tick\n")
        fh.write("".join(f"{t}\n" for t in np.asarray(ticks, dtype=np.int64).tolist()))


def read_ticks(path: str | Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "tick":
            raise DatasetFormatError(f"expected header 'tick', got {header!r}", 1)
        values = [int(line) for line in fh if line.strip()]
    return np.asarray(values, dtype=np.int64)


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse a ``key=value`` text file; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetFormatError(f"expected key=value, got {line!r}", lineno)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def parse_dataset(text: str, metadata: dict[str, str] | None = None) -> Dataset:
    metadata = dict(metadata or {})
    duration = metadata.get("duration")
    duration = int(duration) if duration not in (None, "") else None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("empty file, missing header", 1) from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise DatasetFormatError(f"bad header {header!r}", 1)

    trials: list[TrialRecord] = []
    cur_id: int | None = None
    cur_settings: tuple[int, int] | None = None
    tags: dict[str, list[int]] = {"A": [], "B": []}

    def flush():
        if cur_id is None:
            return
        trials.append(
            TrialRecord(
                cur_id,
                SettingsPair(*cur_settings),
                TimetagSequence(np.asarray(tags["A"], dtype=np.int64), "A"),
                TimetagSequence(np.asarray(tags["B"], dtype=np.int64), "B"),
                duration,
            )
        )

    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise DatasetFormatError(f"expected 5 fields, got {len(row)}", lineno)
        try:
            trial_id = int(row[0])
            sa, sb = int(row[1]), int(row[2])
        except ValueError as exc:
            raise DatasetFormatError(str(exc), lineno) from None
        if sa not in (0, 1) or sb not in (0, 1):
            raise DatasetFormatError(f"settings must be 0/1, got ({sa},{sb})", lineno)
        party = row[3]
        if trial_id != cur_id:
            if cur_id is not None and trial_id <= cur_id:
                raise DatasetFormatError(
                    f"trial_id {trial_id} not increasing (previous {cur_id})", lineno
                )
            flush()
            cur_id, cur_settings = trial_id, (sa, sb)
            tags = {"A": [], "B": []}
        elif (sa, sb) != cur_settings:
            raise DatasetFormatError(f"settings change inside trial {trial_id}", lineno)
        if party == EMPTY_PARTY:
            if row[4] != "":
                raise DatasetFormatError("sentinel row must have empty timetag", lineno)
            continue
        if party not in ("A", "B"):
            raise DatasetFormatError(f"unknown party {party!r}", lineno)
        try:
            t = int(row[4])
        except ValueError:
            raise DatasetFormatError(f"bad timetag {row[4]!r}", lineno) from None
        if t < 0:
            raise DatasetFormatError(f"negative timetag {t}", lineno)
        tags[party].append(t)
    flush()
    return Dataset(trials, metadata)


def read_dataset(path: str | Path) -> Dataset:
    """Load a dataset CSV and its sidecars (``.meta`` and ``.ticks.csv`` if present)."""
    path = Path(path)
    mp = meta_path(path)
    metadata = read_kv(mp) if mp.exists() else {}
    ds = parse_dataset(path.read_text(encoding="utf-8"), metadata)
    tp = ticks_path(path)
    if tp.exists():
        ds.ticks = read_ticks(tp)
    return ds


# --- preprocessing ---------------------------------------------------------

def apply_offset(seq: TimetagSequence, offset: int) -> TimetagSequence:
    """Shift every tag by ``offset`` units; tags that would become negative are dropped."""
    if offset == 0:
        return seq
    shifted = seq.tags + np.int64(offset)
    return seq.with_tags(shifted[shifted >= 0])


def compute_clip_start(trial: TrialRecord, block: int = 10**8) -> int:
    """Second multiple of ``block`` past the earliest tag of either party."""
    firsts = [s.tags[0] for s in (trial.seq_a, trial.seq_b) if len(s)]
    if not firsts:
        raise ValueError(f"trial {trial.trial_id} has no detections")
    t0 = int(min(firsts))
    return (t0 // block + 2) * block


def clip_to_window(seq: TimetagSequence, t_start: int, t_end: int) -> TimetagSequence:
    """Keep tags with ``t_start <= t <= t_end``."""
    if t_start > t_end:
        raise ValueError(f"t_start ({t_start}) > t_end ({t_end})")
    lo = np.searchsorted(seq.tags, t_start, side="left")
    hi = np.searchsorted(seq.tags, t_end, side="right")
    return seq.with_tags(seq.tags[lo:hi])


def clip_trial(trial: TrialRecord, span: int = 6 * 10**9, block: int = 10**8) -> TrialRecord:
    """Apply the transient clip: keep ``[t0', t0' + span]`` for both parties."""
    start = compute_clip_start(trial, block)
    return trial.replace(
        clip_to_window(trial.seq_a, start, start + span),
        clip_to_window(trial.seq_b, start, start + span),
    )


def _nearest_tick(tags: np.ndarray, ticks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and distance to the nearest tick for each tag."""
    pos = np.searchsorted(ticks, tags)
    left = np.clip(pos - 1, 0, ticks.size - 1)
    right = np.clip(pos, 0, ticks.size - 1)
    dl = np.abs(tags - ticks[left])
    dr = np.abs(ticks[right] - tags)
    idx = np.where(dr < dl, right, left)
    return idx, np.minimum(dl, dr)


@dataclass(frozen=True)
class PulseFilterResult:
    trial: TrialRecord
    ticks: np.ndarray
    out_of_window: np.ndarray


def pulse_filter(trial: TrialRecord, clock_ticks: np.ndarray, half_width: int,
                 drop_first: int = 0, keep: int | None = None) -> PulseFilterResult:
    """Keep only detections within ``half_width`` of a retained clock tick.

    The first ``drop_first`` ticks are discarded and the next ``keep`` retained.
    Detections that fall outside every retained pulse window (but inside the
    retained span) are tallied per retained pulse by nearest tick, summed over
    both parties; those counts drive :func:`blank_noisy_pulses`.
    """
    ticks = np.asarray(clock_ticks, dtype=np.int64)
    if ticks.size == 0:
        raise ValueError("clock_ticks is empty")
    stop = None if keep is None else drop_first + keep
    kept = ticks[drop_first:stop]
    if kept.size == 0:
        raise ValueError("no clock ticks left after drop_first/keep")
    out_counts = np.zeros(kept.size, dtype=np.int64)
    if kept.size > 1:
        gap = np.diff(kept)
        span_lo = kept[0] - gap[0] // 2
        span_hi = kept[-1] + gap[-1] // 2
    else:
        span_lo, span_hi = kept[0] - half_width, kept[0] + half_width
    new = []
    for seq in (trial.seq_a, trial.seq_b):
        tags = seq.tags
        if tags.size == 0:
            new.append(seq)
            continue
        idx, dist = _nearest_tick(tags, kept)
        inside = dist <= half_width
        outside = ~inside & (tags >= span_lo) & (tags <= span_hi)
        out_counts += np.bincount(idx[outside], minlength=kept.size)
        new.append(seq.with_tags(tags[inside]))
    return PulseFilterResult(trial.replace(*new), kept, out_counts)


def blank_noisy_pulses(trial: TrialRecord, ticks: np.ndarray, half_width: int,
                       out_of_window_counts: np.ndarray, threshold: int = 3,
                       span: int = 3) -> TrialRecord:
    """Remove detections in pulses whose +-``span`` neighbourhood holds
    ``threshold`` or more out-of-window detections."""
    counts = np.asarray(out_of_window_counts, dtype=np.int64)
    ticks = np.asarray(ticks, dtype=np.int64)
    if counts.size != ticks.size:
        raise ValueError("out_of_window_counts must align with ticks")
    if counts.size == 0 or not counts.any():
        return trial
    csum = np.concatenate(([0], np.cumsum(counts)))
    n = counts.size
    i = np.arange(n)
    lo = np.clip(i - span, 0, n)
    hi = np.clip(i + span + 1, 0, n)
    blanked = (csum[hi] - csum[lo]) >= threshold
    if not blanked.any():
        return trial
    new = []
    for seq in (trial.seq_a, trial.seq_b):
        tags = seq.tags
        if tags.size == 0:
            new.append(seq)
            continue
        idx, dist = _nearest_tick(tags, ticks)
        drop = blanked[idx] & (dist <= half_width)
        new.append(seq.with_tags(tags[~drop]))
    return trial.replace(*new)


def pulse_indices(tags: np.ndarray, ticks: np.ndarray, half_width: int) -> np.ndarray:
    """Indices of pulses (into ``ticks``) holding at least one tag within ``half_width``."""
    if tags.size == 0 or ticks.size == 0:
        return np.zeros(0, dtype=np.int64)
    idx, dist = _nearest_tick(np.asarray(tags, dtype=np.int64), ticks)
    return np.unique(idx[dist <= half_width])


def settings_counts(trials: Iterable[TrialRecord]) -> dict[tuple[int, int], int]:
    out = {s: 0 for s in SETTINGS}
    for t in trials:
        out[t.settings.as_tuple()] += 1
    return out

