"""Command-line interface: ``belltest {simulate,analyze,sweep,report}``."""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import warnings
from pathlib import Path

from . import coincidence as co
from . import distance as di
from . import sources as so
from . import stats as st
from .timetags import Dataset, read_dataset, read_kv, write_dataset

METHODS = ("detection-centered", "predefined", "distance", "pulse", "pbr")
RUN_KEYS = {"seed", "trials", "source", "method", "radius", "width", "grid", "sync_period",
            "recenter_every", "pulse_spacing", "pair_rate", "half_width"}


class CliError(Exception):
    pass


def _parse_grid(text: str) -> list[int]:
    try:
        start, stop, step = (int(float(x)) for x in text.split(":"))
    except ValueError:
        raise CliError(f"--grid expects START:STOP:STEP, got {text!r}") from None
    if step <= 0 or stop < start or start <= 0:
        raise CliError("--grid needs 0 < START <= STOP and STEP > 0")
    return list(range(start, stop + 1, step))


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).exists():
        raise CliError(f"config file not found: {path}")
    return read_kv(path)


def _pick(args, cfg: dict, key: str, conv=str, default=None):
    """Command-line flag, else config-file value, else default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in cfg:
        return conv(cfg[key])
    return default


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read(args) -> Dataset:
    if not args.data:
        raise CliError("--data PATH is required")
    if not Path(args.data).exists():
        raise CliError(f"dataset not found: {args.data}")
    return read_dataset(args.data)


def _pulse_spacing(args, cfg: dict, ds: Dataset) -> int | None:
    """Flag or config value, else the spacing recorded by a classical simulation."""
    v = _pick(args, cfg, "pulse_spacing", int)
    if v is None and ds.metadata.get("config.source") == "classical":
        v = int(ds.metadata.get("config.pulse_spacing", 0)) or None
    return v


def _write_kv(path: Path, items: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


# --- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    source = _pick(args, cfg, "source", default="classical")
    seed = _pick(args, cfg, "seed", int, 0)
    trials = _pick(args, cfg, "trials", int, 36 if source == "classical" else 1000)
    if seed < 0 or seed >= 2 ** 64:
        raise CliError("--seed must be an unsigned 64-bit integer")
    src_kv = {k: v for k, v in cfg.items() if k not in RUN_KEYS}
    src_kv["source"] = source
    scfg = so.config_from_kv(src_kv)
    if isinstance(scfg, so.ClassicalSourceConfig):
        ds = so.simulate_classical_dataset(scfg, trials, seed)
    else:
        scfg = scfg.resolved()
        ds = so.simulate_quantum_dataset(scfg, trials, seed)
    ds.metadata["trials"] = str(trials)
    ds.metadata.update({f"config.{k}": v for k, v in so.config_to_kv(scfg).items()})
    out = _out_dir(args)
    path = out / "dataset.csv"
    write_dataset(ds, path)
    print(f"wrote {path} ({trials} trials, source={source}, seed={seed})")
    return 0


# --- analyze -----------------------------------------------------------------

def _bell_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("trial_id", "s_a", "s_b", "bell_value"))
        for b in rows:
            w.writerow([b.trial_id, b.settings.sa, b.settings.sb, repr(b.value)])


def _protocol(cfg: dict, method: str) -> st.Protocol:
    kv = {k: v for k, v in cfg.items() if k in st.PROTOCOL_KEYS}
    if method == "pulse":
        kv["bell_kind"] = "pulse"
    return st.protocol_from_kv(kv)


def _ch_summary(res: co.CHResult) -> dict:
    return {"b_ch": repr(res.b_ch), "naive_sigma": repr(res.naive_sigma),
            "naive_snr": repr(res.naive_snr), "pair_rate_per_unit": repr(res.pair_rate),
            "note": "naive sigma assumes Gaussian statistics; not a hypothesis test"}


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    ds = _read(args)
    method = _pick(args, cfg, "method", default="detection-centered")
    if method not in METHODS:
        raise CliError(f"unknown method {method!r}")
    out = _out_dir(args)
    echo = {"data": args.data, "method": method}
    if method == "detection-centered":
        radius = _pick(args, cfg, "radius", int, 12800)
        counts = co.detection_centered_counts(ds, radius)
        co.write_counts_csv(counts, out / "counts.csv")
        summary = {**echo, "radius": radius, **_ch_summary(co.bell_ch(counts))}
    elif method == "predefined":
        width = _pick(args, cfg, "width", int, 12800)
        sync = _pick(args, cfg, "sync_period", int, 64000)
        spec = co.WindowSpec.predefined(width, sync_period=sync or None,
                                        recenter_every=int(cfg.get("recenter_every", 500)),
                                        pulse_spacing=_pulse_spacing(args, cfg, ds))
        counts = co.count_predefined(ds, spec, sync_ticks=ds.ticks)
        co.write_counts_csv(counts, out / "counts.csv")
        rate = 1.0 / co.window_spacing(spec, ds.ticks)
        summary = {**echo, "width": width, "sync_period": sync,
                   **_ch_summary(co.bell_ch(counts, rate))}
    elif method == "distance":
        proto = _protocol(cfg, method)
        if len(ds) <= proto.training_size:
            raise CliError(f"need more than {proto.training_size} trials")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            params = di.train(ds.trials[:proto.training_size],
                              offset_window=proto.offset_window).params
        di.write_params(params, out / "params.txt")
        rows = [di.bell_value(t, params) for t in ds.trials[proto.training_size:]]
        _bell_csv(out / "bell.csv", rows)
        summary = {**echo, "training_size": proto.training_size,
                   "mean_bell_value": repr(sum(b.value for b in rows) / len(rows))}
        if caught:
            summary["note"] = "; ".join(str(w.message) for w in caught)
    elif method == "pulse":
        if ds.ticks is None:
            raise CliError("pulse analysis needs a .ticks.csv sidecar")
        half = _pick(args, cfg, "half_width", int)
        if half is None:
            half = st.DEFAULT_PULSE_HALF_WIDTH
        rows = [di.pulse_bell_value(t, ds.ticks, half) for t in ds.trials]
        _bell_csv(out / "bell.csv", rows)
        summary = {**echo, "half_width": half,
                   "total_bell_value": repr(sum(b.value for b in rows))}
    else:
        proto = _protocol(cfg, method)
        if ds.ticks is not None and "bell_kind" not in cfg:
            proto = st.Protocol(**{**proto.__dict__, "bell_kind": "pulse"})
        rep = st.run_pipeline(ds, proto)
        return _emit_report(rep, out, echo, table=False)
    _write_kv(out / "summary.txt", summary)
    for k, v in summary.items():
        print(f"{k}={v}")
    return 0


def _emit_report(rep: st.Report, out: Path, echo: dict, table: bool) -> int:
    rep.write_csv(out / "report.csv")
    if rep.params is not None:
        di.write_params(rep.params, out / "params.txt")
    text = "".join(f"{k}={v}\n" for k, v in echo.items()) + rep.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(render_table(rep) if table else text, end="")
    return 0


def render_table(rep: st.Report) -> str:
    rows = [
        ("estimated total violation", f"{rep.total:.6g}"),
        ("uncertainty (68 %)", f"{rep.sigma:.6g}"),
        ("nominal SNR", f"{rep.snr:.4g}"),
        ("PBR log2(p) bound", f"{rep.log2_p:.4g}"),
        ("Gaussian-equivalent sigma", f"{rep.sigma_equivalent:.4g}"),
        ("trials analyzed / training", f"{rep.n_analyzed} / {rep.n_training}"),
        ("prediction fallbacks", str(rep.fallback_count)),
        ("naive coincidence B_CH", f"{rep.naive_b_ch:.6g}"),
        ("naive SNR (Gaussian only)", f"{rep.naive_snr:.4g}"),
    ]
    w = max(len(r[0]) for r in rows)
    v = max(len(r[1]) for r in rows)
    line = "+" + "-" * (w + 2) + "+" + "-" * (v + 2) + "+"
    body = [f"| {a.ljust(w)} | {b.rjust(v)} |" for a, b in rows]
    notes = [f"note: {n}" for n in rep.notes]
    return "\n".join([line, *body, line, *notes]) + "\n"


# --- sweep / report ----------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    ds = _read(args)
    method = _pick(args, cfg, "method", default="detection-centered")
    if method not in ("detection-centered", "predefined"):
        raise CliError("sweep supports --method detection-centered or predefined")
    if args.radius is not None:
        radii = [args.radius]
    else:
        radii = _parse_grid(_pick(args, cfg, "grid", default="64:32000:64"))
    threads = max(1, int(os.environ.get("BELLTEST_THREADS", "1") or 1))
    sync = _pick(args, cfg, "sync_period", int, 64000)
    pts = co.window_sweep(ds, method, radii, sync_period=sync or None,
                          recenter_every=int(cfg.get("recenter_every", 500)),
                          pulse_spacing=_pulse_spacing(args, cfg, ds),
                          sync_ticks=ds.ticks, threads=threads)
    out = _out_dir(args)
    co.write_sweep_csv(pts, out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'} ({len(pts)} radii)")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    ds = _read(args)
    proto = _protocol(cfg, "pbr")
    if ds.ticks is not None and "bell_kind" not in cfg:
        proto = st.Protocol(**{**proto.__dict__, "bell_kind": "pulse"})
    rep = st.run_pipeline(ds, proto)
    return _emit_report(rep, _out_dir(args), {"data": args.data}, table=True)


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="belltest", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags override its values")
        sp.add_argument("--out", help="output directory (default: current)")
        sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("simulate", help="generate a dataset"))
    s.add_argument("--source", choices=("classical", "quantum"))
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_simulate)

    a = common(sub.add_parser("analyze", help="analyze a dataset"))
    a.add_argument("--data")
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--radius", type=int)
    a.add_argument("--width", type=int)
    a.set_defaults(func=cmd_analyze)

    w = common(sub.add_parser("sweep", help="B_CH versus window radius"))
    w.add_argument("--data")
    w.add_argument("--method", choices=("detection-centered", "predefined"))
    w.add_argument("--grid", help="START:STOP:STEP in timetag units")
    w.add_argument("--radius", type=int, help="single radius instead of a grid")
    w.set_defaults(func=cmd_sweep)

    r = common(sub.add_parser("report", help="full conservative analysis with a summary table"))
    r.add_argument("--data")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"belltest: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
