"""Command-line front end: calibrate, write, read, sweep-extra-space, simulate.

Exit codes: 0 success, 2 invalid configuration, 3 verification failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .codec import ErrorBoundConfig, FieldPartition, compress
from .datagen import FieldSpec, gen_smooth_field, ingest_raw
from .engine import Dataset, read_and_verify, run_method
from .errors import DecodeError, InvalidInput, OCPWError
from .models import (
    MB,
    FileWriteHarness,
    ThroughputModel,
    calibrate_write_throughput,
    fit_throughput_model,
    measure_compression_samples,
    write_calibration,
)
from .planner import R_SPACE_DEFAULT, ExtraSpacePolicy
from .simsys import (
    REFERENCE_BITRATES,
    REFERENCE_POINTS,
    compare_methods,
    large_scale_workload,
    read_workload_csv,
    rows_to_csv,
    simulate,
    workload_from_model,
)

log = logging.getLogger("ocpw")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4

SWEEP_GRID = (1.10, 1.15, 1.20, 1.25, 1.30, 1.43)
SIM_RANKS = (256, 512, 1024, 2048, 4096)
CALIBRATION_BOUNDS = tuple(10.0**-k for k in range(1, 9))
WRITE_SIZES_MB = (1, 2, 4, 8, 16)


class VerificationFailed(OCPWError):
    pass


@dataclass
class FieldArg:
    name: str
    dims: tuple
    cfg: ErrorBoundConfig
    path: Optional[str] = None


@dataclass
class RunConfig:
    command: str
    ranks: int = 8
    fields: list = field(default_factory=list)
    r_space: float = R_SPACE_DEFAULT
    sample_fraction: float = 0.05
    model_path: Optional[str] = None
    out: Optional[str] = None
    report: Optional[str] = None
    seed: int = 0
    decay: float = 3.0
    method: int = 4
    write_bandwidth: Optional[float] = None
    backend: str = "thread"

    def __post_init__(self):
        if self.ranks < 1:
            raise InvalidInput("--ranks must be >= 1")
        if not 0 < self.sample_fraction <= 1:
            raise InvalidInput("--sample-fraction must lie in (0, 1]")
        ExtraSpacePolicy(self.r_space)  # range check
        if self.write_bandwidth is not None and not self.write_bandwidth > 0:
            raise InvalidInput("--write-bandwidth must be positive")


def parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        raise InvalidInput(f"bad dims {text!r}; expected e.g. 128x128x128") from None
    if not 1 <= len(dims) <= 3 or any(d <= 0 for d in dims):
        raise InvalidInput(f"bad dims {text!r}")
    return dims


def _bound_cfg(bound: str, mode: Optional[str]) -> ErrorBoundConfig:
    try:
        b = float(bound)
    except ValueError:
        raise InvalidInput(f"bad error bound {bound!r}") from None
    return ErrorBoundConfig(mode or "absolute", b)


def parse_field(text: str) -> FieldArg:
    """``name:dims:bound[:mode]``, e.g. ``density:128x128x128:1e-3:rel``."""
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise InvalidInput(f"bad --field {text!r}; expected name:dims:bound[:mode]")
    return FieldArg(parts[0], parse_dims(parts[1]), _bound_cfg(parts[2], parts[3] if len(parts) == 4 else None))


def parse_input(text: str) -> FieldArg:
    """``path:bound[:mode]``; dims and dtype come from the ``.fspec`` sidecar."""
    path, _, rest = text.partition(":")
    bound, _, mode = rest.partition(":")
    if not bound:
        raise InvalidInput(f"bad --input {text!r}; expected path:bound[:mode]")
    name = Path(path).stem
    return FieldArg(name, (), _bound_cfg(bound, mode or None), path)


def build_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.fields:
        raise InvalidInput("give at least one --field or --input")
    arrays = {}
    for i, fa in enumerate(cfg.fields):
        if fa.path is not None:
            arrays[fa.name] = ingest_raw(fa.path)
        else:
            spec = FieldSpec(fa.name, fa.dims, decay=cfg.decay, seed=cfg.seed * 1000 + i)
            arrays[fa.name] = gen_smooth_field(spec)
    return Dataset.from_globals(arrays, [fa.cfg for fa in cfg.fields], cfg.ranks)


def load_model(path: Optional[str]) -> Optional[ThroughputModel]:
    path = path or os.environ.get("OCPW_MODEL")
    if not path:
        return None
    return ThroughputModel.load(path)


def _emit(text: str, path: Optional[str]):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(cfg: RunConfig, args) -> int:
    if not cfg.out:
        raise InvalidInput("calibrate needs --out for the model file")
    bounds = tuple(args.bounds) if args.bounds else CALIBRATION_BOUNDS
    if cfg.fields:
        ds = build_dataset(RunConfig("calibrate", ranks=1, fields=cfg.fields, seed=cfg.seed, decay=cfg.decay))
        parts = [p for row in ds.partitions for p in row]
    else:
        # Bundled sample fields spanning smooth to rough.
        parts = [
            FieldPartition(f"sample{i}", 0, (64, 64, 64), gen_smooth_field(FieldSpec(f"s{i}", (64, 64, 64), decay=d, seed=cfg.seed + i)))
            for i, d in enumerate((1.0, 2.0, 3.0))
        ]
    samples = measure_compression_samples(parts, bounds=bounds, repeats=args.repeats)
    if args.samples_out:
        write_calibration(samples, args.samples_out)
    c_thr = args.c_thr
    if c_thr is None:
        sizes = [int(s * MB) for s in (args.write_sizes or WRITE_SIZES_MB)]
        bw = cfg.write_bandwidth * MB if cfg.write_bandwidth else None
        with tempfile.TemporaryDirectory(dir=args.scratch) as tmp, warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cal = calibrate_write_throughput(FileWriteHarness(tmp, bandwidth=bw), sizes)
        if cal.warning:
            log.warning("write throughput did not plateau over the given sizes")
        c_thr = cal.c_thr
    model = fit_throughput_model(samples, c_thr=c_thr)
    model.save(cfg.out)
    sys.stdout.write(model.to_text())
    return EXIT_OK


def cmd_write(cfg: RunConfig, args) -> int:
    if not cfg.out:
        raise InvalidInput("write needs --out for the container")
    ds = build_dataset(cfg)
    bw = cfg.write_bandwidth * MB if cfg.write_bandwidth else None
    rep = run_method(
        ds,
        cfg.method,
        cfg.out,
        policy=ExtraSpacePolicy(cfg.r_space),
        model=load_model(cfg.model_path),
        sample_fraction=cfg.sample_fraction,
        write_bandwidth=bw,
        backend=cfg.backend,
    )
    _emit(rep.to_csv(), cfg.report)
    log.info(
        "method %d: %.3fs, ratio %.2f, overflow %.1f%%",
        cfg.method,
        rep.wall_time,
        rep.ratio_without_extra_space,
        100 * rep.overflow_fraction,
    )
    return EXIT_OK


def cmd_read(cfg: RunConfig, args) -> int:
    if not cfg.out:
        raise InvalidInput("read needs --out pointing at the container")
    expected = build_dataset(cfg) if cfg.fields else None
    res = read_and_verify(cfg.out, expected)
    if res.verification is None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "field", "points", "min", "max"])
        for r, row in enumerate(res.values):
            for name, v in zip(res.names, row):
                w.writerow([r, name, v.size, repr(float(v.min())), repr(float(v.max()))])
        _emit(buf.getvalue(), cfg.report)
        return EXIT_OK
    _emit(res.verification.to_csv(), cfg.report)
    if not res.verification.ok:
        raise VerificationFailed(f"{res.verification.violations} points exceed their error bound")
    return EXIT_OK


def cmd_sweep_extra_space(cfg: RunConfig, args) -> int:
    ds = build_dataset(cfg)
    grid = tuple(args.grid) if args.grid else SWEEP_GRID
    bw = cfg.write_bandwidth * MB if cfg.write_bandwidth else None
    model = load_model(cfg.model_path)
    with tempfile.TemporaryDirectory(dir=cfg.out) as tmp:
        # Reference: exact size predictions, so nothing overflows.
        exact = {
            (r, f): len(compress(p, c).payload)
            for r, row in enumerate(ds.partitions)
            for f, (p, c) in enumerate(zip(row, ds.configs))
        }
        ref = run_method(ds, 4, os.path.join(tmp, "ref.ocpw"), policy=ExtraSpacePolicy(grid[0]),
                         model=model, write_bandwidth=bw, estimate_override=exact)
        rows = []
        for rs in grid:
            rep = run_method(ds, 4, os.path.join(tmp, f"r{rs}.ocpw"), policy=ExtraSpacePolicy(rs),
                             model=model, sample_fraction=cfg.sample_fraction, write_bandwidth=bw)
            perf = rep.wall_time / ref.wall_time - 1.0
            for f, name in enumerate(ds.names):
                ents = [e for e in rep.entries if e.field_index == f]
                actual = sum(e.actual_size for e in ents)
                stored = sum(max(e.reserved_size, e.actual_size) for e in ents)
                rows.append(
                    {
                        "r_space": rs,
                        "field": name,
                        "overflow_fraction": sum(e.overflowed for e in ents) / len(ents),
                        "storage_overhead": stored / actual - 1.0,
                        "performance_overhead": perf,
                        "wall_time": rep.wall_time,
                        "reference_wall_time": ref.wall_time,
                    }
                )
    _emit(rows_to_csv(rows), cfg.report)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    kw = {"sync_cost": args.sync_cost}
    if args.collective_efficiency is not None:
        kw["collective_efficiency"] = args.collective_efficiency
    if args.workload:
        scenarios = [(None, read_workload_csv(Path(args.workload).read_text(), **kw))]
    else:
        model = load_model(cfg.model_path)
        ranks = args.sim_ranks or SIM_RANKS
        scenarios = []
        for R in ranks:
            if model is None:
                w = large_scale_workload(R, seed=cfg.seed)
                w.sync_cost = args.sync_cost
                if args.collective_efficiency is not None:
                    w.collective_efficiency = args.collective_efficiency
            else:
                w = workload_from_model(model, R, REFERENCE_BITRATES, REFERENCE_POINTS, jitter=0.15, seed=cfg.seed, **kw)
            scenarios.append((R, w))
    rows = []
    for R, w in scenarios:
        for row in compare_methods(w):
            rows.append({"ranks": w.ranks, **row})
        if cfg.out:
            os.makedirs(cfg.out, exist_ok=True)
            for m in (1, 2, 3, 4):
                try:
                    tl = simulate(w, m)
                except InvalidInput:
                    continue
                Path(cfg.out, f"timeline_r{w.ranks}_m{m}.csv").write_text(tl.to_csv())
    _emit(rows_to_csv(rows), cfg.report)
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "write": cmd_write,
    "read": cmd_read,
    "sweep-extra-space": cmd_sweep_extra_space,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ocpw", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--ranks", type=int, default=8)
        p.add_argument("--field", action="append", default=[], metavar="NAME:DIMS:BOUND[:MODE]",
                       help="synthetic field, e.g. density:128x128x128:1e-3:rel (repeatable)")
        p.add_argument("--input", action="append", default=[], metavar="PATH:BOUND[:MODE]",
                       help="raw little-endian field with a .fspec sidecar (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--decay", type=float, default=3.0, help="spectral decay of synthetic fields")
        p.add_argument("--rspace", type=float, default=R_SPACE_DEFAULT)
        p.add_argument("--sample-fraction", type=float, default=0.05)
        p.add_argument("--model", default=None, help="model file (default: $OCPW_MODEL)")
        p.add_argument("--write-bandwidth", type=float, default=None, metavar="MBPS",
                       help="per-rank write throttle in MB/s")
        p.add_argument("--backend", choices=("thread", "process"), default="thread")
        p.add_argument("--out", default=None)
        p.add_argument("--report", default=None, help="CSV report path (default: stdout)")

    p = sub.add_parser("calibrate", help="fit the compression-throughput model and measure write plateau")
    common(p)
    p.add_argument("--bounds", type=float, nargs="+", default=None)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--samples-out", default=None, help="also save raw calibration samples")
    p.add_argument("--write-sizes", type=float, nargs="+", default=None, metavar="MB")
    p.add_argument("--c-thr", type=float, default=None, help="skip write calibration, use this MB/s")
    p.add_argument("--scratch", default=None, help="directory for write-calibration files")

    p = sub.add_parser("write", help="write a container with method 1-4")
    common(p)
    p.add_argument("--method", type=int, choices=(1, 2, 3, 4), default=4)

    p = sub.add_parser("read", help="decode a container, optionally verifying bounds")
    common(p)

    p = sub.add_parser("sweep-extra-space", help="overflow/storage trade-off over R_space")
    common(p)
    p.add_argument("--grid", type=float, nargs="+", default=None)

    p = sub.add_parser("simulate", help="discrete-event comparison of the four methods")
    common(p)
    p.add_argument("--workload", default=None, help="CSV with [rank,]field,P_c,P_w[,P_raw]")
    p.add_argument("--sim-ranks", type=int, nargs="+", default=None)
    p.add_argument("--sync-cost", type=float, default=0.0)
    p.add_argument("--collective-efficiency", type=float, default=None)
    return ap


def config_from_args(args) -> RunConfig:
    fields = [parse_field(t) for t in args.field] + [parse_input(t) for t in args.input]
    return RunConfig(
        command=args.command,
        ranks=args.ranks,
        fields=fields,
        r_space=args.rspace,
        sample_fraction=args.sample_fraction,
        model_path=args.model,
        out=args.out,
        report=args.report,
        seed=args.seed,
        decay=args.decay,
        method=getattr(args, "method", 4),
        write_bandwidth=args.write_bandwidth,
        backend=args.backend,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (VerificationFailed, DecodeError) as exc:
        log.error("%s", exc)
        return EXIT_VERIFY
    except InvalidInput as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
