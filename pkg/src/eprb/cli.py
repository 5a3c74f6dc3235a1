"""Command-line entry point: ``eprb <subcommand> ...``.

Every run writes its outputs atomically plus a ``manifest-<subcommand>.json``
recording the resolved configuration, input/output digests and wall time.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed data
file, 4 numerical failure (no coincidences, solver did not converge).
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from . import coincidence as co
from . import dataset as dsmod
from . import efficiency as eff
from . import quantum
from . import simulator as sim
from . import statistics as st

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

OUTPUT_DIR_ENV = "EPRB_OUTPUT_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects outputs of one subcommand and writes them with a manifest."""

    def __init__(self, name: str, args: argparse.Namespace):
        self.name = name
        self.args = args
        self.out_dir = Path(args.out_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")
        self.prefix = args.prefix or ""
        self.t_start = time.perf_counter()
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.config: dict = {}
        self.seed = None

    def add_input(self, path: str) -> bytes:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_DATA) from exc
        self.inputs[str(path)] = _sha256(data)
        return data

    def write(self, name: str, data: bytes | str) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        path = self.out_dir / f"{self.prefix}{name}"
        atomic_write(path, data)
        self.outputs[path.name] = _sha256(data)
        return path

    def finish(self) -> Path:
        manifest = {
            "subcommand": self.name,
            "tool_version": __version__,
            "argv": _canonical_argv(self.args),
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": round(time.perf_counter() - self.t_start, 3),
        }
        path = self.out_dir / f"{self.prefix}manifest-{self.name}.json"
        atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return path


def _canonical_argv(args: argparse.Namespace) -> dict:
    skip = {"func", "out_dir"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_dataset(run: Run, path: str, text: bool) -> dsmod.StationDataset:
    data = run.add_input(path)
    try:
        return dsmod.from_bytes(data, text=text)
    except dsmod.DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from exc


def _load_pair(run: Run, args) -> tuple[dsmod.StationDataset, dsmod.StationDataset]:
    ds1 = _load_dataset(run, args.file1, args.text)
    ds2 = _load_dataset(run, args.file2, args.text)
    if (ds1.station_id, ds2.station_id) != (1, 2):
        raise CliError(
            f"expected station 1 then station 2 files, got stations {ds1.station_id} and {ds2.station_id}", EXIT_DATA
        )
    if ds1.tau_ns != ds2.tau_ns:
        raise CliError(f"time resolutions differ: {ds1.tau_ns} ns vs {ds2.tau_ns} ns", EXIT_DATA)
    return ds1, ds2


def _ticks(value_ns: float, tau_ns: float, what: str, *, positive: bool) -> int:
    ticks = value_ns / tau_ns
    k = int(round(ticks))
    if not math.isclose(ticks, k, rel_tol=0, abs_tol=1e-9):
        raise CliError(f"{what} of {value_ns} ns is not a whole number of {tau_ns} ns ticks", EXIT_USAGE)
    if positive and k <= 0:
        raise CliError(f"{what} must be positive (W > 0 required), got {value_ns} ns", EXIT_USAGE)
    return k


def _resolve_offset(run: Run, args, ds1, ds2) -> int:
    if args.offset == "auto":
        h = co.lag_histogram(ds1, ds2, args.bin_width, args.max_lag)
        try:
            delta = co.estimate_global_offset(h)
        except co.NoCoincidencesError as exc:
            raise CliError(str(exc), EXIT_NUMERICAL) from exc
        run.config["delta_g_source"] = "auto"
    else:
        try:
            value = float(args.offset)
        except ValueError:
            raise CliError(f"--offset must be 'auto' or a value in ns, got {args.offset!r}", EXIT_USAGE) from None
        delta = _ticks(value, ds1.tau_ns, "offset", positive=False)
        run.config["delta_g_source"] = "given"
    run.config["delta_g_ticks"] = delta
    return delta


# --- subcommands ------------------------------------------------------------


def _simulation_config(args) -> sim.SimulationConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}: line {exc.lineno}, column {exc.colno}: {exc.msg}", EXIT_USAGE) from exc
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}", EXIT_USAGE) from exc
        if not isinstance(data, dict):
            raise CliError(f"{args.config}: top level must be a JSON object", EXIT_USAGE)
    overrides = {
        "pairs": args.pairs,
        "seed": args.seed,
        "time_tag_model": args.model,
        "t0_ns": args.t0,
        "tau_ns": args.tau,
        "mean_interarrival_ns": args.interarrival,
        "angle_increment": args.increment,
        "base_angles": args.angles,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return sim.SimulationConfig.from_dict(data)
    except sim.ConfigError as exc:
        where = f"{args.config}: " if args.config else ""
        raise CliError(f"{where}{exc}", EXIT_USAGE) from exc


def cmd_simulate(args) -> int:
    run = Run("simulate", args)
    cfg = _simulation_config(args)
    run.config = cfg.to_dict()
    run.seed = cfg.seed
    ds1, ds2 = sim.run_simulation(cfg)
    ext = "tsv" if args.text else "eprb"
    run.write(f"station1.{ext}", dsmod.to_bytes(ds1, text=args.text))
    run.write(f"station2.{ext}", dsmod.to_bytes(ds2, text=args.text))
    sidecar = {"config": cfg.to_dict(), "seed": cfg.seed, "config_digest": cfg.digest(), "tool_version": __version__}
    run.write("simulation.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"simulated {cfg.pairs} pairs ({cfg.time_tag_model}); {len(ds1)} + {len(ds2)} events")
    return EXIT_OK


def cmd_histogram(args) -> int:
    run = Run("histogram", args)
    ds1, ds2 = _load_pair(run, args)
    h = co.lag_histogram(ds1, ds2, args.bin_width, args.max_lag)
    run.config = {"bin_width_ticks": args.bin_width, "max_lag_ticks": args.max_lag, "tau_ns": ds1.tau_ns}
    buf = io.StringIO()
    h.to_tsv(buf)
    run.write("histogram.tsv", buf.getvalue())
    try:
        delta = co.estimate_global_offset(h)
    except co.NoCoincidencesError as exc:
        run.finish()
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    run.config["delta_g_ticks"] = delta
    run.finish()
    print(f"pairs in range: {h.total}; global offset: {delta} ticks ({delta * ds1.tau_ns} ns)")
    return EXIT_OK


def cmd_match(args) -> int:
    run = Run("match", args)
    ds1, ds2 = _load_pair(run, args)
    w = _ticks(args.window, ds1.tau_ns, "window", positive=True)
    delta = _resolve_offset(run, args, ds1, ds2)
    cfg = co.MatchConfig(window=w, delta_g=delta, mode=args.mode)
    shifted = co.apply_offset(ds1, delta)
    pairs = co.match_pairs(shifted, ds2, cfg)
    run.config.update({"window_ticks": w, "mode": args.mode, "tau_ns": ds1.tau_ns})
    buf = io.StringIO()
    co.write_pairs_tsv(buf, shifted, ds2, pairs)
    run.write("pairs.tsv", buf.getvalue())
    run.finish()
    print(f"{len(pairs)} pairs at W={w} ticks, offset {delta} ticks")
    return EXIT_OK


def _analysis_points(args, run, ds1, ds2, windows_ns) -> list[st.SweepPoint]:
    windows = [_ticks(w, ds1.tau_ns, "window", positive=True) for w in windows_ns]
    delta = _resolve_offset(run, args, ds1, ds2)
    run.config.update(
        {
            "windows_ticks": windows,
            "mode": args.mode,
            "threshold_sigmas": args.threshold_sigmas,
            "error_bar_sigmas": args.error_bar_sigmas,
            "tau_ns": ds1.tau_ns,
        }
    )
    try:
        return st.window_sweep(
            ds1,
            ds2,
            windows,
            delta,
            mode=args.mode,
            threshold_sigmas=args.threshold_sigmas,
            error_bar_sigmas=args.error_bar_sigmas,
            workers=args.workers,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _analysis_tsv(p: st.SweepPoint, tau_ns: float) -> str:
    out = io.StringIO()
    out.write("A1\tA2\tC++\tC+-\tC-+\tC--\tNc\tE1\tE2\tE\tsigma_bound\n")
    for sp in st.SETTING_PAIRS:
        e = p.estimates[sp]
        cs = [p.counts.c(sp[0], sp[1], x, y) for x, y in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
        out.write(
            f"{sp[0]}\t{sp[1]}\t" + "\t".join(map(str, cs)) + f"\t{e.n_c}\t{st._fmt(e.E1)}\t{st._fmt(e.E2)}\t{st._fmt(e.E)}\t{st._fmt(e.sigma)}\n"
        )
    out.write("\n")
    out.write(f"# window_ns\t{p.window * tau_ns!r}\n")
    out.write(f"# delta_g_ticks\t{p.delta_g}\n")
    out.write(f"# S\t{st._fmt(p.bell.S)}\n")
    out.write(f"# |S|\t{st._fmt(abs(p.bell.S))}\n")
    out.write("# station\tlocal_setting\tvalue_remote0\tvalue_remote1\tdifference\tthreshold\tverdict\n")
    for c in p.locality.comparisons:
        out.write(
            f"# {c.station}\t{c.local_setting}\t{st._fmt(c.values[0])}\t{st._fmt(c.values[1])}\t"
            f"{st._fmt(c.difference)}\t{st._fmt(c.threshold)}\t{c.verdict}\n"
        )
    out.write(f"# verdict\t{p.locality.verdict}\n")
    return out.getvalue()


def cmd_analyze(args) -> int:
    run = Run("analyze", args)
    ds1, ds2 = _load_pair(run, args)
    (p,) = _analysis_points(args, run, ds1, ds2, [args.window])
    run.write("analysis.tsv", _analysis_tsv(p, ds1.tau_ns))
    run.write("analysis.json", json.dumps(st.point_to_dict(p, ds1.tau_ns), indent=2) + "\n")
    run.finish()
    if p.n_c_total == 0:
        raise CliError("no coincidences at this window", EXIT_NUMERICAL)
    print(f"W={p.window * ds1.tau_ns} ns  Nc={p.n_c_total}  S={p.bell.S:.4f}  |S|={abs(p.bell.S):.4f}  locality: {p.locality.verdict}")
    return EXIT_OK


def _parse_windows(text: str) -> list[float]:
    parts = [s for s in text.replace(",", " ").split() if s]
    if not parts:
        raise CliError("--windows: empty window list", EXIT_USAGE)
    try:
        return [float(s) for s in parts]
    except ValueError:
        raise CliError(f"--windows: cannot parse {text!r}", EXIT_USAGE) from None


def cmd_sweep(args) -> int:
    run = Run("sweep", args)
    ds1, ds2 = _load_pair(run, args)
    points = _analysis_points(args, run, ds1, ds2, _parse_windows(args.windows))
    tsv = io.StringIO()
    st.write_sweep_tsv(tsv, points)
    run.write("sweep.tsv", tsv.getvalue())
    js = io.StringIO()
    st.write_sweep_json(js, points, ds1.tau_ns)
    run.write("sweep.json", js.getvalue())
    run.finish()
    for p in points:
        print(f"W={p.window * ds1.tau_ns:g} ns  Nc={p.n_c_total}  |S|={abs(p.bell.S):.4f}  {p.locality.verdict}")
    return EXIT_OK


def cmd_efficiency(args) -> int:
    run = Run("efficiency", args)
    data = run.add_input(args.measurements)
    try:
        measured = eff.load_measurements(io.StringIO(data.decode("utf-8")))
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError(f"{args.measurements}: {exc}", EXIT_DATA) from exc
    table = eff.consistency_table(measured)
    buf = io.StringIO()
    table.write_tsv(buf)
    run.write("efficiency.tsv", buf.getvalue())
    run.write("efficiency.json", json.dumps(table.to_dict(), indent=2) + "\n")
    run.config = {"measured": {f"{k[0]}{k[1]}": list(v) for k, v in sorted(measured.items())}}
    run.finish()
    sys.stdout.write(buf.getvalue())
    if not all(r.converged for r in table.rows):
        raise CliError("solver did not converge for at least one leave-one-out subset", EXIT_NUMERICAL)
    return EXIT_OK


def cmd_predict(args) -> int:
    run = Run("predict", args)
    if args.state == "singlet":
        state = quantum.QuantumState.singlet()
    else:
        state = quantum.QuantumState.product(args.alpha1, args.alpha2)
    angles = args.angles or list(sim.BELL_ANGLES)
    if len(angles) != 4:
        raise CliError("--angles expects a a' b b'", EXIT_USAGE)
    a, a2, b, b2 = angles
    out = io.StringIO()
    out.write("a\tb\tE1_hat\tE2_hat\tE_hat\tP++\tP+-\tP-+\tP--\n")
    for x1 in (a, a2):
        for x2 in (b, b2):
            ps = [quantum.probability_xy(x, y, x1, x2, state) for x, y in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
            out.write(
                f"{x1!r}\t{x2!r}\t{state.E1_hat(x1)!r}\t{state.E2_hat(x2)!r}\t{state.E_hat(x1, x2)!r}\t"
                + "\t".join(repr(p) for p in ps)
                + "\n"
            )
    S = quantum.chsh(state.E_hat, a, a2, b, b2)
    out.write(f"\n# S\t{S!r}\n")
    run.config = {"state": state.label, "angles": angles}
    run.write("predict.tsv", out.getvalue())
    run.finish()
    sys.stdout.write(out.getvalue())
    return EXIT_OK


def cmd_curve(args) -> int:
    run = Run("curve", args)
    cfg = _simulation_config(args)
    n = args.points
    thetas = [k * math.pi / n for k in range(n)]
    rows = sim.correlation_curve(cfg, thetas, args.window, mode=args.mode)
    run.config = {"simulation": cfg.to_dict(), "window_ns": args.window, "points": n, "mode": args.mode}
    run.seed = cfg.seed
    buf = io.StringIO()
    sim.write_curve_tsv(buf, rows)
    run.write("curve.tsv", buf.getvalue())
    run.finish()
    dev = max(abs(r.deviation) for r in rows if r.n_c > 0)
    print(f"{len(rows)} points; max |E - E_singlet| = {dev:.4f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", help=f"output directory (default: ${OUTPUT_DIR_ENV} or .)")
    p.add_argument("--prefix", default="", help="prefix for output file names")


def _pair_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("file1", help="station 1 data file")
    p.add_argument("file2", help="station 2 data file")
    p.add_argument("--text", action="store_true", help="inputs use the TSV dataset variant")


def _offset_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--offset", default="0", help="global offset for station 1 in ns, or 'auto' (default 0)")
    p.add_argument("--bin-width", type=int, default=co.DEFAULT_BIN_WIDTH, help="histogram bin width in ticks")
    p.add_argument("--max-lag", type=int, default=co.DEFAULT_MAX_LAG, help="histogram half-range in ticks")


def _analysis_opts(p: argparse.ArgumentParser) -> None:
    _offset_opts(p)
    p.add_argument("--mode", choices=co.MATCH_MODES, default=co.CAUSAL_GREEDY)
    p.add_argument("--threshold-sigmas", type=float, default=st.DEFAULT_THRESHOLD_SIGMAS)
    p.add_argument("--error-bar-sigmas", type=float, default=st.DEFAULT_ERROR_BAR_SIGMAS)
    p.add_argument("--workers", type=int, default=1, help="processes for window sweeps")


def _sim_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with simulation config fields")
    p.add_argument("--pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=sim.TIME_TAG_MODELS)
    p.add_argument("--t0", type=float, help="time-tag scale T0 in ns")
    p.add_argument("--tau", type=float, help="time-tag resolution in ns")
    p.add_argument("--interarrival", type=float, help="mean pair spacing in ns")
    p.add_argument("--increment", type=float, help="angle added for setting 1, radians")
    p.add_argument("--angles", type=float, nargs=2, metavar=("A", "B"), help="base angles of stations 1 and 2, radians")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eprb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate two station files from the event model")
    _sim_opts(p)
    p.add_argument("--text", action="store_true", help="write the TSV dataset variant")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("histogram", help="time-tag difference histogram and global offset")
    _pair_inputs(p)
    p.add_argument("--bin-width", type=int, default=co.DEFAULT_BIN_WIDTH, help="bin width in ticks")
    p.add_argument("--max-lag", type=int, default=co.DEFAULT_MAX_LAG, help="half-range in ticks")
    _common(p)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("match", help="export coincidence pairs")
    _pair_inputs(p)
    p.add_argument("--window", type=float, required=True, help="coincidence window W in ns")
    _offset_opts(p)
    p.add_argument("--mode", choices=co.MATCH_MODES, default=co.CAUSAL_GREEDY)
    _common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("analyze", help="estimates, S and locality test at one window")
    _pair_inputs(p)
    p.add_argument("--window", type=float, required=True, help="coincidence window W in ns")
    _analysis_opts(p)
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="S and estimates as a function of the window")
    _pair_inputs(p)
    p.add_argument("--windows", required=True, help="comma-separated windows in ns, ascending")
    _analysis_opts(p)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("efficiency", help="leave-one-out detector-efficiency consistency table")
    p.add_argument("measurements", help="JSON or TSV with E1, E2, E per setting pair")
    _common(p)
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("predict", help="quantum predictions at four analyzer angles")
    p.add_argument("--state", choices=("singlet", "product"), default="singlet")
    p.add_argument("--alpha1", type=float, default=0.0, help="product state: station 1 polarization")
    p.add_argument("--alpha2", type=float, default=0.0, help="product state: station 2 polarization")
    p.add_argument("--angles", type=float, nargs=4, metavar=("A", "A2", "B", "B2"))
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("curve", help="simulated E(theta, b) over a theta grid")
    _sim_opts(p)
    p.add_argument("--window", type=float, default=2.0, help="coincidence window W in ns")
    p.add_argument("--points", type=int, default=16, help="grid points on [0, pi)")
    p.add_argument("--mode", choices=co.MATCH_MODES, default=co.CAUSAL_GREEDY)
    _common(p)
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"eprb {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
