"""Experiment orchestration and the command-line surface.

Subcommands: ``analyze`` (closed forms for one parameter set),
``simulate`` (Monte Carlo with the moment-formula and/or timeline
estimators), ``sweep`` (parameter sweeps with slope fits and CSV/report
emission), ``topology`` (placement, pairing, 9-TDMA grouping, and
protocol-model checking), ``baseline`` (turn-taking reference model).

Exit codes: 0 success, 1 usage error, 2 infeasibility or validation
failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .analytics import AgeBreakdown, closed_form_age, scaling_exponent
from .geometry import (
    GUARD_ZONE_LIMIT,
    assign_pairs,
    build_cells,
    check_protocol_model,
    place_nodes,
    same_cell_transmissions,
    tdma_groups,
    write_topology_csv,
    write_violations_csv,
)
from .params import SchemeParams
from .sampling import StreamSpec, make_stream
from .scheme import (
    DeliveryMode,
    Variant,
    estimate_age_moment_formula,
    integrate_age_timeline,
    simulate_round_robin,
    simulate_sessions,
)

log = logging.getLogger(__name__)

SWEEP_CSV_COLUMNS = (
    "n",
    "M",
    "b_effective",
    "sessions",
    "delta_analytic",
    "delta_sim",
    "delta_sim_stderr",
    "delta_timeline",
    "delta_baseline",
    "wall_time_s",
)

# Stream-index windows: sweep point i draws sessions from [i << 32, ...),
# with the baseline run offset half a window so nothing overlaps.
_POINT_STRIDE = 1 << 32
_BASELINE_OFFSET = 1 << 31


class CliUsageError(Exception):
    pass


def divisor_adjusted_m(n: int, target: float, tol: float = 1e-12) -> int | None:
    """Divisor of n nearest to ``target`` in ratio, within +-50 percent.

    Nearness is measured in log space (so 8 beats 4 for target 6); exact
    ties go to the smaller divisor.  Returns None when no divisor lies
    within the +-50 percent window.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not target > 0:
        raise ValueError(f"target must be > 0, got {target}")
    lo, hi = 0.5 * target, 1.5 * target
    candidates = []
    for i in range(1, math.isqrt(n) + 1):
        if n % i == 0:
            for d in (i, n // i):
                if lo <= d <= hi:
                    candidates.append(d)
    if not candidates:
        return None
    log_t = math.log(target)
    dist = {d: abs(math.log(d) - log_t) for d in set(candidates)}
    best = min(dist.values())
    return min(d for d in dist if dist[d] <= best + tol)


@dataclass(frozen=True)
class SweepConfig:
    n_grid: tuple[int, ...]
    b: float = 0.25
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    sessions: int = 100_000
    master_seed: int = 0
    variant: Variant = Variant.WORSENED
    delivery_mode: DeliveryMode = DeliveryMode.INDEPENDENT
    baseline: bool = False

    def __post_init__(self) -> None:
        grid = tuple(int(v) for v in self.n_grid)
        object.__setattr__(self, "n_grid", grid)
        if not grid:
            raise ValueError("n_grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"n_grid must be strictly increasing, got {grid}")
        if not 0.0 < self.b <= 1.0:
            raise ValueError(f"b must lie in (0, 1], got {self.b}")
        if self.sessions < 1000:
            raise ValueError(f"sessions must be >= 1000, got {self.sessions}")
        if not self.lambda_intra > 0 or not self.lambda_inter > 0:
            raise ValueError("rates must be > 0")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "delivery_mode", DeliveryMode(self.delivery_mode))


_CONFIG_FIELDS = {f.name for f in fields(SweepConfig)}


def load_sweep_config(path) -> SweepConfig:
    """Parse a sweep config file: a JSON object or flat key=value lines."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValueError(f"config {path}: expected a JSON object")
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config {path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    unknown = set(raw) - _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"config {path}: unknown keys {sorted(unknown)}")
    return SweepConfig(**_coerce_config(raw))


def _coerce_config(raw: dict) -> dict:
    out: dict = {}
    for key, value in raw.items():
        if key == "n_grid":
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            out[key] = tuple(int(v) for v in value)
        elif key in ("b", "lambda_intra", "lambda_inter"):
            out[key] = float(value)
        elif key in ("sessions", "master_seed"):
            out[key] = int(value)
        elif key == "variant":
            out[key] = Variant(value)
        elif key == "delivery_mode":
            out[key] = DeliveryMode(value)
        elif key == "baseline":
            if isinstance(value, str):
                lowered = value.lower()
                if lowered not in ("true", "false", "0", "1"):
                    raise ValueError(f"baseline must be true/false, got {value!r}")
                out[key] = lowered in ("true", "1")
            else:
                out[key] = bool(value)
    return out


@dataclass(frozen=True)
class SweepRow:
    n: int
    m: int | None
    b_effective: float | None
    sessions: int
    delta_analytic: float | None
    delta_sim: float | None
    delta_sim_stderr: float | None
    delta_timeline: float | None = None
    delta_baseline: float | None = None
    wall_time_s: float | None = None


def run_sweep(config: SweepConfig, workers: int = 1, timing: bool = True) -> list[SweepRow]:
    """One SweepRow per grid point, deterministic given the master seed.

    The cell count m is the divisor of n nearest to n**b; grid points with
    no divisor within +-50 percent of the target are emitted as warning
    rows with empty result fields.
    """
    rows: list[SweepRow] = []
    for i, n in enumerate(config.n_grid):
        target = float(n) ** config.b
        m = divisor_adjusted_m(n, target)
        if m is None:
            log.warning("n=%d: no divisor within 50%% of n^b=%.3f; skipping", n, target)
            rows.append(
                SweepRow(
                    n=n, m=None, b_effective=None, sessions=config.sessions,
                    delta_analytic=None, delta_sim=None, delta_sim_stderr=None,
                )
            )
            continue
        if m != round(target):
            log.info("n=%d: adjusted m from n^b=%.3f to divisor %d", n, target, m)
        params = SchemeParams(n, m, config.lambda_intra, config.lambda_inter)
        analytic = closed_form_age(params).total

        started = time.perf_counter()
        run = simulate_sessions(
            params,
            config.sessions,
            variant=config.variant,
            delivery=config.delivery_mode,
            master_seed=config.master_seed,
            base_stream_index=i * _POINT_STRIDE,
            workers=workers,
        )
        estimate = estimate_age_moment_formula(run.batch_summaries)

        # The timeline integrator needs delivery-before-session-end on every
        # path, which only the coupled mode (or the exact variant) ensures.
        delta_timeline = None
        if config.delivery_mode == DeliveryMode.COUPLED or config.variant == Variant.EXACT:
            delta_timeline = integrate_age_timeline(run).delta_hat

        delta_baseline = None
        if config.baseline:
            rr = simulate_round_robin(
                n,
                config.lambda_intra,
                config.sessions,
                master_seed=config.master_seed,
                base_stream_index=i * _POINT_STRIDE + _BASELINE_OFFSET,
                workers=workers,
            )
            delta_baseline = estimate_age_moment_formula(rr.batch_summaries).delta_hat
        wall = time.perf_counter() - started if timing else None

        if (
            config.variant == Variant.WORSENED
            and config.delivery_mode == DeliveryMode.INDEPENDENT
            and estimate.std_err > 0
            and abs(estimate.delta_hat - analytic) > 5.0 * estimate.std_err
        ):
            log.warning(
                "n=%d m=%d: simulated age %.6g deviates from closed form %.6g "
                "by more than 5 standard errors (%.3g)",
                n, m, estimate.delta_hat, analytic, estimate.std_err,
            )

        rows.append(
            SweepRow(
                n=n,
                m=m,
                b_effective=math.log(m) / math.log(n) if n > 1 else 1.0,
                sessions=config.sessions,
                delta_analytic=analytic,
                delta_sim=estimate.delta_hat,
                delta_sim_stderr=estimate.std_err,
                delta_timeline=delta_timeline,
                delta_baseline=delta_baseline,
                wall_time_s=wall,
            )
        )
    return rows


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares power-law fit on (log n, log value).

    ``exponent`` is the primary slope (with the log n factor divided out
    first when the fit was log-corrected); ``log_corrected_exponent``
    always reports the corrected slope.
    """

    column: str
    exponent: float
    intercept: float
    r_squared: float
    fit_range: tuple[int, int]
    log_corrected_exponent: float
    log_corrected: bool


def fit_slope(rows: Sequence[SweepRow], column: str, log_correction: bool = False) -> SlopeFit:
    points = [(row.n, getattr(row, column)) for row in rows if getattr(row, column) is not None]
    if len(points) < 3:
        raise ValueError(f"need at least 3 rows with column {column!r}, got {len(points)}")
    ns = np.array([p[0] for p in points], dtype=float)
    values = np.array([p[1] for p in points], dtype=float)
    if np.any(values <= 0):
        raise ValueError(f"column {column!r} has non-positive values; cannot fit log-log slope")
    if log_correction and np.any(ns < 2):
        raise ValueError("log correction needs n >= 2")

    def _least_squares(y: np.ndarray) -> tuple[float, float, float]:
        x = np.log(ns)
        design = np.column_stack([x, np.ones_like(x)])
        (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
        predicted = design @ np.array([slope, intercept])
        ss_res = float(np.sum((y - predicted) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r_sq = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        return float(slope), float(intercept), r_sq

    log_v = np.log(values)
    corrected_slope, corrected_icept, corrected_r2 = _least_squares(log_v - np.log(np.log(ns)))
    if log_correction:
        slope, intercept, r_squared = corrected_slope, corrected_icept, corrected_r2
    else:
        slope, intercept, r_squared = _least_squares(log_v)
    return SlopeFit(
        column=column,
        exponent=slope,
        intercept=intercept,
        r_squared=r_squared,
        fit_range=(int(ns.min()), int(ns.max())),
        log_corrected_exponent=corrected_slope,
        log_corrected=log_correction,
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_rows_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SWEEP_CSV_COLUMNS) + "\n")
        for row in rows:
            cells = (
                row.n, row.m, row.b_effective, row.sessions, row.delta_analytic,
                row.delta_sim, row.delta_sim_stderr, row.delta_timeline,
                row.delta_baseline, row.wall_time_s,
            )
            fh.write(",".join(_format_cell(c) for c in cells) + "\n")


def read_rows_csv(path) -> list[SweepRow]:
    rows: list[SweepRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected sweep CSV header {reader.fieldnames}")
        for record in reader:
            rows.append(
                SweepRow(
                    n=int(record["n"]),
                    m=int(record["M"]) if record["M"] else None,
                    b_effective=float(record["b_effective"]) if record["b_effective"] else None,
                    sessions=int(record["sessions"]),
                    delta_analytic=float(record["delta_analytic"]) if record["delta_analytic"] else None,
                    delta_sim=float(record["delta_sim"]) if record["delta_sim"] else None,
                    delta_sim_stderr=float(record["delta_sim_stderr"]) if record["delta_sim_stderr"] else None,
                    delta_timeline=float(record["delta_timeline"]) if record["delta_timeline"] else None,
                    delta_baseline=float(record["delta_baseline"]) if record["delta_baseline"] else None,
                    wall_time_s=float(record["wall_time_s"]) if record["wall_time_s"] else None,
                )
            )
    return rows


def emit_report(rows: Sequence[SweepRow], fits: Sequence[SlopeFit], out_dir, b: float | None = None) -> list[Path]:
    """Write sweep.csv and summary.txt under ``out_dir``; returns the paths."""
    if not rows:
        raise ValueError("emit_report needs at least one row")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "sweep.csv"
        write_rows_csv(rows, csv_path)
        summary_path = out / "summary.txt"
        lines = [f"points: {len(rows)}"]
        if not fits:
            lines.append("no fit requested")
        for fit in fits:
            lines.append(
                f"fit column={fit.column} exponent={fit.exponent:.6f} "
                f"log_corrected_exponent={fit.log_corrected_exponent:.6f} "
                f"r_squared={fit.r_squared:.6f} "
                f"range=[{fit.fit_range[0]}, {fit.fit_range[1]}]"
            )
        if b is not None:
            lines.append(
                f"predicted growth exponent for b={b!r}: max(b, 1-3b) = "
                f"{scaling_exponent(b):.6f}"
            )
        summary_path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing report under {out}: {exc}") from exc
    return [csv_path, summary_path]


# ---------------------------------------------------------------------------
# Command-line interface.
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _print_breakdown(params: SchemeParams, breakdown: AgeBreakdown) -> None:
    print(
        f"n={params.n} m={params.m} lambda_intra={params.lambda_intra} "
        f"lambda_inter={params.lambda_inter} b_effective={params.b:.6f}"
    )
    for name, value in breakdown.per_term:
        print(f"  {name:<22} {value:.9g}")
    print(f"delay_part={breakdown.delay_part:.9g}")
    print(f"renewal_part={breakdown.renewal_part:.9g}")
    print(f"total={breakdown.total:.9g}")


def _resolve_m(args) -> int:
    if args.m is not None and args.b is not None:
        raise CliUsageError("give either --m or --b, not both")
    if args.m is not None:
        return args.m
    if args.b is None:
        raise CliUsageError("one of --m or --b is required")
    m = divisor_adjusted_m(args.n, float(args.n) ** args.b)
    if m is None:
        raise ValueError(
            f"no divisor of n={args.n} within 50% of n^b={float(args.n) ** args.b:.3f}"
        )
    return m


def _cmd_analyze(args) -> int:
    params = SchemeParams(args.n, _resolve_m(args), args.lambda_intra, args.lambda_inter)
    _print_breakdown(params, closed_form_age(params))
    return 0


def _cmd_simulate(args) -> int:
    params = SchemeParams(args.n, _resolve_m(args), args.lambda_intra, args.lambda_inter)
    variant = Variant(args.variant)
    delivery = DeliveryMode(args.delivery)
    run = simulate_sessions(
        params,
        args.sessions,
        variant=variant,
        delivery=delivery,
        master_seed=args.seed,
        workers=args.workers,
    )
    analytic = closed_form_age(params).total
    print(
        f"n={params.n} m={params.m} variant={variant.value} delivery={delivery.value} "
        f"sessions={args.sessions} seed={args.seed}"
    )
    print(f"delta_analytic={analytic!r}")
    moment = None
    if args.estimator in ("moment", "both"):
        moment = estimate_age_moment_formula(run.batch_summaries)
        rel = (moment.delta_hat - analytic) / analytic
        print(
            f"delta_moment={moment.delta_hat!r} stderr={moment.std_err!r} "
            f"rel_vs_analytic={rel:+.5f}"
        )
    if args.estimator in ("timeline", "both"):
        timeline = integrate_age_timeline(run)
        print(f"delta_timeline={timeline.delta_hat!r} stderr={timeline.std_err!r}")
        if moment is not None:
            gap = (timeline.delta_hat - moment.delta_hat) / moment.delta_hat
            print(f"timeline_vs_moment_gap={gap:+.5f}")
    return 0


def _cmd_sweep(args) -> int:
    inline = [args.n_grid, args.b, args.sessions]
    if args.config is not None:
        if any(v is not None for v in inline):
            raise CliUsageError("--config cannot be combined with inline sweep flags")
        config = load_sweep_config(args.config)
    else:
        if args.n_grid is None:
            raise CliUsageError("either --config or --n-grid is required")
        config = SweepConfig(
            n_grid=tuple(int(v) for v in args.n_grid.replace(",", " ").split()),
            b=args.b if args.b is not None else 0.25,
            lambda_intra=args.lambda_intra,
            lambda_inter=args.lambda_inter,
            sessions=args.sessions if args.sessions is not None else 100_000,
            master_seed=args.seed,
            variant=Variant(args.variant),
            delivery_mode=DeliveryMode(args.delivery),
            baseline=args.baseline,
        )
    rows = run_sweep(config, workers=args.workers, timing=not args.no_timing)
    fits = []
    for column in ("delta_analytic", "delta_sim", "delta_baseline"):
        if sum(getattr(r, column) is not None for r in rows) >= 3:
            fits.append(fit_slope(rows, column, log_correction=False))
    paths = emit_report(rows, fits, args.out, b=config.b)
    for path in paths:
        print(path)
    return 0


def _cmd_topology(args) -> int:
    grid = build_cells(args.n, args.m, args.area)
    stream = make_stream(StreamSpec(args.seed, 0))
    topology = place_nodes(args.n, args.area, stream).with_cells(grid)
    pairing, retries = assign_pairs(
        topology, stream, forbid_same_cell=not args.allow_same_cell
    )
    topology.pairing = pairing
    groups = tdma_groups(grid)

    all_violations = []
    for group in groups.groups:
        transmissions = same_cell_transmissions(topology, group)
        all_violations.extend(check_protocol_model(topology, transmissions, args.gamma))

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_topology_csv(topology, out / "topology.csv")
        write_violations_csv(all_violations, args.gamma, out / "violations.csv")
    except OSError as exc:
        raise OSError(f"failed writing topology outputs under {out}: {exc}") from exc
    print(
        f"n={args.n} m={args.m} cells={grid.num_cells} cell_len={grid.cell_len!r} "
        f"pairing_retries={retries}"
    )
    print(f"gamma={args.gamma!r} (9-TDMA admissible up to {GUARD_ZONE_LIMIT!r})")
    print(f"violations={len(all_violations)}")
    return 0


def _cmd_baseline(args) -> int:
    run = simulate_round_robin(args.n, args.rate, args.sessions, master_seed=args.seed)
    estimate = estimate_age_moment_formula(run.batch_summaries)
    closed = (args.n + 1) / args.rate
    print(f"n={args.n} rate={args.rate} sessions={args.sessions} seed={args.seed}")
    print(f"delta_closed_form={closed!r}")
    print(f"delta_sim={estimate.delta_hat!r} stderr={estimate.std_err!r}")
    return 0


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, required=True, help="number of nodes")
    p.add_argument("--m", type=int, default=None, help="nodes per cell (divisor of n)")
    p.add_argument("--b", type=float, default=None, help="cell exponent; m = nearest divisor to n^b")
    p.add_argument("--lambda-intra", type=float, default=1.0, dest="lambda_intra")
    p.add_argument("--lambda-inter", type=float, default=1.0, dest="lambda_inter")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aoilab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="closed-form age for one parameter set")
    _add_common_model_flags(p)
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("simulate", help="Monte Carlo age estimation")
    _add_common_model_flags(p)
    p.add_argument("--sessions", type=int, default=100_000)
    p.add_argument("--variant", choices=[v.value for v in (Variant.EXACT, Variant.WORSENED)], default="worsened")
    p.add_argument(
        "--delivery",
        choices=["independent", "coupled", "paper"],
        default="independent",
        help="'paper' is an alias for 'independent'",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimator", choices=["moment", "timeline", "both"], default="moment")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("sweep", help="scaling sweep over an n grid")
    p.add_argument("--config", default=None, help="JSON or key=value config file")
    p.add_argument("--n-grid", default=None, help="comma-separated n values")
    p.add_argument("--b", type=float, default=None)
    p.add_argument("--lambda-intra", type=float, default=1.0, dest="lambda_intra")
    p.add_argument("--lambda-inter", type=float, default=1.0, dest="lambda_inter")
    p.add_argument("--sessions", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["exact", "worsened"], default="worsened")
    p.add_argument("--delivery", choices=["independent", "coupled", "paper"], default="independent")
    p.add_argument("--baseline", action="store_true", help="also run the turn-taking baseline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="omit wall times (byte-stable output)")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("topology", help="random topology + 9-TDMA protocol check")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--area", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=GUARD_ZONE_LIMIT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-same-cell", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_topology)

    p = sub.add_parser("baseline", help="turn-taking baseline age")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--sessions", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_baseline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "delivery", None) == "paper":
            args.delivery = "independent"
        return args.handler(args)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
