"""Stochastic simulation of the three-phase cooperative update scheme.

Two variants are sampled:

* ``worsened`` - phases one and three are round-synchronized across cells
  (every cell waits for the slowest cell each round), which is the variant
  the closed forms in :mod:`aoilab.analytics` describe exactly.
* ``exact`` - cells run phases one and three independently and only the
  slowest cell's total matters; stochastically faster than ``worsened``.

Delivery of the tagged pair's update happens inside phase three after a
uniform number of full rounds.  Two models of its final in-cell hop are
supported: ``independent`` draws a fresh delay (matching the closed-form
delivery wait, at the price of occasionally placing the delivery after the
session end) and ``coupled`` reuses the tagged cell's own draw from that
round, which guarantees delivery-before-session-end on every path.

Sessions are i.i.d.; session ``s`` of a run draws from stream
``base_stream_index + s``, so results are independent of worker count.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import gammaincinv

from .params import SchemeParams
from .sampling import (
    _TINY_UNIFORM,
    exp_from_uniform,
    fill_stream_rows,
    max_exp_from_uniform,
)


class Variant(str, Enum):
    EXACT = "exact"
    WORSENED = "worsened"
    ROUND_ROBIN = "round_robin"


class DeliveryMode(str, Enum):
    INDEPENDENT = "independent"
    COUPLED = "coupled"


@dataclass(frozen=True)
class SessionSample:
    """One session: phase durations, delivery delay, and totals.

    ``d = y1 + y2 + z`` is the tagged pair's delivery delay and
    ``y = y1 + y2 + y3`` the session length.  Under coupled delivery
    ``d <= y`` on every path.
    """

    y1: float
    y2: float
    y3: float
    z: float
    d: float
    y: float
    variant: Variant


@dataclass(frozen=True)
class MomentSummary:
    """Streaming first/second moment accumulators of (Y, D)."""

    count: int = 0
    sum_y: float = 0.0
    sum_y_sq: float = 0.0
    sum_d: float = 0.0
    sum_d_sq: float = 0.0
    sum_dy: float = 0.0

    @classmethod
    def from_arrays(cls, y: np.ndarray, d: np.ndarray) -> "MomentSummary":
        return cls(
            count=int(y.size),
            sum_y=float(np.sum(y)),
            sum_y_sq=float(np.sum(y * y)),
            sum_d=float(np.sum(d)),
            sum_d_sq=float(np.sum(d * d)),
            sum_dy=float(np.sum(d * y)),
        )

    def merge(self, other: "MomentSummary") -> "MomentSummary":
        return MomentSummary(
            count=self.count + other.count,
            sum_y=self.sum_y + other.sum_y,
            sum_y_sq=self.sum_y_sq + other.sum_y_sq,
            sum_d=self.sum_d + other.sum_d,
            sum_d_sq=self.sum_d_sq + other.sum_d_sq,
            sum_dy=self.sum_dy + other.sum_dy,
        )


def merge_summaries(parts: Sequence[MomentSummary]) -> MomentSummary:
    """Pairwise-tree merge in input order.

    The tree shape depends only on ``len(parts)``, so the result is
    bit-stable however the parts were computed.
    """
    items = list(parts)
    if not items:
        return MomentSummary()
    while len(items) > 1:
        nxt = [
            items[i].merge(items[i + 1]) if i + 1 < len(items) else items[i]
            for i in range(0, len(items), 2)
        ]
        items = nxt
    return items[0]


@dataclass(frozen=True)
class AgeEstimate:
    delta_hat: float
    std_err: float
    method: str  # "moment_formula" | "timeline"
    sessions: int


@dataclass
class SimulationRun:
    """Column store of simulated sessions plus per-batch moment summaries.

    Sessions appear in stream-index order; ``batch_summaries[i]`` covers
    sessions ``[i * batch_size, (i+1) * batch_size)``.
    """

    variant: Variant
    delivery: DeliveryMode
    master_seed: int
    base_stream_index: int
    batch_size: int
    y1: np.ndarray = field(repr=False)
    y2: np.ndarray = field(repr=False)
    y3: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    batch_summaries: list[MomentSummary] = field(repr=False)

    @property
    def sessions(self) -> int:
        return int(self.y.size)

    def total_summary(self) -> MomentSummary:
        return merge_summaries(self.batch_summaries)


# ---------------------------------------------------------------------------
# Draw layouts and vectorized kernels.  Each session consumes a fixed-width
# row of uniforms from its own stream; scalar ops and the batch engine share
# these kernels, so they are draw-for-draw identical.
# ---------------------------------------------------------------------------


def _worsened_width(params: SchemeParams) -> int:
    return 2 * params.m + params.cells + 3


def _worsened_kernel(u: np.ndarray, params: SchemeParams, mode: DeliveryMode) -> dict:
    n, m, cells = params.n, params.m, params.cells
    lam = params.lambda_intra
    lam_t = params.lambda_inter

    u1 = u[:, :m]
    u2 = u[:, m : m + cells]
    u3 = u[:, m + cells : m + cells + m]
    ju = u[:, -3]
    ua = u[:, -2]
    ub = u[:, -1]

    y1 = max_exp_from_uniform(u1, n, lam).sum(axis=1)
    y2 = max_exp_from_uniform(u2, m, m * m * lam_t).sum(axis=1)
    rounds = max_exp_from_uniform(u3, cells, lam)  # (sessions, m)

    j = np.minimum((ju * m).astype(np.int64), m - 1)
    csum = np.cumsum(rounds, axis=1)
    prev = np.take_along_axis(csum, np.maximum(j - 1, 0)[:, None], axis=1)[:, 0]
    wait = np.where(j > 0, prev, 0.0)

    if mode == DeliveryMode.INDEPENDENT:
        y3 = csum[:, -1]
        z = wait + exp_from_uniform(ua, lam)
    else:
        own = exp_from_uniform(ua, lam)
        others = max_exp_from_uniform(ub, cells - 1, lam)
        round_j = np.maximum(own, others)
        # Rebuild y3 from the same partials as z so z <= y3 holds exactly
        # in floating point (additions of non-negatives are monotone).
        at_j = np.take_along_axis(csum, j[:, None], axis=1)[:, 0]
        tail = csum[:, -1] - at_j
        y3 = (wait + round_j) + tail
        z = wait + own

    d = y1 + y2 + z
    y = y1 + y2 + y3
    return {"y1": y1, "y2": y2, "y3": y3, "z": z, "d": d, "y": y}


def _exact_width(params: SchemeParams) -> int:
    p1 = 0 if params.m == 1 else params.n
    return p1 + params.cells + params.n + 1


def _exact_kernel(u: np.ndarray, params: SchemeParams) -> dict:
    n, m, cells = params.n, params.m, params.cells
    lam = params.lambda_intra
    lam_t = params.lambda_inter
    sessions = u.shape[0]

    p1 = 0 if m == 1 else n
    if m == 1:
        y1 = np.zeros(sessions)
    else:
        u1 = u[:, :p1].reshape(sessions, cells, m)
        cell_totals = max_exp_from_uniform(u1, m - 1, lam).sum(axis=2)
        y1 = cell_totals.max(axis=1)

    u2 = u[:, p1 : p1 + cells]
    y2 = max_exp_from_uniform(u2, m, m * m * lam_t).sum(axis=1)

    relays = exp_from_uniform(
        u[:, p1 + cells : p1 + cells + n].reshape(sessions, cells, m), lam
    )
    # Per-cell totals come from the same running sums as z below, so
    # z <= y3 holds exactly in floating point.
    run_sums = np.cumsum(relays, axis=2)
    y3 = run_sums[:, :, -1].max(axis=1)

    # Tagged destination sits in cell 0 (cells are exchangeable); its packet
    # is relayed at a uniform position, so z sums that cell's first j+1 hops.
    ju = u[:, -1]
    j = np.minimum((ju * m).astype(np.int64), m - 1)
    z = np.take_along_axis(run_sums[:, 0, :], j[:, None], axis=1)[:, 0]

    d = y1 + y2 + z
    y = y1 + y2 + y3
    return {"y1": y1, "y2": y2, "y3": y3, "z": z, "d": d, "y": y}


def _round_robin_kernel(u: np.ndarray, n: int, rate: float) -> dict:
    """Turn-taking baseline: one pair served per slot, session = n slots.

    D given the tagged position j is a sum of j i.i.d. exponentials, drawn
    in O(1) through the gamma quantile function; Y - D adds the remaining
    n - j slots.  Jointly identical in law to summing n explicit draws.
    """
    ju = u[:, 0]
    ua = np.maximum(u[:, 1], _TINY_UNIFORM)
    ub = np.maximum(u[:, 2], _TINY_UNIFORM)
    j = 1 + np.minimum((ju * n).astype(np.int64), n - 1)
    d = gammaincinv(j, ua) / rate
    tail = np.where(j < n, gammaincinv(np.maximum(n - j, 1), ub), 0.0) / rate
    y = d + tail
    zeros = np.zeros_like(y)
    return {"y1": zeros, "y2": zeros, "y3": y, "z": d, "d": d, "y": y}


# ---------------------------------------------------------------------------
# Scalar session samplers (the batch engine replays the same kernels).
# ---------------------------------------------------------------------------


def sample_session_worsened(
    params: SchemeParams,
    stream: np.random.Generator,
    mode: DeliveryMode = DeliveryMode.INDEPENDENT,
) -> SessionSample:
    """Draw one worsened session.

    Phase one sums m rounds of max-of-n draws, phase two sums n/m per-cell
    maxima of m rate-(m^2 lambda_inter) draws, phase three sums m rounds of
    max-of-(n/m) draws.
    """
    u = stream.random(_worsened_width(params))[None, :]
    cols = _worsened_kernel(u, params, mode)
    return SessionSample(
        y1=float(cols["y1"][0]),
        y2=float(cols["y2"][0]),
        y3=float(cols["y3"][0]),
        z=float(cols["z"][0]),
        d=float(cols["d"][0]),
        y=float(cols["y"][0]),
        variant=Variant.WORSENED,
    )


def sample_session_exact(
    params: SchemeParams, stream: np.random.Generator
) -> SessionSample:
    """Draw one exact session (cells independent in phases one and three).

    At m = 1 a cell has no other receivers, so its phase-one time is zero.
    Delivery reuses the tagged cell's own relay draws, hence d <= y always.
    """
    u = stream.random(_exact_width(params))[None, :]
    cols = _exact_kernel(u, params)
    return SessionSample(
        y1=float(cols["y1"][0]),
        y2=float(cols["y2"][0]),
        y3=float(cols["y3"][0]),
        z=float(cols["z"][0]),
        d=float(cols["d"][0]),
        y=float(cols["y"][0]),
        variant=Variant.EXACT,
    )


def sample_coupled_sessions(
    params: SchemeParams, stream: np.random.Generator
) -> tuple[SessionSample, SessionSample]:
    """Draw one (exact, worsened) pair from a shared pool of draws.

    Each phase-one round holds one draw per (cell, receiver) plus a top-up
    max so the worsened round is a genuine max over n draws; the exact
    scheme reads only its own cell's subset.  By construction
    ``exact.y1 <= worsened.y1`` and ``exact.y3 <= worsened.y3`` hold on
    every sample path, not merely in expectation.
    """
    n, m, cells = params.n, params.m, params.cells
    if m < 2:
        raise ValueError("coupled sampling needs m >= 2 (phase one is empty at m = 1)")
    lam = params.lambda_intra
    lam_t = params.lambda_inter

    # Phase one: m rounds x cells x (m - 1) receivers, plus one top-up max
    # per round covering the n - cells*(m-1) = n/m draws the bound adds.
    pool1 = exp_from_uniform(stream.random((m, cells, m - 1)), lam)
    topup = max_exp_from_uniform(stream.random(m), cells, lam)
    worsened_rounds1 = np.maximum(pool1.max(axis=(1, 2)), topup)
    worsened_y1 = float(worsened_rounds1.sum())
    exact_y1 = float(pool1.max(axis=2).sum(axis=0).max())

    # Phase two is shared verbatim (it is not worsened).
    y2 = float(max_exp_from_uniform(stream.random(cells), m, m * m * lam_t).sum())

    # Phase three: m rounds x cells, one relay per cell per round.  Totals
    # are taken from running sums so each z <= y3 exactly in floating point.
    pool3 = exp_from_uniform(stream.random((m, cells)), lam)
    rounds3 = np.cumsum(pool3.max(axis=1))
    cell_sums = np.cumsum(pool3, axis=0)
    worsened_y3 = float(rounds3[-1])
    exact_y3 = float(cell_sums[-1].max())

    j = min(int(stream.random() * m), m - 1)
    exact_z = float(cell_sums[j, 0])
    worsened_z = float((rounds3[j - 1] if j > 0 else 0.0) + pool3[j, 0])

    exact = SessionSample(
        y1=exact_y1,
        y2=y2,
        y3=exact_y3,
        z=exact_z,
        d=exact_y1 + y2 + exact_z,
        y=exact_y1 + y2 + exact_y3,
        variant=Variant.EXACT,
    )
    worsened = SessionSample(
        y1=worsened_y1,
        y2=y2,
        y3=worsened_y3,
        z=worsened_z,
        d=worsened_y1 + y2 + worsened_z,
        y=worsened_y1 + y2 + worsened_y3,
        variant=Variant.WORSENED,
    )
    return exact, worsened


def sample_delivery(
    params: SchemeParams,
    stream: np.random.Generator,
    y3_partials: Sequence[float],
    mode: DeliveryMode = DeliveryMode.INDEPENDENT,
) -> float:
    """Residual delivery wait z given a session's phase-three rounds.

    ``y3_partials`` holds the m inclusive cumulative round durations
    c_1 <= ... <= c_m of the same (worsened) session.  The tagged packet is
    relayed in round j+1 with j uniform on {0, ..., m-1}; z adds the j full
    rounds before it plus the final hop.  ``independent`` draws that hop
    fresh; ``coupled`` conditions it on round j+1's max (it is that round's
    max with probability m/n, else truncated below it), so z never exceeds
    the session's remaining phase-three time.
    """
    partials = np.asarray(y3_partials, dtype=float)
    if partials.shape != (params.m,):
        raise ValueError(
            f"y3_partials must have exactly m={params.m} entries, got shape {partials.shape}"
        )
    lam = params.lambda_intra
    m = params.m
    j = min(int(stream.random() * m), m - 1)
    wait = 0.0 if j == 0 else float(partials[j - 1])
    if mode == DeliveryMode.INDEPENDENT:
        return wait + float(exp_from_uniform(stream.random(), lam))
    round_len = float(partials[j] - wait)
    k = params.cells
    if stream.random() < 1.0 / k:
        own = round_len
    else:
        v = stream.random()
        own = float(-np.log1p(v * np.expm1(-lam * round_len)) / lam)
    return wait + own


def sample_round_robin(
    n: int, rate: float, stream: np.random.Generator
) -> SessionSample:
    """One session of the turn-taking baseline: n slots, one pair each.

    The tagged pair holds a uniform slot j; its delay is the sum of the
    first j slot durations and the session is the sum of all n.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    slots = exp_from_uniform(stream.random(n), rate)
    j = 1 + min(int(stream.random() * n), n - 1)
    d = float(slots[:j].sum())
    y = float(slots.sum())
    return SessionSample(y1=0.0, y2=0.0, y3=y, z=d, d=d, y=y, variant=Variant.ROUND_ROBIN)


# ---------------------------------------------------------------------------
# Batch engine.
# ---------------------------------------------------------------------------

_COLUMNS = ("y1", "y2", "y3", "z", "d", "y")


def _default_batch_size(width: int, sessions: int) -> int:
    # Aim for 32 batches (the default batch-means resolution) but cap each
    # uniform buffer near 32 MiB.  Depends only on the layout and session
    # count, so batch boundaries (and hence all floating-point groupings)
    # are identical for every worker count.
    memory_cap = min(65536, max(256, (1 << 22) // width))
    return int(max(1, min(-(-sessions // 32), memory_cap)))


def _run_batch(args) -> tuple[int, dict, MomentSummary]:
    kind, spec, variant, mode, seed, first_index, start, count = args
    if kind == "scheme":
        params: SchemeParams = spec
        if variant == Variant.WORSENED:
            width = _worsened_width(params)
        else:
            width = _exact_width(params)
        u = np.empty((count, width))
        fill_stream_rows(seed, first_index + start, u)
        if variant == Variant.WORSENED:
            cols = _worsened_kernel(u, params, mode)
        else:
            cols = _exact_kernel(u, params)
    else:
        n, rate = spec
        u = np.empty((count, 3))
        fill_stream_rows(seed, first_index + start, u)
        cols = _round_robin_kernel(u, n, rate)
    return start, cols, MomentSummary.from_arrays(cols["y"], cols["d"])


def _run_batches(
    kind: str,
    spec,
    variant: Variant,
    mode: DeliveryMode,
    sessions: int,
    master_seed: int,
    base_stream_index: int,
    workers: int,
    batch_size: int,
) -> SimulationRun:
    if sessions < 1:
        raise ValueError(f"sessions must be >= 1, got {sessions}")
    tasks = [
        (kind, spec, variant, mode, master_seed, base_stream_index, start,
         min(batch_size, sessions - start))
        for start in range(0, sessions, batch_size)
    ]
    if workers > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(tasks))) as pool:
            results = pool.map(_run_batch, tasks)
    else:
        results = [_run_batch(t) for t in tasks]

    out = {name: np.empty(sessions) for name in _COLUMNS}
    summaries: list[MomentSummary] = []
    for start, cols, summary in results:  # pool.map preserves task order
        stop = start + cols["y"].size
        for name in _COLUMNS:
            out[name][start:stop] = cols[name]
        summaries.append(summary)
    return SimulationRun(
        variant=variant,
        delivery=mode,
        master_seed=master_seed,
        base_stream_index=base_stream_index,
        batch_size=batch_size,
        y1=out["y1"],
        y2=out["y2"],
        y3=out["y3"],
        z=out["z"],
        d=out["d"],
        y=out["y"],
        batch_summaries=summaries,
    )


def simulate_sessions(
    params: SchemeParams,
    sessions: int,
    *,
    variant: Variant = Variant.WORSENED,
    delivery: DeliveryMode = DeliveryMode.INDEPENDENT,
    master_seed: int = 0,
    base_stream_index: int = 0,
    workers: int = 1,
    batch_size: int | None = None,
) -> SimulationRun:
    """Simulate i.i.d. sessions; session s uses stream base_stream_index+s.

    Worker parallelism splits whole batches; batch boundaries and the
    reduction order are fixed, so outputs are bit-identical for any
    ``workers``.
    """
    variant = Variant(variant)
    delivery = DeliveryMode(delivery)
    if variant == Variant.ROUND_ROBIN:
        raise ValueError("use simulate_round_robin for the baseline")
    width = _worsened_width(params) if variant == Variant.WORSENED else _exact_width(params)
    bs = batch_size if batch_size is not None else _default_batch_size(width, sessions)
    return _run_batches(
        "scheme", params, variant, delivery, sessions,
        master_seed, base_stream_index, workers, bs,
    )


def simulate_round_robin(
    n: int,
    rate: float,
    sessions: int,
    *,
    master_seed: int = 0,
    base_stream_index: int = 0,
    workers: int = 1,
    batch_size: int | None = None,
) -> SimulationRun:
    """Simulate the turn-taking baseline (see :func:`sample_round_robin`)."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    bs = batch_size if batch_size is not None else _default_batch_size(3, sessions)
    return _run_batches(
        "round_robin", (int(n), float(rate)), Variant.ROUND_ROBIN,
        DeliveryMode.COUPLED, sessions, master_seed, base_stream_index, workers, bs,
    )


# ---------------------------------------------------------------------------
# Age estimators.
# ---------------------------------------------------------------------------


def estimate_age_moment_formula(
    summaries: MomentSummary | Sequence[MomentSummary],
) -> AgeEstimate:
    """Renewal-reward age estimate: mean(D) + mean(Y^2) / (2 mean(Y)).

    ``summaries`` is one MomentSummary or a sequence of per-batch
    summaries; with two or more batches the standard error comes from the
    spread of per-batch estimates (batch means; batches are assumed to be
    of comparable size), otherwise it is NaN.
    """
    batches = [summaries] if isinstance(summaries, MomentSummary) else list(summaries)
    batches = [s for s in batches if s.count > 0]
    total = merge_summaries(batches)
    if total.count < 2:
        raise ValueError(f"need at least 2 sessions, got {total.count}")

    def _delta(s: MomentSummary) -> float:
        mean_y = s.sum_y / s.count
        return s.sum_d / s.count + (s.sum_y_sq / s.count) / (2.0 * mean_y)

    delta = _delta(total)
    if len(batches) >= 2:
        per_batch = np.array([_delta(s) for s in batches])
        std_err = float(per_batch.std(ddof=1) / np.sqrt(len(per_batch)))
    else:
        std_err = float("nan")
    return AgeEstimate(
        delta_hat=delta, std_err=std_err, method="moment_formula", sessions=total.count
    )


def integrate_age_timeline(
    sessions: SimulationRun | Sequence[SessionSample],
    batches: int = 32,
) -> AgeEstimate:
    """Direct area integration of the sawtooth age process.

    Sessions are laid end to end; update j is generated when session j
    starts and delivered d_j later, dropping the age to d_j.  The exact
    area between consecutive deliveries is a trapezoid.  Requires delivery
    within the session (d <= y, i.e. coupled-style input); otherwise the
    delivery epochs would not be ordered and the sawtooth is ill-defined.
    """
    if isinstance(sessions, SimulationRun):
        y, d = sessions.y, sessions.d
    else:
        y = np.array([s.y for s in sessions])
        d = np.array([s.d for s in sessions])
    if y.size < 2:
        raise ValueError(f"need at least 2 sessions, got {y.size}")
    if np.any(d > y):
        bad = int(np.sum(d > y))
        raise ValueError(
            f"{bad} sessions deliver after the session ends (d > y); timeline "
            f"integration needs coupled delivery"
        )
    t_start = np.cumsum(y) - y
    t_deliver = t_start + d
    gaps = np.diff(t_deliver)
    areas = gaps * d[:-1] + 0.5 * gaps * gaps
    elapsed = t_deliver[-1] - t_deliver[0]
    delta = float(areas.sum() / elapsed)

    n_seg = areas.size
    n_batches = min(batches, n_seg)
    if n_batches >= 2:
        bounds = np.linspace(0, n_seg, n_batches + 1, dtype=int)
        per_batch = np.array(
            [
                areas[a:b].sum() / gaps[a:b].sum()
                for a, b in zip(bounds[:-1], bounds[1:])
                if b > a
            ]
        )
        std_err = float(per_batch.std(ddof=1) / np.sqrt(per_batch.size))
    else:
        std_err = float("nan")
    return AgeEstimate(
        delta_hat=delta, std_err=std_err, method="timeline", sessions=int(y.size)
    )


def write_session_dump(run: SimulationRun, path) -> None:
    """Debug dump, one row per session."""
    columns = (run.y1, run.y2, run.y3, run.z, run.d, run.y)
    with open(path, "w", newline="") as fh:
        fh.write("session_index,variant,y1,y2,y3,z,d,y\n")
        for i in range(run.sessions):
            values = ",".join(repr(float(col[i])) for col in columns)
            fh.write(f"{i},{run.variant.value},{values}\n")
