"""Session samplers, coupling bounds, estimators, and the baseline."""

import numpy as np
import pytest

from aoilab import (
    DeliveryMode,
    MomentSummary,
    SchemeParams,
    StreamSpec,
    Variant,
    closed_form_age,
    estimate_age_moment_formula,
    harmonic,
    integrate_age_timeline,
    make_stream,
    merge_summaries,
    phase_moments,
    sample_coupled_sessions,
    sample_delivery,
    sample_round_robin,
    sample_session_exact,
    sample_session_worsened,
    simulate_round_robin,
    simulate_sessions,
)
from aoilab.scheme import SessionSample


def _se(arr):
    return arr.std(ddof=1) / np.sqrt(arr.size)


class TestWorsenedSampler:
    def test_phase_means_match_closed_forms(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(params, 200_000, master_seed=101)
        pm = phase_moments(params)
        for name, expected in [
            ("y1", pm.e_y1), ("y2", pm.e_y2), ("y3", pm.e_y3), ("z", pm.e_z),
        ]:
            arr = getattr(run, name)
            assert abs(arr.mean() - expected) < 4 * _se(arr), name

    def test_second_moments_match_closed_forms(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(params, 200_000, master_seed=102)
        pm = phase_moments(params)
        for name, expected in [
            ("y1", pm.e_y1_sq), ("y2", pm.e_y2_sq), ("y3", pm.e_y3_sq),
        ]:
            sq = getattr(run, name) ** 2
            assert abs(sq.mean() - expected) < 4 * _se(sq), name

    def test_single_node_cells_phase_one_is_max_of_n(self):
        params = SchemeParams(32, 1, lambda_intra=2.0)
        run = simulate_sessions(params, 100_000, master_seed=103)
        expected = harmonic(32) / 2.0
        assert abs(run.y1.mean() - expected) < 4 * _se(run.y1)

    def test_single_cell_phase_two_is_one_max(self):
        m = 8
        params = SchemeParams(m, m, lambda_inter=0.5)
        run = simulate_sessions(params, 100_000, master_seed=104)
        expected = harmonic(m) / (m * m * 0.5)
        assert abs(run.y2.mean() - expected) < 4 * _se(run.y2)

    def test_additivity_and_positivity(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(params, 10_000, master_seed=105)
        assert np.array_equal(run.d, run.y1 + run.y2 + run.z)
        assert np.array_equal(run.y, run.y1 + run.y2 + run.y3)
        for col in (run.y1, run.y2, run.y3, run.z):
            assert np.all(col > 0)

    def test_scalar_matches_batch_row(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(params, 64, master_seed=7, batch_size=16)
        sample = sample_session_worsened(params, make_stream(StreamSpec(7, 17)))
        assert sample.y == run.y[17]
        assert sample.d == run.d[17]
        assert sample.variant == Variant.WORSENED

    def test_phase_independence(self):
        run = simulate_sessions(SchemeParams(64, 4), 100_000, master_seed=106)
        n = run.y1.size
        for a, b in [(run.y1, run.y2), (run.y1, run.y3), (run.y2, run.y3)]:
            r = np.corrcoef(a, b)[0, 1]
            assert abs(r) < 4.0 / np.sqrt(n)

    def test_coupled_mode_sessions_deliver_in_time(self):
        run = simulate_sessions(
            SchemeParams(64, 4), 100_000, delivery=DeliveryMode.COUPLED, master_seed=107
        )
        assert np.all(run.d <= run.y)

    def test_coupled_mode_keeps_marginal_means(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(
            params, 200_000, delivery=DeliveryMode.COUPLED, master_seed=108
        )
        pm = phase_moments(params)
        for name, expected in [("y3", pm.e_y3), ("z", pm.e_z)]:
            arr = getattr(run, name)
            assert abs(arr.mean() - expected) < 4 * _se(arr), name


class TestExactSampler:
    def test_single_cell_reduces_to_per_node_maxima(self):
        m = 8
        params = SchemeParams(m, m)
        run = simulate_sessions(params, 100_000, variant=Variant.EXACT, master_seed=201)
        expected = m * harmonic(m - 1)  # sum of m maxima over m-1 draws
        assert abs(run.y1.mean() - expected) < 4 * _se(run.y1)

    def test_degenerate_m1_has_zero_phase_one(self):
        run = simulate_sessions(
            SchemeParams(16, 1), 5_000, variant=Variant.EXACT, master_seed=202
        )
        assert np.all(run.y1 == 0.0)
        assert np.all(run.d <= run.y)

    def test_exact_phase_means_below_worsened(self):
        params = SchemeParams(256, 8)
        exact = simulate_sessions(params, 50_000, variant=Variant.EXACT, master_seed=203)
        worsened = simulate_sessions(params, 50_000, master_seed=203)
        # one-sided z-test at a comfortable margin
        diff = worsened.y1.mean() - exact.y1.mean()
        se = np.hypot(_se(worsened.y1), _se(exact.y1))
        assert diff > 4 * se
        diff3 = worsened.y3.mean() - exact.y3.mean()
        se3 = np.hypot(_se(worsened.y3), _se(exact.y3))
        assert diff3 > 4 * se3

    def test_delivery_is_within_session_by_construction(self):
        run = simulate_sessions(
            SchemeParams(64, 4), 50_000, variant=Variant.EXACT, master_seed=204
        )
        assert np.all(run.d <= run.y)

    def test_scalar_matches_batch_row(self):
        params = SchemeParams(64, 4)
        run = simulate_sessions(params, 16, variant=Variant.EXACT, master_seed=5)
        sample = sample_session_exact(params, make_stream(StreamSpec(5, 3)))
        assert sample.y == run.y[3]
        assert sample.z == run.z[3]


class TestCoupledSessions:
    def test_pathwise_bounds_hold_everywhere(self):
        params = SchemeParams(64, 4)
        stream = make_stream(StreamSpec(301, 0))
        for _ in range(3_000):
            exact, worsened = sample_coupled_sessions(params, stream)
            assert exact.y1 <= worsened.y1
            assert exact.y3 <= worsened.y3
            assert exact.d <= exact.y
            assert worsened.d <= worsened.y

    def test_marginal_means_match_uncoupled(self):
        params = SchemeParams(64, 4)
        stream = make_stream(StreamSpec(302, 0))
        pairs = [sample_coupled_sessions(params, stream) for _ in range(20_000)]
        w_y1 = np.array([w.y1 for _, w in pairs])
        e_y1 = np.array([e.y1 for e, _ in pairs])
        pm = phase_moments(params)
        assert abs(w_y1.mean() - pm.e_y1) < 4 * _se(w_y1)
        uncoupled = simulate_sessions(params, 20_000, variant=Variant.EXACT, master_seed=303)
        se = np.hypot(_se(e_y1), _se(uncoupled.y1))
        assert abs(e_y1.mean() - uncoupled.y1.mean()) < 4 * se

    def test_requires_m_at_least_two(self):
        with pytest.raises(ValueError):
            sample_coupled_sessions(SchemeParams(8, 1), make_stream(StreamSpec(0, 0)))


class TestSampleDelivery:
    def test_m1_is_fresh_exponential(self):
        params = SchemeParams(8, 1, lambda_intra=2.0)
        stream = make_stream(StreamSpec(401, 0))
        draws = np.array(
            [sample_delivery(params, stream, [1.0]) for _ in range(100_000)]
        )
        assert abs(draws.mean() - 0.5) < 4 * _se(draws)

    def test_independent_mean_matches_closed_form(self):
        from aoilab.sampling import max_exp_from_uniform

        params = SchemeParams(64, 4)
        stream = make_stream(StreamSpec(402, 0))
        k = params.cells
        round_draws = max_exp_from_uniform(stream.random((50_000, params.m)), k, 1.0)
        partials = np.cumsum(round_draws, axis=1)
        zs = np.array(
            [sample_delivery(params, stream, partials[i]) for i in range(partials.shape[0])]
        )
        expected = (params.m - 1) / 2.0 * harmonic(k) + 1.0
        assert abs(zs.mean() - expected) < 4 * _se(zs)

    def test_coupled_never_exceeds_remaining_rounds(self):
        params = SchemeParams(64, 4)
        stream = make_stream(StreamSpec(404, 0))
        from aoilab.sampling import max_exp_from_uniform

        round_draws = max_exp_from_uniform(stream.random((10_000, params.m)), params.cells, 1.0)
        partials = np.cumsum(round_draws, axis=1)
        for i in range(partials.shape[0]):
            z = sample_delivery(params, stream, partials[i], mode=DeliveryMode.COUPLED)
            assert z <= partials[i, -1]

    def test_rejects_wrong_length(self):
        params = SchemeParams(64, 4)
        with pytest.raises(ValueError):
            sample_delivery(params, make_stream(StreamSpec(0, 0)), [1.0, 2.0])


class TestMomentSummary:
    def test_merge_matches_concatenation(self):
        rng = np.random.default_rng(0)
        y = rng.exponential(size=1000)
        d = rng.exponential(size=1000)
        merged = MomentSummary.from_arrays(y[:400], d[:400]).merge(
            MomentSummary.from_arrays(y[400:], d[400:])
        )
        full = MomentSummary.from_arrays(y, d)
        assert merged.count == full.count
        for field in ("sum_y", "sum_y_sq", "sum_d", "sum_d_sq", "sum_dy"):
            assert getattr(merged, field) == pytest.approx(getattr(full, field), rel=1e-12)

    def test_merge_commutative_and_associative(self):
        a = MomentSummary(10, 1.0, 2.0, 3.0, 4.0, 5.0)
        b = MomentSummary(20, 1.5, 2.5, 3.5, 4.5, 5.5)
        c = MomentSummary(30, 0.5, 0.25, 0.75, 0.1, 0.2)
        assert a.merge(b) == b.merge(a)
        left = a.merge(b).merge(c)
        right = a.merge(b.merge(c))
        for field in ("sum_y", "sum_y_sq", "sum_d", "sum_d_sq", "sum_dy"):
            assert getattr(left, field) == pytest.approx(getattr(right, field), rel=1e-12)

    def test_bit_identical_across_worker_counts(self):
        params = SchemeParams(64, 4)
        totals = []
        for workers in (1, 4, 16):
            run = simulate_sessions(
                params, 20_000, master_seed=9, workers=workers, batch_size=1024
            )
            totals.append(run.total_summary())
        assert totals[0] == totals[1] == totals[2]

    def test_tree_merge_empty(self):
        assert merge_summaries([]) == MomentSummary()


class TestEstimators:
    def test_degenerate_constants(self):
        y0, d0 = 3.0, 1.25
        summary = MomentSummary(
            count=10,
            sum_y=10 * y0,
            sum_y_sq=10 * y0 * y0,
            sum_d=10 * d0,
            sum_d_sq=10 * d0 * d0,
            sum_dy=10 * d0 * y0,
        )
        est = estimate_age_moment_formula(summary)
        assert est.delta_hat == pytest.approx(d0 + y0 / 2.0, rel=1e-14)

    def test_moment_formula_matches_closed_form(self):
        params = SchemeParams(256, 8)
        run = simulate_sessions(params, 200_000, master_seed=501)
        est = estimate_age_moment_formula(run.batch_summaries)
        expected = closed_form_age(params).total
        assert est.std_err > 0
        assert abs(est.delta_hat - expected) / expected < 0.01

    def test_halving_rates_doubles_age_exactly(self):
        # Power-of-two rate scaling commutes with every floating-point
        # operation in the inverse-CDF pipeline, so this is exact.
        base = SchemeParams(64, 4, 1.0, 1.0)
        halved = SchemeParams(64, 4, 0.5, 0.5)
        est_base = estimate_age_moment_formula(
            simulate_sessions(base, 5_000, master_seed=502).batch_summaries
        )
        est_halved = estimate_age_moment_formula(
            simulate_sessions(halved, 5_000, master_seed=502).batch_summaries
        )
        assert est_halved.delta_hat == 2.0 * est_base.delta_hat

    def test_rejects_too_few_sessions(self):
        with pytest.raises(ValueError):
            estimate_age_moment_formula(MomentSummary(1, 1.0, 1.0, 1.0, 1.0, 1.0))

    def test_timeline_on_deterministic_sessions(self):
        y0, d0 = 2.0, 0.75
        sessions = [
            SessionSample(0.1, 0.1, 1.8, d0 - 0.2, d0, y0, Variant.WORSENED)
            for _ in range(100)
        ]
        est = integrate_age_timeline(sessions)
        assert est.delta_hat == pytest.approx(d0 + y0 / 2.0, rel=1e-12)
        assert est.method == "timeline"

    def test_timeline_agrees_with_moment_formula(self):
        params = SchemeParams(256, 8)
        run = simulate_sessions(
            params, 200_000, delivery=DeliveryMode.COUPLED, master_seed=503
        )
        moment = estimate_age_moment_formula(run.batch_summaries)
        timeline = integrate_age_timeline(run)
        gap = abs(timeline.delta_hat - moment.delta_hat) / moment.delta_hat
        assert gap < 0.03
        assert timeline.std_err > 0

    def test_timeline_rejects_late_deliveries(self):
        sessions = [
            SessionSample(0.1, 0.1, 1.0, 2.0, 2.2, 1.2, Variant.WORSENED),
            SessionSample(0.1, 0.1, 1.0, 0.5, 0.7, 1.2, Variant.WORSENED),
        ]
        with pytest.raises(ValueError):
            integrate_age_timeline(sessions)


class TestRoundRobin:
    def test_closed_form_age(self):
        run = simulate_round_robin(4, 1.0, 200_000, master_seed=601)
        est = estimate_age_moment_formula(run.batch_summaries)
        assert abs(est.delta_hat - 5.0) < 4 * est.std_err

    def test_single_pair(self):
        run = simulate_round_robin(1, 2.0, 100_000, master_seed=602)
        est = estimate_age_moment_formula(run.batch_summaries)
        assert abs(est.delta_hat - 1.0) < 4 * est.std_err

    def test_scalar_sampler_joint_moments(self):
        stream = make_stream(StreamSpec(603, 0))
        n, rate = 6, 1.0
        samples = [sample_round_robin(n, rate, stream) for _ in range(50_000)]
        d = np.array([s.d for s in samples])
        y = np.array([s.y for s in samples])
        assert np.all(d <= y)
        assert abs(y.mean() - n / rate) < 4 * _se(y)
        assert abs(d.mean() - (n + 1) / (2 * rate)) < 4 * _se(d)
        assert samples[0].variant == Variant.ROUND_ROBIN

    def test_batch_matches_scalar_moments(self):
        n, rate = 6, 1.0
        run = simulate_round_robin(n, rate, 100_000, master_seed=604)
        assert abs(run.y.mean() - n / rate) < 4 * _se(run.y)
        assert abs(run.d.mean() - (n + 1) / (2 * rate)) < 4 * _se(run.d)
        sq = run.y**2
        assert abs(sq.mean() - (n * n + n) / rate**2) < 4 * _se(sq)

    def test_validation(self):
        with pytest.raises(ValueError):
            simulate_round_robin(0, 1.0, 100)
        with pytest.raises(ValueError):
            sample_round_robin(3, -1.0, make_stream(StreamSpec(0, 0)))


class TestSessionDump:
    def test_dump_columns_and_round_trip_values(self, tmp_path):
        import csv

        from aoilab.scheme import write_session_dump

        run = simulate_sessions(SchemeParams(16, 4), 50, master_seed=701)
        path = tmp_path / "sessions.csv"
        write_session_dump(run, path)
        with open(path, newline="") as fh:
            records = list(csv.DictReader(fh))
        assert len(records) == 50
        assert list(records[0]) == [
            "session_index", "variant", "y1", "y2", "y3", "z", "d", "y",
        ]
        assert float(records[7]["y"]) == run.y[7]
        assert records[0]["variant"] == "worsened"


class TestSimulateSessions:
    def test_rejects_round_robin_variant(self):
        with pytest.raises(ValueError):
            simulate_sessions(SchemeParams(8, 2), 10, variant=Variant.ROUND_ROBIN)

    def test_rejects_zero_sessions(self):
        with pytest.raises(ValueError):
            simulate_sessions(SchemeParams(8, 2), 0)

    def test_arrays_bitwise_stable_across_workers(self):
        params = SchemeParams(64, 4)
        runs = [
            simulate_sessions(params, 8_000, master_seed=11, workers=w, batch_size=512)
            for w in (1, 4)
        ]
        for col in ("y1", "y2", "y3", "z", "d", "y"):
            assert np.array_equal(getattr(runs[0], col), getattr(runs[1], col))
