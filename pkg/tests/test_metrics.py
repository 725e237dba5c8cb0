import itertools

import numpy as np
import pytest

from gridscope.feeder import ABS_V, IM_V, P, Q, RE_V, StateTensorMeta
from gridscope.metrics import (
    METRICS, MetricsReport, aggregate, curve_frame, evaluate, metrics_table, wrap_degrees,
)


def _meta(n_phases=3, n_steps=2, zero=(2,), slack=(0,)) -> StateTensorMeta:
    return StateTensorMeta([f"{i}.a" for i in range(n_phases)], list(range(n_steps)),
                           [i in zero for i in range(n_phases)], [i in slack for i in range(n_phases)])


def _flat_truth(n_phases=3, n_steps=2) -> np.ndarray:
    X = np.zeros((n_phases, 5, n_steps))
    X[:, RE_V] = X[:, ABS_V] = 1.0
    X[:, P], X[:, Q] = 10.0, 5.0
    X[2, P] = X[2, Q] = 0.0
    return X


def _phase_one_held_out() -> np.ndarray:
    M = np.ones((3, 5, 2), dtype=bool)
    M[1] = False
    return M


def _report(v, scope="held_out") -> MetricsReport:
    return MetricsReport(v, v, v, v, {m: 1 for m in METRICS}, scope)


def test_exact_estimate_gives_zero():
    X = _flat_truth()
    r = evaluate(X, X.copy(), _phase_one_held_out(), _meta())
    assert r.values() == {"mape_vmag": 0.0, "mae_angle": 0.0, "mae_p": 0.0, "mae_q": 0.0}


def test_scaled_magnitude_gives_one_percent():
    X = _flat_truth()
    E = X.copy()
    E[:, ABS_V] *= 1.01
    r = evaluate(X, E, np.zeros(X.shape, dtype=bool), _meta())
    assert r.mape_vmag == pytest.approx(1.0, rel=1e-12)


def test_hand_computed_example():
    X = _flat_truth()
    E = X.copy()
    E[1, ABS_V] = [1.02, 0.99]
    E[1, RE_V, 0], E[1, IM_V, 0] = np.cos(np.radians(1.0)), np.sin(np.radians(1.0))
    E[1, P] = [12.0, 10.0]
    E[1, Q] = [5.0, 2.0]
    r = evaluate(X, E, _phase_one_held_out(), _meta())
    assert r.mape_vmag == pytest.approx(1.5, rel=1e-12)
    assert r.mae_angle == pytest.approx(0.5, rel=1e-12)
    assert r.mae_p == pytest.approx(1.0)
    assert r.mae_q == pytest.approx(1.5)
    assert r.n == {"mape_vmag": 2, "mae_angle": 2, "mae_p": 2, "mae_q": 2}


def test_observed_entries_do_not_count():
    X = _flat_truth()
    E = X.copy()
    M = _phase_one_held_out()
    E[M] += 50.0
    r = evaluate(X, E, M, _meta())
    assert r.values() == {"mape_vmag": 0.0, "mae_angle": 0.0, "mae_p": 0.0, "mae_q": 0.0}


def test_zero_injection_phases_are_skipped_for_power():
    X = _flat_truth()
    E = X.copy()
    E[2, P] = E[2, Q] = 7.0
    r = evaluate(X, E, np.ones(X.shape, dtype=bool), _meta(), scope="all")
    assert r.mae_p == 0.0 and r.mae_q == 0.0
    assert r.n["mae_p"] == 4


def test_angle_wraps_across_180():
    X = np.zeros((1, 5, 1))
    E = np.zeros((1, 5, 1))
    X[0, RE_V], X[0, IM_V] = np.cos(np.radians(179.9)), np.sin(np.radians(179.9))
    E[0, RE_V], E[0, IM_V] = np.cos(np.radians(-179.9)), np.sin(np.radians(-179.9))
    X[0, ABS_V] = E[0, ABS_V] = 1.0
    r = evaluate(X, E, np.zeros(X.shape, dtype=bool), _meta(1, 1, zero=(), slack=()))
    assert r.mae_angle == pytest.approx(0.2, abs=1e-9)


def test_wrap_degrees_range():
    assert wrap_degrees(np.array([180.0, -180.0, 190.0, -190.0, 540.0])).tolist() == [180.0, 180.0, -170.0, 170.0, 180.0]


def test_empty_scope_reports_none():
    X = _flat_truth()
    r = evaluate(X, X, np.ones(X.shape, dtype=bool), _meta())
    assert r.values() == {m: None for m in METRICS}
    assert r.n == {m: 0 for m in METRICS}
    r = evaluate(X, X, _phase_one_held_out(), _meta(), exclude_phases=[1])
    assert r.values() == {m: None for m in METRICS}


def test_zero_magnitude_in_scope_is_rejected():
    X = _flat_truth()
    X[1, ABS_V, 0] = 0.0
    with pytest.raises(ValueError, match="MAPE"):
        evaluate(X, X, _phase_one_held_out(), _meta())


def test_volts_or_per_unit_gives_same_mape():
    X = _flat_truth()
    E = X.copy()
    E[1, ABS_V] = [1.02, 0.97]
    M = _phase_one_held_out()
    pu = evaluate(X, E, M, _meta()).mape_vmag
    Xv, Ev = X.copy(), E.copy()
    Xv[:, ABS_V] *= 2401.8
    Ev[:, ABS_V] *= 2401.8
    assert evaluate(Xv, Ev, M, _meta()).mape_vmag == pytest.approx(pu, rel=1e-12)


def test_evaluate_rejects_bad_input():
    X = _flat_truth()
    with pytest.raises(ValueError):
        evaluate(X, X[:2], np.zeros(X.shape, dtype=bool), _meta())
    with pytest.raises(ValueError):
        evaluate(X, X, np.zeros(X.shape, dtype=bool), _meta(), scope="observed")


def test_aggregate_single_run():
    agg = aggregate([_report(2.5)])
    assert agg.mean.values() == {m: 2.5 for m in METRICS}
    assert agg.std == {m: 0.0 for m in METRICS}
    assert agg.n_runs == 1


def test_aggregate_two_runs():
    agg = aggregate([_report(1.0), _report(3.0)])
    assert agg.mean.mape_vmag == 2.0
    assert agg.std["mape_vmag"] == 1.0
    assert agg.mean.n == {m: 2 for m in METRICS}


def test_aggregate_is_order_independent():
    vals = np.random.default_rng(0).lognormal(size=6)
    results = {
        tuple(aggregate([_report(float(v)) for v in perm]).to_dict()["std"].values())
        for perm in itertools.permutations(vals)
    }
    assert len(results) == 1


def test_aggregate_skips_undefined_metrics():
    a = MetricsReport(1.0, None, 2.0, 2.0, {}, "held_out")
    b = MetricsReport(3.0, None, 4.0, 4.0, {}, "held_out")
    agg = aggregate([a, b])
    assert agg.mean.mae_angle is None and agg.std["mae_angle"] is None
    assert agg.mean.mae_p == 3.0


def test_aggregate_rejects_mixed_scopes_and_empty():
    with pytest.raises(ValueError, match="mixed scopes"):
        aggregate([_report(1.0), _report(1.0, scope="all")])
    with pytest.raises(ValueError):
        aggregate([])


def test_metrics_table_and_curves():
    rows = {"slab 16x3": aggregate([_report(1.0), _report(3.0)]),
            "fiber 16": aggregate([MetricsReport(None, 1.0, 1.0, 1.0, {}, "held_out")])}
    table = metrics_table(rows)
    assert "slab 16x3" in table and "fiber 16" in table
    assert "2 ± 1" in table and "undefined" in table
    frame = curve_frame([{"scenario": "slab", "measurement_percentage": 9.997, "report": rows["slab 16x3"]}])
    assert len(frame) == len(METRICS)
    assert frame.set_index("metric").loc["mape_vmag", "mean"] == 2.0
