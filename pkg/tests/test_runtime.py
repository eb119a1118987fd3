import math

import numpy as np
import pytest
from conftest import SCALAR_OFFSET, scalar_config
from hypothesis import given, settings
from hypothesis import strategies as st

from ddfunnel.deviation import build_schedule
from ddfunnel.geometry import step_envelopes
from ddfunnel.nominal import BoundConstants, estimate_B_bar
from ddfunnel.runtime import (
    ConfigError,
    InitialControllerError,
    RunConfig,
    RunReport,
    SegmentRecord,
    StabilityBoundParams,
    baseline_run,
    check_dwell,
    check_report,
    initial_controller,
    pges_bound,
    pges_limit,
    run_online,
)


def bound_params(report, cfg, B_bar):
    return StabilityBoundParams.from_certificates([s.P for s in report.segments], cfg.alpha, cfg.mu, cfg.T, B_bar, cfg.eps_bar)


# --- dwell / config -------------------------------------------------------------


def test_dwell_condition():
    check_dwell(100, 0.98, 1.02)
    with pytest.raises(ConfigError):
        check_dwell(1, 0.98, 1.5)  # -ln 1.5 / ln 0.98 > 20
    with pytest.raises(ConfigError):
        check_dwell(10, 1.0, 1.0)


def test_run_config_rejects_bad_schedule():
    with pytest.raises(ConfigError):
        RunConfig(N=50)
    with pytest.raises(ConfigError):
        RunConfig(baseline_mode="nonsense")


def test_streams_are_reproducible_and_distinct():
    a, b = RunConfig().streams(), RunConfig().streams()
    assert a["excitation"].uniform() == b["excitation"].uniform()
    s = RunConfig().streams()
    assert s["excitation"].uniform() != s["estimation"].uniform()


# --- stability bound -------------------------------------------------------------


def test_bound_collapse_case():
    p = StabilityBoundParams(2.0, 2.0, 0.98, 1.0, 100, 0.3, 0.0)
    k = np.arange(600)
    np.testing.assert_allclose(pges_bound(k, p, 3.0), 0.98 ** (k / 2) * 3.0, rtol=1e-12, atol=0)


def test_bound_at_zero_without_excitation():
    p = StabilityBoundParams(0.5, 8.0, 0.9, 1.01, 50, 0.3, 0.0)
    assert pges_bound(0, p, 1.5) == pytest.approx(4.0 * 1.5, rel=1e-15)


def test_bound_limit_geometric_series():
    p = StabilityBoundParams(0.5, 2.0, 0.95, 1.02, 20, 0.4, 0.15)
    a_hat = 0.95 * 1.02 ** (1 / 20)
    kappa = 2.0
    # unrolled recursion: each step adds sqrt(a_hat)^j of the amplified input term
    per_step = kappa * (a_hat / 0.95) ** 10 * 0.4 * 0.15
    series = sum(per_step * math.sqrt(a_hat) ** j for j in range(20_000))
    assert pges_limit(p) == pytest.approx(series, rel=1e-12)
    assert pges_bound(10**6, p, 1.0) == pytest.approx(series, rel=1e-12)


def test_bound_params_validated():
    with pytest.raises(ValueError):
        StabilityBoundParams(2.0, 1.0, 0.9, 1.0, 10, 0.1, 0.1)
    with pytest.raises(ConfigError):
        StabilityBoundParams(1.0, 1.0, 0.98, 1.5, 1, 0.1, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.5, 0.99), st.floats(1.0, 1.05), st.integers(50, 200), st.floats(0.0, 0.5))
def test_bound_decreasing_to_limit(alpha, mu, T, eps):
    p = StabilityBoundParams(1.0, 3.0, alpha, mu, T, 0.3, eps)
    if not p.alpha_hat < 1.0:
        return
    b = pges_bound(np.arange(0, 500), p, 2.0)
    assert np.all(np.diff(b) <= 1e-15)
    assert np.all(b >= pges_limit(p) - 1e-15)


# --- initial controller -----------------------------------------------------------


def _first_envelopes(case_envelopes):
    return case_envelopes.segment(range(0, 100))


def test_initial_controller_zero_deviation(twin, case_nominal, case_envelopes):
    cfg = RunConfig(x0=case_nominal.states[0])
    P0, K0, info = initial_controller(twin, case_nominal, cfg, *_first_envelopes(case_envelopes))
    assert info["level"] <= 1e-12
    assert np.linalg.eigvalsh(P0)[0] > 0


def test_initial_controller_case_study(twin, case_nominal, case_config, case_envelopes):
    P_min0, R_max0 = _first_envelopes(case_envelopes)
    P0, K0, info = initial_controller(twin, case_nominal, case_config, P_min0, R_max0)
    eta0 = case_config.x0 - case_nominal.states[0]
    np.testing.assert_allclose(eta0, [2.0, 2.0, 1.0, -1.0], atol=1e-12)
    assert eta0 @ P0 @ eta0 <= 1.0
    assert np.linalg.eigvalsh(P0 - P_min0)[0] >= -1e-8
    assert info["spectral_radius"] < 1.0


def test_initial_controller_huge_deviation(twin, case_nominal, case_envelopes):
    cfg = RunConfig(x0=case_nominal.states[0] + 1e3)
    with pytest.raises(InitialControllerError):
        initial_controller(twin, case_nominal, cfg, *_first_envelopes(case_envelopes))


# --- online loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def perfect_twin_run(twin, case_nominal):
    cfg = RunConfig(N=300, eps_bar=0.0, x0=case_nominal.states[0])
    env = step_envelopes(case_nominal.states[:300], case_nominal.inputs[:300], cfg.state_box, cfg.input_box)
    return run_online(twin, twin, case_nominal, cfg, BoundConstants(0.0, 1.0, 1.0, 1.0), env), cfg


def test_perfect_twin_zero_deviation(perfect_twin_run):
    rep, cfg = perfect_twin_run
    assert np.max(np.abs(rep.eta)) <= 1e-12
    assert not rep.excited.any()
    for seg in rep.segments[1:]:
        assert seg.beta == pytest.approx(cfg.L * 0.0**2, abs=1e-20)


def test_perfect_twin_report_clean(perfect_twin_run):
    rep, cfg = perfect_twin_run
    assert check_report(rep, None, cfg.state_box, cfg.input_box) == []
    assert rep.in_funnel().all()


def test_case_study_terminal_deviation(paper_run):
    assert paper_run.terminal_deviation <= 0.15
    assert not paper_run.diverged


def test_case_study_report_clean(paper_run, case_config, case_B_bar):
    params = bound_params(paper_run, case_config, case_B_bar)
    assert check_report(paper_run, params, case_config.state_box, case_config.input_box) == []


def test_case_study_fallbacks_recorded(paper_run):
    # every fallback is listed with its reason and keeps the previous certificate
    assert len(paper_run.fallbacks) == sum(s.source == "fallback" for s in paper_run.segments)
    for prev, seg in zip(paper_run.segments, paper_run.segments[1:]):
        if seg.source == "fallback":
            assert seg.status
            assert np.array_equal(seg.P, prev.P) and np.array_equal(seg.K, prev.K)


def test_case_study_excitation_bookkeeping(paper_run, case_config):
    sched = build_schedule(case_config.N, case_config.T, case_config.L)
    expected = np.array([sched.is_excited(k) for k in range(case_config.N)])
    np.testing.assert_array_equal(paper_run.excited, expected)
    norms = np.linalg.norm(paper_run.xi - (paper_run.eta[:-1][:, None, :] @ _gains(paper_run).transpose(0, 2, 1))[:, 0], axis=1)
    assert np.all(norms[~expected] <= 1e-12)
    assert np.all(norms[expected] <= case_config.eps_bar + 1e-12)


def _gains(rep):
    return np.stack([rep.segments[rep.segment_index[k]].K for k in range(rep.N)])


def test_case_study_trace_lengths(paper_run):
    assert paper_run.states.shape == (601, 4) and paper_run.inputs.shape == (600, 2)


def test_determinism_scalar():
    from conftest import scalar_models
    from ddfunnel.nominal import plan_nominal_lqr

    plant, twin = scalar_models()
    cfg = scalar_config(N=200)
    nom = plan_nominal_lqr(twin, [1.0], [0.0], [0.0], 200, np.eye(1), np.eye(1), reference="goal")
    const = BoundConstants(SCALAR_OFFSET * 1.2, 0.0, 0.0, nom.v)
    a = run_online(plant, twin, nom, cfg, const)
    b = run_online(plant, twin, nom, cfg, const)
    assert np.array_equal(a.states, b.states, equal_nan=True)
    assert np.array_equal(a.inputs, b.inputs, equal_nan=True)
    for sa, sb in zip(a.segments, b.segments):
        assert np.array_equal(sa.P, sb.P) and np.array_equal(sa.K, sb.K)


def test_nominal_too_short(plant, twin, case_nominal):
    short = type(case_nominal)(case_nominal.states[:101], case_nominal.inputs[:100], 0.0, 0.01)
    with pytest.raises(ConfigError):
        run_online(plant, twin, short, RunConfig(), BoundConstants.from_paper())


# --- check_report ------------------------------------------------------------------


def _hand_report(N=5):
    seg = SegmentRecord(index=0, source="sdp", P=np.eye(1), K=np.zeros((1, 1)))
    return RunReport(
        states=np.zeros((N + 1, 1)),
        inputs=np.zeros((N, 1)),
        eta=np.zeros((N + 1, 1)),
        xi=np.zeros((N, 1)),
        excited=np.zeros(N, dtype=bool),
        segment_index=np.zeros(N + 1, dtype=int),
        segments=[seg],
        fallbacks=[],
        diverged=False,
        alpha=0.9,
        steps=N,
    )


BOX = (np.array([-1.0]), np.array([1.0]))


def test_check_report_zero_run():
    p = StabilityBoundParams(1.0, 1.0, 0.9, 1.0, 5, 0.1, 0.0)
    assert check_report(_hand_report(), p, BOX, BOX) == []


def test_check_report_single_input_fault():
    rep = _hand_report()
    rep.inputs[2] = [1.5]
    v = check_report(rep, None, BOX, BOX)
    assert len(v) == 1 and v[0].kind == "input_box" and v[0].k == 2


def test_check_report_lyapunov_increase():
    rep = _hand_report()
    for k, e in ((0, 0.2), (1, 0.1), (2, 0.2)):
        rep.eta[k] = rep.states[k] = [e]
    v = check_report(rep, None, BOX, BOX)
    assert [(x.kind, x.k) for x in v] == [("lyapunov", 1)]
    rep.excited[1] = True
    assert check_report(rep, None, BOX, BOX) == []


def test_check_report_funnel_exit():
    rep = _hand_report()
    rep.eta[3] = [1.5]
    assert "funnel" in [v.kind for v in check_report(rep, None, None, None, kinds=("funnel",))]


# --- baseline -------------------------------------------------------------------------


def test_baseline_perfect_twin_tracks(twin, case_nominal):
    cfg = RunConfig(x0=case_nominal.states[0])
    for mode in ("open_loop", "twin_lqr"):
        rep = baseline_run(twin, twin, case_nominal, cfg, mode=mode)
        assert np.max(np.abs(rep.eta)) <= 1e-10


def test_baseline_case_study_violates(plant, twin, case_nominal, case_config, paper_run):
    rep = baseline_run(plant, twin, case_nominal, case_config, paper_run.segments[0].K)
    viol = check_report(rep, None, case_config.state_box, case_config.input_box, kinds=("state_box", "input_box"))
    assert len(viol) >= 1
    assert np.nanmax(rep.eta_norm) > np.max(paper_run.eta_norm)


def test_baseline_initial_gain_needs_gain(plant, twin, case_nominal, case_config):
    with pytest.raises(ConfigError):
        baseline_run(plant, twin, case_nominal, case_config, mode="initial_gain")


# --- scalar plant with certified segments -------------------------------------------


def test_scalar_segments_certified(scalar_run):
    rep = scalar_run["report"]
    assert [s.source for s in rep.segments] == ["initial", "sdp", "sdp"]


def test_scalar_growth_constraint(scalar_run):
    rep, mu = scalar_run["report"], scalar_run["cfg"].mu
    for a, b in zip(rep.segments, rep.segments[1:]):
        assert np.linalg.eigvalsh(b.P - mu * a.P)[-1] <= 1e-6 * np.linalg.norm(a.P, 2)


def test_scalar_funnel_invariance(scalar_run):
    rep = scalar_run["report"]
    V = rep.lyapunov()
    for k in range(rep.N):
        if rep.excited[k] or rep.segment_index[k] != rep.segment_index[k + 1]:
            continue
        if V[k] <= 1.0:
            assert V[k + 1] <= 1.0 + 1e-6


def test_scalar_bound_dominance(scalar_run):
    rep, cfg = scalar_run["report"], scalar_run["cfg"]
    params = bound_params(rep, cfg, estimate_B_bar(scalar_run["plant"], scalar_run["nom"]))
    assert check_report(rep, params, cfg.state_box, cfg.input_box, kinds=("pges_bound", "state_box", "input_box")) == []


def test_scalar_lyapunov_decrease_up_to_offset(scalar_run):
    rep, cfg = scalar_run["report"], scalar_run["cfg"]
    viol = check_report(rep, None, None, None, kinds=("lyapunov",), disturbance=1.2 * SCALAR_OFFSET)
    assert viol == []
