import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapt_analysis import (
    EnsembleReport,
    absorption_times,
    agreement_distribution,
    agreement_times,
    classify_partial_sums,
    cluster_counts,
    correlation_lemma_cases,
    correlation_lemma_sweep,
    dominance_diagnostic,
    expected_dynamics,
    fj_limit_matrix,
    fj_opinion_distribution,
    fj_transient_matrix,
    malleability_diagnostic,
    mean_dynamics,
    neumann_terms,
    rank_one_limit_matrix,
    rank_one_transient_matrix,
    reports_differ,
    time_reversed_distribution,
    two_state_agreement_rate,
    verify_correlation_lemma,
)
from adapt_core import StochasticVector, make_stochastic
from adapt_errors import BadSubset, NonAgreeingTrial, ParamOutOfRange, TooLargeToEnumerate
from adapt_generators import (
    block_nonergodic_chain,
    identity_chain,
    random_irreducible_chain,
    static_two_state_chain,
    uniform_chain,
)

SIGMAS = 4.0
N = 3


def test_two_state_agreement_rate():
    assert two_state_agreement_rate(0.5, 0.5) == 0.5
    assert two_state_agreement_rate(0.9, 0.8) == pytest.approx(0.26)


def test_fj_limit_by_hand():
    V = fj_limit_matrix(np.full((2, 2), 0.5), 0.5)
    assert np.allclose(V, [[0.75, 0.25], [0.25, 0.75]], atol=1e-12)
    assert np.allclose(fj_limit_matrix(np.eye(2), [0.3, 0.6]), np.eye(2))
    with pytest.raises(ParamOutOfRange):
        fj_limit_matrix(np.eye(2), 1.0)


@seed(11)
@settings(max_examples=60, deadline=None)
@given(
    raw=arrays(np.float64, (N, N), elements=st.floats(min_value=0.0, max_value=1.0)).filter(
        lambda a: np.all(a.sum(axis=1) > 1e-3)),
    gamma=arrays(np.float64, (N,), elements=st.floats(min_value=0.0, max_value=0.95)),
)
def test_fj_limit_solves_its_system(raw, gamma):
    Q = make_stochastic(raw).entries
    V = fj_limit_matrix(Q, gamma)
    residual = (np.eye(N) - gamma[:, None] * Q) @ V - np.diag(1.0 - gamma)
    assert np.max(np.abs(residual)) < 1e-9
    assert np.max(np.abs(V.sum(axis=1) - 1.0)) < 1e-9
    assert np.all(V > -1e-12)
    # the Neumann series converges to the same matrix
    assert np.allclose(fj_transient_matrix(Q, gamma, neumann_terms(gamma)), V, atol=1e-9)


def test_transient_matrix_first_steps():
    Q = np.array([[0.2, 0.8], [0.6, 0.4]])
    gamma = np.array([0.3, 0.7])
    assert np.array_equal(fj_transient_matrix(Q, gamma, 0), np.zeros((2, 2)))
    assert np.allclose(fj_transient_matrix(Q, gamma, 1), np.diag(1 - gamma))
    reach = rank_one_transient_matrix(Q, gamma, [0.5, 0.5], 2).sum(axis=1)
    assert np.all(reach < 1.0)


def test_neumann_terms():
    assert neumann_terms([0.5]) == 41
    assert neumann_terms([0.0, 0.0]) == 1


def test_rank_one_limit_is_one_q():
    rng = np.random.default_rng(0)
    for _ in range(20):
        Q = make_stochastic(rng.random((4, 4))).entries
        gamma = rng.random(4) * 0.9
        q = StochasticVector([0.1, 0.2, 0.3, 0.4])
        V = rank_one_limit_matrix(Q, gamma, q)
        assert np.allclose(V, np.tile(q.entries, (4, 1)), atol=1e-9)


def test_agreement_distribution_static_chain():
    chain = static_two_state_chain(0.9, 0.8, 1000)
    report = agreement_distribution(chain, [1.0, 2.0], 0, 3000, seed=3)
    assert report.excluded == 0
    assert report.oracle == pytest.approx([2 / 3, 1 / 3])
    assert report.within(SIGMAS)


def test_agreement_distribution_irreducible_chain():
    chain = random_irreducible_chain(4, 1000, seed=5)
    report = agreement_distribution(chain, [1.0, 2.0, 3.0, 4.0], 0, 2000, seed=9)
    assert report.within(SIGMAS)
    assert sum(report.estimate) == pytest.approx(1.0)


def test_agreement_distribution_needs_distinct_values():
    with pytest.raises(ParamOutOfRange):
        agreement_distribution(static_two_state_chain(0.5, 0.5, 10), [1.0, 1.0], 0, 10, seed=0)


def test_agreement_never_reached():
    with pytest.raises(NonAgreeingTrial):
        agreement_times(identity_chain(2, 20), [1.0, 2.0], 0, 10, seed=0)


def test_agreement_times_are_geometric():
    chain = static_two_state_chain(0.5, 0.5, 1000)
    report = agreement_times(chain, [1.0, 2.0], 0, 4000, seed=13, geometric_rate=0.5)
    assert report.estimate[0] == 0.0
    # mean 2, standard deviation sqrt(2)
    assert abs(report.details["mean"] - 2.0) < SIGMAS * np.sqrt(2.0 / 4000)
    assert report.details["chi2_pvalue"] > 1e-3
    assert report.within(SIGMAS)


def test_cluster_counts_block_chain():
    chain = block_nonergodic_chain(4, 300, seed=4, cross_scale=0.0)
    report = cluster_counts(chain, [1.0, 2.0, 3.0, 4.0], 0, 100, seed=1, groups=[[0, 1], [2, 3]])
    assert report.estimate[1] == 1.0
    assert report.details["groups_agreed_fraction"] == 1.0
    assert report.details["global_agreement_fraction"] == 0.0


def test_cluster_counts_default_block_chain():
    groups = [range(5), range(5, 10)]
    report = cluster_counts(block_nonergodic_chain(10, 400, seed=4), np.arange(1.0, 11.0), 0, 200, seed=2,
                            groups=groups)
    assert report.estimate[1] == 1.0
    assert report.details["groups_agreed_fraction"] == 1.0
    assert report.details["global_agreement_fraction"] == 0.0


def test_cluster_counts_strongly_coupled_blocks():
    groups = [range(5), range(5, 10)]
    # unit cross weight at t = 0 lets early copying hand both blocks one origin
    report = cluster_counts(block_nonergodic_chain(10, 400, seed=4, cross_scale=1.0), np.arange(1.0, 11.0), 0,
                            200, seed=2, groups=groups)
    assert report.details["groups_agreed_fraction"] >= 0.9
    assert report.details["global_agreement_fraction"] > 0.0
    assert report.estimate[0] == report.details["global_agreement_fraction"]


def test_mean_dynamics():
    x0 = [1.0, 2.0, 3.0]
    exact = mean_dynamics(identity_chain(3, 20), x0, 0, 20, 100, seed=0)
    assert exact.max_abs_deviation == 0.0
    assert np.array(exact.empirical).shape == (21, 3)
    chain = random_irreducible_chain(3, 30, seed=1)
    comparison = mean_dynamics(chain, x0, 0, 30, 1000, seed=4)
    # values lie in [1, 3]: standard error at most 1/sqrt(1000)
    assert comparison.max_abs_deviation < 6 / np.sqrt(1000)
    assert np.allclose(comparison.oracle, expected_dynamics(chain, x0, 0, 30))


def test_fj_opinion_distribution_uniform_pair():
    report = fj_opinion_distribution(uniform_chain(2, 40), 0.5, [21.0, 22.0], [1.0, 2.0], 40, 2000, seed=6)
    assert np.allclose(report.oracle, [[0.75, 0.25], [0.25, 0.75]])
    assert np.max(np.abs(report.residual_mass)) < 1e-3
    assert report.within(SIGMAS)
    assert np.allclose(report.transient_oracle, report.oracle, atol=1e-9)


def test_rank_one_distribution_on_time_varying_chain():
    chain = random_irreducible_chain(3, 60, seed=2)
    q = [0.2, 0.3, 0.5]
    for level in (0.2, 0.8):
        report = fj_opinion_distribution(chain, level, [21.0, 22.0, 23.0], [1.0, 2.0, 3.0], 60, 800,
                                         seed=7, variant="rank-one", q=q)
        assert np.allclose(report.oracle, [q] * 3)
        assert report.within(SIGMAS)


def test_fj_distribution_needs_static_chain():
    with pytest.raises(ParamOutOfRange):
        fj_opinion_distribution(random_irreducible_chain(2, 10, seed=0), [0.2, 0.4], [21.0, 22.0], [1.0, 2.0],
                                10, 10, seed=0)


def test_absorption_times():
    chain = random_irreducible_chain(4, 150, seed=3)
    gamma = [0.2, 0.5, 0.7, 0.9]
    u, x0 = [21.0, 22.0, 23.0, 24.0], [1.0, 2.0, 3.0, 4.0]
    for variant, q in (("fj", None), ("rank-one", [0.25] * 4)):
        report = absorption_times(chain, gamma, u, x0, 0, 150, 100, seed=5, variant=variant, q=q)
        assert report.estimate == [1.0]
        assert report.details["exits_after_absorption"] == 0
        early = absorption_times(chain, gamma, u, x0, 0, 150, 100, seed=5, variant=variant, q=q,
                                 stop_on_absorption=True)
        assert early.estimate == report.estimate
        assert early.details["mean_time"] == report.details["mean_time"]


def test_time_reversed_matches_aps():
    chain = static_two_state_chain(0.9, 0.8, 200)
    for k, p_inf in enumerate(([0.5, 0.5], [0.0, 1.0])):
        report = time_reversed_distribution(chain, 0, p_inf, 60, 1500, seed=20 + k)
        assert report.oracle == pytest.approx([2 / 3, 1 / 3])
        assert np.allclose(report.transient_oracle, report.oracle, atol=1e-8)
        assert report.within(SIGMAS)


def test_time_reversed_depends_on_start_without_ergodicity():
    chain = block_nonergodic_chain(4, 100, seed=6)
    first = time_reversed_distribution(chain, 5, [1.0, 0.0, 0.0, 0.0], 100, 500, seed=1)
    second = time_reversed_distribution(chain, 5, [0.0, 0.0, 0.0, 1.0], 100, 500, seed=2)
    assert first.oracle is None
    assert reports_differ(first, second, 3.0)


def test_report_helpers():
    report = EnsembleReport(estimator="x", trials=100, estimate=[0.5, 0.5], std_err=[0.05, 0.05],
                            oracle=[0.6, 0.4], seed=0)
    assert report.deviation_sigmas() == pytest.approx(2.0)
    assert report.within(3.0)
    assert report.csv_rows()[1] == (0, 1, 0.5, 0.05, 0.4)
    with pytest.raises(ParamOutOfRange):
        EnsembleReport(estimator="y", trials=1, estimate=[1.0], std_err=[0.0], seed=0).deviation_sigmas()


@pytest.mark.parametrize("summands, expected", [
    (1.0 / np.arange(1, 1001), "diverging-trend"),
    (np.ones(1000), "diverging-trend"),
    (1.0 / np.arange(1, 1001) ** 2, "converging-trend"),
    (np.zeros(1000), "converging-trend"),
    (0.5 ** np.arange(1000), "converging-trend"),
])
def test_classify_partial_sums(summands, expected):
    diagnostic = classify_partial_sums(summands, "test")
    assert diagnostic.classification == expected
    assert diagnostic.partial_sums[-1] == pytest.approx(float(np.sum(summands)))


def test_dominance_diagnostic():
    into_S, out_of_S = dominance_diagnostic(block_nonergodic_chain(4, 1000, seed=1), [0, 1])
    assert into_S.classification == "converging-trend"
    assert out_of_S.classification == "converging-trend"
    into_S, out_of_S = dominance_diagnostic(uniform_chain(4, 1000), [0])
    assert into_S.classification == "diverging-trend"
    assert out_of_S.classification == "diverging-trend"
    with pytest.raises(BadSubset):
        dominance_diagnostic(uniform_chain(4, 10), [0, 1, 2, 3])
    with pytest.raises(BadSubset):
        dominance_diagnostic(uniform_chain(4, 10), [])


def test_malleability_diagnostic():
    assert malleability_diagnostic([0.5, 0.5], [0, 1], 1000).classification == "diverging-trend"
    fading = malleability_diagnostic(lambda t: np.full(2, 1.0 - 1.0 / (t + 1)), [0, 1], 1000)
    assert fading.classification == "converging-trend"
    with pytest.raises(ParamOutOfRange):
        malleability_diagnostic(0.5, [0], 100)
    assert malleability_diagnostic(0.5, [0], 100, n=2).classification == "diverging-trend"


def test_correlation_lemma_single_step_is_equality():
    chain = random_irreducible_chain(3, 5, seed=4)
    for check in correlation_lemma_sweep(chain, 1, 1):
        assert abs(check.lhs - check.rhs) <= 1e-14


def test_correlation_lemma_enumerations_agree():
    chain = random_irreducible_chain(3, 4, seed=9)
    for S, ell in (([0], 1), ([0, 2], 0), ([0, 1, 2], 2)):
        lazy = verify_correlation_lemma(chain, S, ell, 1, 2)
        full = verify_correlation_lemma(chain, S, ell, 1, 2, exhaustive=True)
        assert lazy.lhs == pytest.approx(full.lhs, abs=1e-12)
        assert lazy.holds and full.holds


def test_correlation_lemma_single_agent_is_product_entry():
    chain = random_irreducible_chain(3, 6, seed=2)
    check = verify_correlation_lemma(chain, [1], 2, 0, 5)
    assert check.lhs == pytest.approx(check.rhs, abs=1e-12)


def test_correlation_lemma_cases_hold():
    checks = correlation_lemma_cases(3, 3, 40, seed=7)
    assert len(checks) == 40
    assert all(check.holds for check in checks)
    checks = correlation_lemma_sweep(random_irreducible_chain(3, 2, seed=7), 0, 2)
    assert len(checks) == 7 * 3
    assert all(check.holds for check in checks)


def test_correlation_lemma_limits():
    chain = random_irreducible_chain(4, 5, seed=0)
    with pytest.raises(TooLargeToEnumerate):
        verify_correlation_lemma(chain, [0, 1], 0, 0, 3, exhaustive=True)
    with pytest.raises(ParamOutOfRange):
        verify_correlation_lemma(chain, [0], 7, 0, 1)
    with pytest.raises(BadSubset):
        verify_correlation_lemma(chain, [9], 0, 0, 1)
