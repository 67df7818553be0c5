"""Calibration statistics against independent brute-force oracles.

The oracles here are deliberately separate code paths: pure-Python
enumeration for permutation p-values, hand-rolled resampling loops for the
bootstraps, and closed-form count arithmetic for the agreement metrics.
"""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conv2bench.judging import VerdictTable, VerdictVector
from conv2bench.stats import (
    StatsError,
    average_ranks,
    benchmark_score,
    cluster_bootstrap,
    cluster_bootstrap_scores,
    cohen_kappa,
    confusion_counts,
    f1_profile,
    instruction_score,
    kappa_from_confusion,
    kendall,
    pooled_item_mean,
    rank_compare,
    read_reference_scores,
    scores_from_table,
    spearman,
    subsample_bootstrap_scores,
    verbosity_check,
)
from conv2bench.synthesis import Checklist, ChecklistItem


def make_table(verdicts_by_conv, subject="subj", judge="judge-m", variant="full"):
    table = VerdictTable(subject, judge, variant)
    for conv_id, verdicts in verdicts_by_conv.items():
        items = [ChecklistItem(i, f"Q{i}?", "instruction") for i in range(len(verdicts))]
        table.add_row(
            VerdictVector(conv_id, judge, variant, list(verdicts)),
            Checklist(conv_id, "instr", items),
        )
    return table


# ---------------------------------------------------------------------------
# Hierarchical scoring
# ---------------------------------------------------------------------------


class TestInstructionScore:
    def test_all_pass(self):
        assert instruction_score([True, True, True]).score == 1.0

    def test_quarter(self):
        assert instruction_score([True, False, False, False]).score == 0.25

    def test_popcount_oracle(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        for _ in range(100):
            verdicts = [bool(b) for b in rng.integers(0, 2, size=10)]
            expected = sum(1 for v in verdicts if v) / 10
            assert instruction_score(verdicts).score == expected

    def test_empty_errors(self):
        with pytest.raises(StatsError):
            instruction_score([])


class TestBenchmarkScore:
    def test_anti_pooling_contract(self):
        table = make_table({"long": [True] * 20, "short": [False] * 3})
        assert benchmark_score(table) == 0.5
        assert pooled_item_mean(table) == 20 / 23

    def test_single_instruction(self):
        assert benchmark_score(make_table({"one": [True, False]})) == 0.5

    def test_six_instruction_hand_mean(self):
        table = make_table({
            "a": [True, True],            # 1.0
            "b": [True, False],           # 0.5
            "c": [False, False, False],   # 0.0
            "d": [True, True, True, False],  # 0.75
            "e": [True],                  # 1.0
            "f": [False, True, True, True],  # 0.75
        })
        assert benchmark_score(table) == pytest.approx(4.0 / 6, abs=1e-15)

    def test_theta_invariant_to_item_counts(self):
        # same S_i values carried by different item counts
        a = make_table({"x": [True, False], "y": [True] * 4})
        b = make_table({"x": [True, False] * 10, "y": [True] * 7})
        assert benchmark_score(a) == benchmark_score(b) == 0.75

    def test_empty_table_errors(self):
        with pytest.raises(StatsError):
            benchmark_score(make_table({}))


# ---------------------------------------------------------------------------
# Bootstraps
# ---------------------------------------------------------------------------


class TestClusterBootstrap:
    def test_zero_variance_ci(self):
        result = cluster_bootstrap_scores([0.7] * 8, B=500, seed=3)
        assert (result.ci_low, result.ci_high) == (0.7, 0.7)
        assert result.theta == 0.7

    def test_seeded_runs_bit_identical(self):
        scores = [0.2, 0.5, 0.9, 1.0, 0.1]
        a = cluster_bootstrap_scores(scores, B=1000, seed=11)
        b = cluster_bootstrap_scores(scores, B=1000, seed=11)
        assert np.array_equal(a.replicates, b.replicates)
        assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)

    def test_matches_independent_resampler(self):
        # an independently coded resampler consuming the same Philox stream
        scores = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        B, seed = 400, 21
        result = cluster_bootstrap_scores(scores, B=B, seed=seed)

        rng = np.random.Generator(np.random.Philox(key=seed))
        draws = rng.integers(0, 5, size=(B, 5))
        expected = []
        for b in range(B):
            total = 0.0
            for idx in draws[b]:
                total += scores[idx]
            expected.append(total / 5)
        assert np.allclose(result.replicates, expected, atol=0)
        lo, hi = np.percentile(expected, [2.5, 97.5], method="linear")
        assert result.ci_low == pytest.approx(lo, abs=0)
        assert result.ci_high == pytest.approx(hi, abs=0)

    def test_single_instruction_degenerate(self):
        with pytest.warns(UserWarning, match="degenerate"):
            result = cluster_bootstrap_scores([0.4], B=100, seed=0)
        assert (result.ci_low, result.ci_high) == (0.4, 0.4)

    def test_ci_within_replicate_range(self):
        result = cluster_bootstrap_scores([0.1, 0.4, 0.9, 0.3], B=300, seed=8)
        assert result.replicates.min() <= result.ci_low <= result.ci_high <= result.replicates.max()

    def test_widening_B_barely_moves_endpoints(self):
        rng = np.random.Generator(np.random.Philox(key=13))
        scores = rng.uniform(0.2, 0.9, size=30)
        a = cluster_bootstrap_scores(scores, B=1000, seed=1)
        b = cluster_bootstrap_scores(scores, B=4000, seed=2)
        assert abs(a.ci_low - b.ci_low) < 0.02
        assert abs(a.ci_high - b.ci_high) < 0.02

    def test_table_front_end(self):
        table = make_table({"a": [True, True], "b": [False, False]})
        result = cluster_bootstrap(table, B=50, seed=0)
        assert result.theta == 0.5


class TestSubsampleBootstrap:
    def test_full_sample_degenerate(self):
        scores = [0.2, 0.4, 0.6, 0.8]
        result = subsample_bootstrap_scores(scores, n=4, B=200, seed=5)
        assert np.all(result.replicates == result.theta)
        assert result.ci_low == result.ci_high == result.theta

    def test_seeded_rerun_identical(self):
        scores = list(np.linspace(0, 1, 12))
        a = subsample_bootstrap_scores(scores, n=5, B=500, seed=9)
        b = subsample_bootstrap_scores(scores, n=5, B=500, seed=9)
        assert np.array_equal(a.replicates, b.replicates)

    def test_replicate_mean_consistency(self):
        # subsample means are unbiased for theta
        rng = np.random.Generator(np.random.Philox(key=17))
        scores = rng.uniform(0, 1, size=10)
        theta = scores.mean()
        result = subsample_bootstrap_scores(scores, n=5, B=10_000, seed=2)
        se = result.replicates.std(ddof=1) / math.sqrt(len(result.replicates))
        assert abs(result.replicates.mean() - theta) < 3 * se + 1e-9

    def test_oversized_subsample_errors(self):
        with pytest.raises(StatsError):
            subsample_bootstrap_scores([0.5, 0.5], n=3, B=10, seed=0)


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def oracle_spearman_p(x, y):
    """Pure-Python full enumeration, Fractions for the count."""
    rx = average_ranks(x)
    ry = average_ranks(y)

    def rho_of(perm):
        ryp = [ry[i] for i in perm]
        n = len(rx)
        mx = sum(rx) / n
        my = sum(ryp) / n
        num = sum((a - mx) * (b - my) for a, b in zip(rx, ryp))
        den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ryp))
        return num / den

    obs = abs(rho_of(range(len(x))))
    hits = sum(
        1 for perm in itertools.permutations(range(len(x)))
        if abs(rho_of(perm)) >= obs - 1e-12
    )
    return float(Fraction(hits, math.factorial(len(x))))


def oracle_kendall(x, y):
    """Concordant/discordant counting straight from the definition."""
    n = len(x)
    concordant = discordant = 0
    tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            a = (x[i] - x[j])
            b = (y[i] - y[j])
            if a == 0 and b == 0:
                tx += 1
                ty += 1
            elif a == 0:
                tx += 1
            elif b == 0:
                ty += 1
            elif (a > 0) == (b > 0):
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) / 2
    return (concordant - discordant) / math.sqrt((n0 - tx) * (n0 - ty))


def oracle_kendall_p(x, y):
    obs = abs(oracle_kendall(x, y))
    n = len(x)
    hits = sum(
        1 for perm in itertools.permutations(range(n))
        if abs(oracle_kendall(x, [y[i] for i in perm])) >= obs - 1e-12
    )
    return hits / math.factorial(n)


class TestSpearman:
    def test_identity(self):
        x = [3.0, 1.0, 4.0, 1.5, 9.0, 2.0]
        rho, p = spearman(x, x)
        assert rho == 1.0

    def test_reverse(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        rho, _ = spearman(x, list(reversed(x)))
        assert rho == -1.0

    def test_identical_ranking_n6_exact_p(self):
        x = [1, 2, 3, 4, 5, 6]
        y = [10, 20, 30, 40, 50, 60]
        rho, p = spearman(x, y)
        assert rho == 1.0
        # exactly the identity and the full reversal reach |rho| = 1
        assert p == pytest.approx(2 / 720, abs=1e-15)

    def test_exact_p_matches_enumeration_oracle(self):
        rng = np.random.Generator(np.random.Philox(key=23))
        for n in (4, 5, 6):
            for _ in range(3):
                x = list(rng.uniform(0, 1, size=n))
                y = list(rng.uniform(0, 1, size=n))
                _, p = spearman(x, y)
                assert p == pytest.approx(oracle_spearman_p(x, y), abs=1e-12)

    def test_exact_p_with_ties(self):
        x = [1.0, 1.0, 2.0, 3.0, 4.0]
        y = [2.0, 1.0, 1.0, 3.0, 3.0]
        _, p = spearman(x, y)
        assert p == pytest.approx(oracle_spearman_p(x, y), abs=1e-12)

    def test_large_n_t_approximation(self):
        rng = np.random.Generator(np.random.Philox(key=29))
        x = rng.uniform(0, 1, 40)
        y = x + rng.normal(0, 0.15, 40)
        rho, p = spearman(x, y)
        assert 0.7 < rho <= 1.0
        assert p < 1e-6

    def test_constant_vector_errors(self):
        with pytest.raises(StatsError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestKendall:
    def test_identical_ranking_n6(self):
        x = [1, 2, 3, 4, 5, 6]
        y = [5, 10, 15, 20, 25, 30]
        tau, p = kendall(x, y)
        assert tau == 1.0
        assert p == pytest.approx(1 / 360, abs=1e-15)  # reported as 0.003
        assert round(p, 3) == 0.003

    def test_adjacent_swap_thirteen_fifteenths(self):
        x = [1, 2, 3, 4, 5, 6]
        y = [1, 2, 4, 3, 5, 6]
        tau, _ = kendall(x, y)
        assert tau == pytest.approx(13 / 15, abs=1e-12)

    def test_monotone_shift_invariance(self):
        x = [3.0, 1.0, 2.0, 5.0, 4.0]
        y = [v + 100 for v in x]
        tau, _ = kendall(x, y)
        assert tau == 1.0

    def test_tau_and_p_match_oracle(self):
        rng = np.random.Generator(np.random.Philox(key=31))
        for n in (4, 5, 6, 7):
            x = list(rng.integers(0, 5, size=n).astype(float))  # ties likely
            y = list(rng.integers(0, 5, size=n).astype(float))
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            tau, p = kendall(x, y)
            assert tau == pytest.approx(oracle_kendall(x, y), abs=1e-12)
            assert p == pytest.approx(oracle_kendall_p(x, y), abs=1e-12)

    def test_large_n_normal_approximation(self):
        rng = np.random.Generator(np.random.Philox(key=37))
        x = rng.uniform(0, 1, 30)
        y = x + rng.normal(0, 0.1, 30)
        tau, p = kendall(x, y)
        assert tau > 0.6
        assert p < 1e-5

    def test_constant_vector_errors(self):
        with pytest.raises(StatsError):
            kendall([2.0, 2.0, 2.0, 2.0], [1.0, 2.0, 3.0, 4.0])


@st.composite
def _paired_values(draw):
    n = draw(st.integers(4, 8))
    x = draw(st.lists(st.integers(0, 50), min_size=n, max_size=n))
    y = draw(st.lists(st.integers(0, 50), min_size=n, max_size=n))
    if len(set(x)) < 2:
        x[0] += 1
    if len(set(y)) < 2:
        y[0] += 1
    return [float(v) for v in x], [float(v) for v in y]


class TestMonotoneInvariance:
    @settings(max_examples=40, deadline=None)
    @given(pair=_paired_values())
    def test_strictly_monotone_transform_preserves_coefficients(self, pair):
        x, y = pair
        tx = [math.exp(0.1 * v) + 3 for v in x]  # strictly increasing
        assert list(np.argsort(tx, kind="stable")) == list(np.argsort(x, kind="stable"))
        rho_a, p_a = spearman(x, y)
        rho_b, p_b = spearman(tx, y)
        assert rho_a == pytest.approx(rho_b, abs=1e-12)
        assert p_a == pytest.approx(p_b, abs=1e-12)
        tau_a, tp_a = kendall(x, y)
        tau_b, tp_b = kendall(tx, y)
        assert tau_a == pytest.approx(tau_b, abs=1e-12)
        assert tp_a == pytest.approx(tp_b, abs=1e-12)


# ---------------------------------------------------------------------------
# Agreement metrics
# ---------------------------------------------------------------------------


class TestCohenKappa:
    def test_perfect_agreement_mixed_classes(self):
        labels = [True, False, True, False, True]
        assert cohen_kappa(labels, labels) == 1.0

    def test_hand_computed_confusion(self):
        # [[40, 10], [5, 45]]: p_o = 0.85, p_e = 0.5 -> kappa = 0.70
        assert kappa_from_confusion([[40, 10], [5, 45]]) == pytest.approx(0.70, abs=5e-3)

    def test_random_judge_near_zero(self):
        # permuted labels have kappa 0 in expectation, sd ~ 1/sqrt(n)
        rng = np.random.Generator(np.random.Philox(key=41))
        kappas = []
        for _ in range(100):
            human = [bool(b) for b in rng.integers(0, 2, size=200)]
            judge = list(human)
            rng.shuffle(judge)
            kappas.append(cohen_kappa(human, judge))
        assert abs(np.mean(kappas)) < 0.05
        assert np.mean(np.abs(kappas) <= 0.15) >= 0.9

    def test_degenerate_equal_constants(self):
        profile = f1_profile([True] * 5, [True] * 5)
        assert profile.kappa == 1.0
        assert profile.degenerate_agreement

    def test_confusion_reproduces_scalars(self):
        rng = np.random.Generator(np.random.Philox(key=43))
        human = [bool(b) for b in rng.integers(0, 2, size=120)]
        judge = [bool(b) if rng.uniform() < 0.8 else not b
                 for b in human for _ in [0]]
        profile = f1_profile(human, judge)
        assert kappa_from_confusion(profile.confusion) == profile.kappa
        (tn, fp), (fn, tp) = profile.confusion
        assert tn + fp + fn + tp == profile.n == 120
        assert profile.f1_positive == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=0)
        assert profile.f1_negative == pytest.approx(2 * tn / (2 * tn + fn + fp), abs=0)


class TestF1Profile:
    def test_perfect(self):
        labels = [True, False, True, False]
        profile = f1_profile(labels, labels)
        assert profile.f1_positive == profile.f1_negative == profile.f1_macro == 1.0
        assert profile.kappa == 1.0

    def test_all_positive_judge_on_balanced_labels(self):
        human = [True] * 50 + [False] * 50
        judge = [True] * 100
        profile = f1_profile(human, judge)
        assert profile.f1_positive == pytest.approx(2 / 3, abs=1e-12)
        assert profile.f1_negative == 0.0
        assert profile.zero_support_class is False

    def test_macro_is_mean(self):
        rng = np.random.Generator(np.random.Philox(key=47))
        for _ in range(25):
            human = [bool(b) for b in rng.integers(0, 2, size=30)]
            judge = [bool(b) for b in rng.integers(0, 2, size=30)]
            if len(set(human)) < 2 or len(set(judge)) < 2:
                continue
            profile = f1_profile(human, judge)
            assert profile.f1_macro == (profile.f1_positive + profile.f1_negative) / 2

    def test_confusion_orientation(self):
        #                      human  judge
        counts = confusion_counts([False, False, True], [False, True, True])
        assert counts == [[1, 1], [0, 1]]


# ---------------------------------------------------------------------------
# Verbosity check
# ---------------------------------------------------------------------------


class TestVerbosityCheck:
    def test_affine_increasing(self):
        lengths = list(range(10, 40))
        scores = [0.01 * v + 0.1 for v in lengths]
        check = verbosity_check(lengths, scores)
        assert check.r == pytest.approx(1.0, abs=1e-12)

    def test_independent_draws_low_r(self):
        rng = np.random.Generator(np.random.Philox(key=53))
        lengths = rng.integers(5, 500, size=500)
        scores = rng.uniform(0, 1, size=500)
        check = verbosity_check(lengths, scores)
        assert abs(check.r) < 0.12

    def test_anticorrelated(self):
        rng = np.random.Generator(np.random.Philox(key=59))
        lengths = np.arange(100, 200)
        scores = 1.0 - 0.004 * (lengths - 100) + rng.normal(0, 0.01, size=100)
        check = verbosity_check(lengths, scores)
        assert check.r < -0.9

    def test_constant_input_errors(self):
        with pytest.raises(StatsError):
            verbosity_check([5, 5, 5], [0.1, 0.2, 0.3])


# ---------------------------------------------------------------------------
# Reference ingestion and combined compare
# ---------------------------------------------------------------------------


class TestReferenceScores:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "ref.csv"
        path.write_text(
            "model,hard_complete,hard_instruct\n"
            "model-a,31.8,28.4\n"
            "model-b,20.3,20.3\n"
            "model-c,--,10.1\n"
        )
        columns, table = read_reference_scores(path)
        assert columns == ["hard_complete", "hard_instruct"]
        assert table["model-a"]["hard_complete"] == 31.8
        assert "hard_complete" not in table["model-c"]  # unparseable cell skipped

    def test_rank_compare_bundle(self):
        x = [0.1, 0.4, 0.3, 0.9, 0.7, 0.5]
        y = [1.0, 4.0, 3.0, 9.0, 7.0, 5.0]
        rc = rank_compare(x, y)
        assert rc.rho == 1.0 and rc.tau == 1.0 and rc.n == 6


def test_scores_from_table_sorted_by_conv_id():
    table = make_table({"b": [True], "a": [False], "c": [True, True]})
    assert [s.conv_id for s in scores_from_table(table)] == ["a", "b", "c"]
