"""
証明ステージ検証のテスト
"""
from fractions import Fraction

import pytest

from src.models.schemas import StageOutcome
from src.services.errors import OutOfRange, UnknownStage
from src.services.valuation import ValueFunction
from src.services.verifier import (
    STAGE_IDS,
    Direction,
    DyadicSequence,
    device_pair_demo,
    dyadic_approx,
    verify_stage,
    verify_stages,
)


def _check(report, prefix):
    """説明が prefix で始まる check を1つ取り出す"""
    matches = [c for c in report.checks if c.description.startswith(prefix)]
    assert matches, f"{prefix} の check がありません"
    return matches[0]


class TestDyadic:
    """2進近似"""

    def test_decreasing_examples(self):
        assert dyadic_approx(1 / 3, 4, Direction.DECREASING) == Fraction(6, 16)
        assert dyadic_approx(1 / 3, 8, Direction.DECREASING) == Fraction(86, 256)

    def test_dyadic_target_is_exact(self):
        assert dyadic_approx(0.5, 1, Direction.DECREASING) == Fraction(1, 2)
        assert dyadic_approx(0.5, 1, Direction.INCREASING) == Fraction(1, 2)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            dyadic_approx(1.0, 3, Direction.DECREASING)
        with pytest.raises(OutOfRange):
            dyadic_approx(0.5, 0, Direction.INCREASING)

    def test_sequences(self):
        """|A_n/2^n - a| ≤ 2^-n、単調、A_n > 0"""
        for direction in Direction:
            seq = DyadicSequence.build(1 / 3, 12, direction)
            assert seq.is_monotone()
            for n, term in seq.items():
                assert term > 0
                assert abs(float(term) - 1 / 3) <= 2.0 ** (-n)
        assert DyadicSequence.build(1 / 3, 12, Direction.INCREASING).start == 2


class TestStages:
    """各ステージ"""

    @pytest.mark.parametrize("stage_id", STAGE_IDS)
    def test_stage_passes(self, stage_id):
        report = verify_stage(stage_id, seed=7)
        failed = [c.description for c in report.checks if not c.passed]
        assert report.outcome == StageOutcome.PASS, failed
        assert not report.negative_control

    def test_s1_value(self):
        report = verify_stage("S1", {"x1": 0.0, "x2": 1.0})
        assert report.instance_params["value"] == pytest.approx(0.5)

    def test_s1_unequal_amplitudes_is_a_negative_control(self):
        report = verify_stage("S1", {"alpha": 0.3})
        assert report.negative_control
        assert report.outcome == StageOutcome.EXPECTED_FAIL
        assert report.as_expected
        assert not report.passed
        conclusion = _check(report, "結論")
        assert not conclusion.passed
        assert not conclusion.expected

    @pytest.mark.parametrize("seed", range(10))
    def test_s1_passes_for_every_seed(self, seed):
        """乱数の種や固有値の位置を変えても S1 は成立する"""
        report = verify_stage("S1", {"x1": -2.0, "x2": 3.5}, seed=seed)
        failed = [c.description for c in report.checks if not c.passed]
        assert report.outcome == StageOutcome.PASS, failed

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_s1_degenerate_eigenspaces(self, m):
        report = verify_stage("S1", {"degeneracy": m}, seed=11)
        assert report.passed
        assert report.instance_params["degeneracy"] == m
        assert _check(report, f"縮退 (m={m}): max|U_f ψ - ψ|").passed
        assert _check(report, f"縮退 (m={m}): V(ψ, X)").lhs == pytest.approx(0.5)

    def test_s1_degenerate_control(self):
        """不等振幅では縮退ケースの対称性も期待どおり崩れる"""
        report = verify_stage("S1", {"alpha": 0.3, "degeneracy": 3})
        check = _check(report, "縮退 (m=3): max|U_f ψ - ψ|")
        assert not check.passed
        assert not check.expected
        assert report.as_expected

    def test_s1_spectator_on_the_spectrum(self):
        """spectator が x1 と一致すると埋め込み先の X3 が縮退する"""
        report = verify_stage("S1", {"spectator": 0.0})
        assert report.passed
        assert report.instance_params["spectator"] == 0.0

    def test_s1_degeneracy_out_of_range(self):
        with pytest.raises(OutOfRange):
            verify_stage("S1", {"degeneracy": 0})

    def test_s3_quarter_split(self):
        report = verify_stage("S3", {"pairs": [(1, 3)]})
        check = _check(report, "(a1, a2) = (1, 3): V(ψ, X)")
        assert check.lhs == pytest.approx(0.75)
        assert report.passed

    def test_s3_requires_power_of_two(self):
        with pytest.raises(OutOfRange):
            verify_stage("S3", {"pairs": [(1, 2)]})

    def test_s4_bracket(self):
        report = verify_stage("S4", {"a": 1 / 3, "depth": 20})
        assert report.passed
        value = report.instance_params["value"]
        assert abs(value - 2 / 3) < 2.0 ** (-20) + 1e-9
        assert report.instance_params["final_width"] <= 2.0 ** (-20) + 1e-9

    def test_v4_default_width(self):
        report = verify_stage("V4")
        assert report.passed
        assert report.instance_params["final_width"] <= 1e-5

    @pytest.mark.parametrize("n_terms", [2, 5, 8])
    def test_v4_width_bound_scales_with_terms(self, n_terms):
        """項数が増えても幅の上限 n·2^-depth·(y_max - y_min) で判定する"""
        report = verify_stage("V4", {"n_terms": n_terms, "depth": 12})
        assert report.passed
        xs = report.instance_params["payoffs"]
        spread = (xs[-1] + 0.1 * n_terms) - (xs[0] - 0.1 * n_terms)
        assert report.instance_params["final_width"] <= n_terms * 2.0 ** (-12) * spread

    def test_s2_sizes(self):
        report = verify_stage("S2", {"n_max": 3})
        assert sorted(report.instance_params["payoffs"]) == ["2", "4", "8"]

    def test_unknown_stage(self):
        with pytest.raises(UnknownStage):
            verify_stage("S9")

    def test_non_born_value_function_fails_conclusions(self):
        report = verify_stage("S3", vf=ValueFunction.weight_power(2.0))
        assert report.outcome == StageOutcome.FAIL


class TestVerifyStages:
    """複数ステージの検証"""

    def test_all_expands_in_order(self):
        reports = verify_stages(["all"], seed=7)
        assert [r.stage_id for r in reports] == list(STAGE_IDS)
        assert all(r.as_expected for r in reports)

    def test_duplicates_and_case(self):
        reports = verify_stages(["s3", "S1", "S3"], seed=1)
        assert [r.stage_id for r in reports] == ["S1", "S3"]

    def test_unknown_id(self):
        with pytest.raises(UnknownStage):
            verify_stages(["S1", "bogus"])

    @pytest.mark.slow
    def test_parallel_matches_sequential(self):
        sequential = verify_stages(["all"], {"depth": 20}, seed=7, jobs=1)
        parallel = verify_stages(["all"], {"depth": 20}, seed=7, jobs=4)
        assert [r.model_dump() for r in sequential] == [r.model_dump() for r in parallel]


class TestDevicePair:
    """2装置のデモ"""

    def test_thousand_branches(self):
        report = device_pair_demo(1000)
        assert _check(report, "分岐数: V(B)").lhs == pytest.approx(999 / 1001)
        assert _check(report, "Born: V(B)").lhs == pytest.approx(0.0)
        assert report.outcome == StageOutcome.EXPECTED_FAIL
        assert report.instance_params["branches"] == [2, 1001]

    def test_single_multiplicity(self):
        report = device_pair_demo(1)
        assert report.outcome == StageOutcome.PASS
        assert not report.negative_control

    def test_three_branches(self):
        assert _check(device_pair_demo(3), "分岐数: V(B)").lhs == pytest.approx(0.5)

    def test_invalid_multiplicity(self):
        with pytest.raises(OutOfRange):
            device_pair_demo(0)
