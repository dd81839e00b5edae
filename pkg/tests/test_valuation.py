"""
価値関数・公理監査・表現定理・Gleason フィットのテスト
"""
import math

import numpy as np
import pytest

from src.models.schemas import Verdict
from src.services.errors import (
    DimTooSmall,
    EmptyBranchSet,
    InsufficientSpan,
    UnknownAxiom,
    UnknownValueFunction,
)
from src.services.games import Game, PayoffFunction, WeightMap, canonical_forms_agree
from src.services.linalg import HermitianOperator, StateVector, random_hermitian, random_state
from src.services.measurement import BranchSet, MeasurementProcedure
from src.services.valuation import (
    Axiom,
    ValueFunction,
    ValueKind,
    audit,
    born_value,
    build_random_corpus,
    check_axiom,
    check_linearity_lemma,
    check_non_contextuality,
    check_representation,
    device_pair_corpus,
    evaluate,
    expected_utility,
    extract_probabilities,
    gleason_fit,
    matches_profile,
    recheck_witness,
    spanning_observables,
    stage3_split_corpus,
)


def _branches(pairs):
    """(重み, ペイオフ) 列から固有値 = ペイオフのブランチ集合を作る"""
    return BranchSet.from_records(
        [{"label": [[c, 0, i]], "payoff": c, "weight": w} for i, (w, c) in enumerate(pairs)]
    )


class TestValueFunction:
    """価値関数の定義と解析"""

    def test_parse(self):
        assert ValueFunction.parse("born").kind == ValueKind.BORN
        assert ValueFunction.parse("branch-count").kind == ValueKind.BRANCH_COUNT
        vf = ValueFunction.parse("weight-power:2")
        assert vf.kind == ValueKind.WEIGHT_POWER
        assert vf.alpha == 2.0
        assert vf.name == "weight-power:2"
        table = ValueFunction.parse("table:1=2,-1=0.5")
        assert table.odds(1.0) == 2.0
        assert table.odds(-1.0) == 0.5
        assert table.odds(7.0) == 1.0

    def test_parse_errors(self):
        with pytest.raises(UnknownValueFunction):
            ValueFunction.parse("gambler")
        with pytest.raises(UnknownValueFunction):
            ValueFunction.parse("weight-power:abc")

    def test_born_equivalence(self):
        assert ValueFunction.born().is_born_equivalent
        assert ValueFunction.weight_power(1.0).is_born_equivalent
        assert not ValueFunction.weight_power(2.0).is_born_equivalent
        assert not ValueFunction.branch_count().is_born_equivalent


class TestEvaluate:
    """ブランチ集合上の評価"""

    def test_born_on_symmetric_branches(self, born):
        assert evaluate(born, _branches([(0.5, 1.0), (0.5, -1.0)])) == pytest.approx(0.0)

    def test_branch_count_ignores_weights(self):
        branches = _branches([(0.1, 1.0), (0.9, -1.0)])
        assert evaluate(ValueFunction.branch_count(), branches) == pytest.approx(0.0)

    def test_weight_power(self):
        """重み (1/4, 3/4)、ペイオフ (0, 1) → (9/16)/(10/16) = 0.9"""
        branches = _branches([(0.25, 0.0), (0.75, 1.0)])
        assert evaluate(ValueFunction.weight_power(2.0), branches) == pytest.approx(0.9)

    def test_user_table(self):
        branches = _branches([(0.5, 1.0), (0.5, -1.0)])
        vf = ValueFunction.user_table({1.0: 3.0})
        assert evaluate(vf, branches) == pytest.approx(0.5)

    def test_empty_branch_set(self, born):
        with pytest.raises(EmptyBranchSet):
            evaluate(born, BranchSet(()))


class TestBornValue:
    """Born 則の値と期待効用"""

    def test_equal_superposition(self, equal_game, born):
        assert born_value(equal_game) == pytest.approx(0.5)
        assert born.value(equal_game) == pytest.approx(0.5)

    def test_constant_payoff(self):
        game = Game.diagonal([0.6, 0.8], [1.0, 2.0], {1.0: -2.5, 2.0: -2.5})
        assert born_value(game) == pytest.approx(-2.5)

    def test_quarter_weights(self, quarter_game):
        assert born_value(quarter_game) == pytest.approx(0.75)
        assert expected_utility(quarter_game) == pytest.approx(0.75)

    def test_expected_utility_of_weight_maps(self):
        assert expected_utility(WeightMap(((0.0, 0.5), (1.0, 0.5)))) == pytest.approx(0.5)
        assert expected_utility(WeightMap(((4.0, 1.0),))) == pytest.approx(4.0)
        wm = WeightMap(((0.0, 1 / 12), (2.0, 1 / 6), (5.0, 3 / 4)))
        assert expected_utility(wm) == pytest.approx(4.0833333333)


class TestProbabilities:
    """確率の抽出"""

    def test_basis_amplitudes(self, born):
        table = extract_probabilities(born, StateVector([0.6, 0.8]), HermitianOperator.diagonal([1.0, 2.0]))
        assert table[1.0] == pytest.approx(0.36)
        assert table[2.0] == pytest.approx(0.64)

    def test_one_dimension(self, born):
        table = extract_probabilities(born, StateVector([1.0]), HermitianOperator([[3.0]]))
        assert table.as_dict() == pytest.approx({3.0: 1.0})

    def test_degenerate(self, born, degenerate_game):
        table = extract_probabilities(born, degenerate_game.state, degenerate_game.observable)
        assert table[1.0] == pytest.approx(2 / 3)
        assert table[2.0] == pytest.approx(1 / 3)

    def test_matches_projector_expectations(self, born, rng):
        psi = random_state(4, rng)
        X = random_hermitian(4, rng, [0.0, 1.0, 1.0, 3.0])
        table = extract_probabilities(born, psi, X)
        for x, P in zip(X.spectral.eigenvalues, X.spectral.projectors):
            assert abs(table[x] - float(np.vdot(psi.amps, P @ psi.amps).real)) < 1e-12


class TestAudit:
    """公理監査"""

    def test_axiom_parse(self):
        assert Axiom.parse("Zero_Sum") == Axiom.ZERO_SUM
        with pytest.raises(UnknownAxiom):
            Axiom.parse("transitivity")

    def test_corpus_is_deterministic(self):
        first = build_random_corpus(8, seed=3)
        second = build_random_corpus(8, seed=3)
        assert [i.route for i in first] == ["me-unitary", "pe-relabel", "split", "canonical"] * 2
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.game.state.amps, b.game.state.amps)
            assert canonical_forms_agree(a.game, a.partner)

    def test_born_passes_small_corpus(self, born):
        reports = audit(born, build_random_corpus(40, seed=42), seed=42)
        assert [r.axiom for r in reports] == sorted(a.value for a in Axiom)
        assert all(r.verdict == Verdict.PASS for r in reports)
        assert max(r.max_violation for r in reports) < 1e-9
        assert matches_profile(born, reports)

    @pytest.mark.slow
    def test_born_passes_full_corpus(self, born):
        reports = audit(born, build_random_corpus(200, seed=42), seed=42)
        assert all(r.verdict == Verdict.PASS for r in reports)
        assert max(r.max_violation for r in reports) < 1e-9

    def test_branch_count_device_pair(self):
        """分岐数の価値関数は測定中立性に違反する（0 と 999/1001）"""
        vf = ValueFunction.branch_count()
        report = check_axiom(vf, Axiom.MEASUREMENT_NEUTRALITY, device_pair_corpus(1000), rng_seed=7)
        assert report.verdict == Verdict.FAIL
        assert report.witness["values"] == pytest.approx([0.0, 999 / 1001])
        assert recheck_witness(vf, report)

    def test_weight_power_stage3_split(self):
        """重みの2乗の価値関数は物理性に違反する（0.9 と 0.75）"""
        vf = ValueFunction.weight_power(2.0)
        report = check_axiom(vf, "physicality", stage3_split_corpus(), rng_seed=7)
        assert report.verdict == Verdict.FAIL
        assert report.witness["values"] == pytest.approx([0.9, 0.75])
        assert recheck_witness(vf, report)

    def test_non_born_profiles(self):
        for vf in (ValueFunction.branch_count(), ValueFunction.weight_power(2.0)):
            reports = audit(vf, build_random_corpus(24, seed=5), seed=5)
            assert matches_profile(vf, reports)
            for report in reports:
                if report.verdict == Verdict.FAIL:
                    assert recheck_witness(vf, report)

    def test_branch_count_passes_neutrality_with_single_branches(self):
        report = check_axiom(
            ValueFunction.branch_count(), Axiom.MEASUREMENT_NEUTRALITY, device_pair_corpus(1), rng_seed=0
        )
        assert report.verdict == Verdict.PASS
        assert report.witness is None


class TestRepresentation:
    """表現定理"""

    def test_born_random_payoffs(self, born, rng):
        psi = random_state(4, rng)
        X = random_hermitian(4, rng, [-1.0, 0.0, 2.0, 3.0])
        corpus = [PayoffFunction(tuple((x, float(rng.uniform(-5, 5))) for x in X.spectral.eigenvalues)) for _ in range(50)]
        report = check_representation(born, psi, X, corpus)
        assert report.verdict == Verdict.PASS
        assert report.max_violation < 1e-12
        assert not report.vacuous

    def test_constant_payoffs(self, born, equal_game):
        spectrum = equal_game.spectrum
        corpus = [PayoffFunction.constant(spectrum, c) for c in (-1.0, 0.0, 2.5)]
        report = check_representation(born, equal_game.state, equal_game.observable, corpus)
        assert report.verdict == Verdict.PASS

    def test_branch_count_with_varying_multiplicity(self, equal_game):
        X = equal_game.observable
        procedures = [MeasurementProcedure.standard(X), MeasurementProcedure.uniform(X, {1.0: 3})]
        corpus = [equal_game.payoff, equal_game.payoff]
        report = check_representation(ValueFunction.branch_count(), equal_game.state, X, corpus, procedures)
        assert report.verdict == Verdict.FAIL
        assert report.witness["values"] == pytest.approx([0.75, 0.5])


class TestLinearity:
    """線形性の補題"""

    @pytest.mark.parametrize("a", [1.0, 1 / 3, -2.0, 0.7])
    def test_born_bracketing(self, born, rng, a):
        psi = random_state(3, rng)
        X = random_hermitian(3, rng, [1.0, 2.0, 3.0])
        payoff = PayoffFunction(tuple((x, float(rng.uniform(-5, 5))) for x in X.spectral.eigenvalues))
        report = check_linearity_lemma(born, psi, X, payoff, a, depth=20)
        assert report.verdict == Verdict.PASS
        assert report.max_violation < 1e-9
        v = born.value(Game(psi, X, payoff))
        assert abs(born.value(Game(psi, X, payoff * a)) - a * v) < 1e-6


class TestNonContextuality:
    """非文脈性"""

    def test_born_degenerate(self, born, degenerate_game):
        report = check_non_contextuality(born, degenerate_game.state, degenerate_game.observable, degenerate_game.payoff)
        assert report.verdict == Verdict.PASS
        assert born.value(degenerate_game) == pytest.approx(4 / 3)

    def test_weight_power_fails(self, degenerate_game):
        vf = ValueFunction.weight_power(2.0)
        report = check_non_contextuality(vf, degenerate_game.state, degenerate_game.observable, degenerate_game.payoff)
        assert report.verdict == Verdict.FAIL
        assert report.witness["values"] == pytest.approx([4 / 3, 1.2])


class TestGleason:
    """Gleason フィット"""

    def test_basis_state(self, born, rng):
        psi = StateVector.basis(3, 0)
        fit = gleason_fit(born, psi, spanning_observables(3, rng))
        np.testing.assert_allclose(fit.density_matrix.entries, np.diag([1.0, 0.0, 0.0]), atol=1e-6)
        assert fit.residual < 1e-9

    def test_random_state(self, born, rng):
        psi = random_state(3, rng)
        fit = gleason_fit(born, psi, spanning_observables(3, rng))
        rho = fit.density_matrix.entries
        assert np.linalg.norm(rho - np.outer(psi.amps, psi.amps.conj())) < 1e-6
        assert fit.residual < 1e-6
        assert abs(float(np.vdot(psi.amps, rho @ psi.amps).real) - 1.0) < 1e-6

    def test_two_dimensions_are_rejected(self, born, rng):
        with pytest.raises(DimTooSmall):
            gleason_fit(born, random_state(2, rng), spanning_observables(2, rng))

    def test_insufficient_span(self, born, rng):
        with pytest.raises(InsufficientSpan) as exc:
            gleason_fit(born, random_state(3, rng), spanning_observables(3, rng, count=1))
        assert exc.value.required == 9
