"""
ゲーム・重みマップ・正準形・複合ゲームのテスト
"""
import math

import numpy as np
import pytest

from src.services.errors import DegenerateGame, InvalidWeightMap, PayoffUndefined, ValidationError
from src.services.games import (
    CompoundGame,
    Game,
    PayoffFunction,
    WeightMap,
    canonical_forms_agree,
    canonicalize,
    compound_weight_map,
    equivalent,
    flatten,
    game_from_weight_map,
    weight_map,
)
from src.services.linalg import (
    HermitianOperator,
    StateVector,
    conjugate,
    random_hermitian,
    random_state,
    random_unitary,
)
from src.services.transforms import measurement_equivalence, payoff_equivalence
from src.services.valuation import random_game, split_partner

HALF = 1 / math.sqrt(2)


def _aggregate(pairs):
    """(ペイオフ, 重み) の列をペイオフごとに合計する"""
    totals = {}
    for c, w in pairs:
        key = round(float(c), 9)
        totals[key] = totals.get(key, 0.0) + w
    return totals


def _maps_agree(a, b, tol=1e-9):
    return all(abs(a.get(c, 0.0) - b.get(c, 0.0)) <= tol for c in set(a) | set(b))


def _as_totals(wm):
    return _aggregate(wm.entries)


def _eigh_paths(node, weight=1.0):
    """np.linalg.eigh の固有ベクトルを1本ずつたどり、(葉のペイオフ, 経路上の重みの積) を列挙する"""
    if not isinstance(node, (Game, CompoundGame)):
        yield float(node), weight
        return
    values, vectors = np.linalg.eigh(node.observable.entries)
    for x, e in zip(values, vectors.T):
        w = weight * abs(np.vdot(e, node.state.amps)) ** 2
        outcome = node.payoff(float(x)) if isinstance(node, Game) else node.outcome(float(x))
        yield from _eigh_paths(outcome, w)


def _brute_force_weights(node):
    return _aggregate(_eigh_paths(node))


def _random_compound(rng, depth):
    """各結果が現金・単純ゲーム・複合ゲームのいずれかになる乱択の複合ゲーム（分岐数 4 以下）"""
    dim = int(rng.integers(1, 5))
    values = rng.choice(np.arange(-5, 6), size=dim, replace=False).astype(float)
    X = random_hermitian(dim, rng, values)
    mapping = {}
    for x in X.spectral.eigenvalues:
        r = rng.random()
        if depth > 0 and r < 0.35:
            mapping[x] = _random_compound(rng, depth - 1)
        elif r < 0.7:
            mapping[x] = random_game(rng, int(rng.integers(1, 5)))
        else:
            mapping[x] = round(float(rng.uniform(-5, 5)), 2)
    return CompoundGame.from_mapping(random_state(dim, rng), X, mapping)


PAIR_KINDS = ("unitary", "relabel", "canonical", "split", "reweighted", "payoff", "random", "shuffled")


def _game_pair(rng, kind):
    """同値になるよう組み立てた対と、独立に選んだ対"""
    dim = int(rng.integers(1, 6))
    game = random_game(rng, dim, degenerate=dim > 1 and bool(rng.integers(0, 2)))
    if kind == "unitary":
        U = random_unitary(dim, rng)
        return game, measurement_equivalence(game, U, conjugate(game.observable, U), game.payoff)
    if kind == "relabel":
        return game, payoff_equivalence(game, lambda x: 3.0 * x - 2.0)
    if kind == "canonical":
        return game, canonicalize(game)
    if kind == "split":
        n = 2 ** int(rng.integers(1, 4))
        a1 = int(rng.integers(1, n))
        payoff = {0.0: round(float(rng.uniform(-5, 5)), 2), 1.0: round(float(rng.uniform(-5, 5)), 2)}
        two_level = Game.diagonal([math.sqrt(a1 / n), math.sqrt((n - a1) / n)], [0.0, 1.0], payoff)
        return two_level, split_partner(two_level, a1, n - a1)
    if kind == "reweighted":
        return game, Game(random_state(dim, rng), game.observable, game.payoff)
    if kind == "payoff":
        mapping = game.payoff.as_dict()
        first = next(iter(mapping))
        mapping[first] += 0.5
        return game, game.with_payoff(PayoffFunction.from_mapping(mapping))
    if kind == "shuffled":
        # 固有値とペイオフの対応だけを入れ替える
        keys = [x for x, _ in game.payoff.entries]
        values = list(game.payoff.values)
        rng.shuffle(values)
        return game, game.with_payoff(PayoffFunction(tuple(zip(keys, values))))
    return game, random_game(rng, dim)


class TestPayoffFunction:
    """ペイオフ関数"""

    def test_lookup_within_tolerance(self):
        P = PayoffFunction.from_mapping({1.0: 3.0, 2.0: 5.0})
        assert P(1.0 + 1e-12) == 3.0
        assert P.lookup(1.5) is None

    def test_conflicting_entries_are_rejected(self):
        with pytest.raises(ValidationError):
            PayoffFunction(((1.0, 2.0), (1.0 + 1e-12, 3.0)))

    def test_pointwise_arithmetic(self):
        P = PayoffFunction.identity([0.0, 1.0])
        Q = PayoffFunction.from_mapping({0.0: 2.0, 1.0: -1.0})
        assert (P + Q).as_dict() == {0.0: 2.0, 1.0: 0.0}
        assert (P + 1.5).as_dict() == {0.0: 1.5, 1.0: 2.5}
        assert (-P).as_dict() == {0.0: 0.0, 1.0: -1.0}
        assert (3 * P).as_dict() == {0.0: 0.0, 1.0: 3.0}

    def test_undefined_eigenvalue(self):
        with pytest.raises(PayoffUndefined):
            PayoffFunction.identity([0.0])(1.0)

    def test_game_requires_payoff_on_spectrum(self):
        with pytest.raises(PayoffUndefined):
            Game.diagonal([0.6, 0.8], [1.0, 2.0], {1.0: 1.0})


class TestWeightMap:
    """重みマップ"""

    def test_basis_amplitudes(self):
        """ψ = (0.6, 0.8)、diag(1,2) → {1: 0.36, 2: 0.64}"""
        wm = weight_map(Game.diagonal([0.6, 0.8], [1.0, 2.0]))
        assert wm.payoffs == pytest.approx((1.0, 2.0))
        assert wm.weights == pytest.approx((0.36, 0.64))

    def test_degenerate_observable(self, degenerate_game):
        wm = weight_map(degenerate_game)
        assert wm.payoffs == pytest.approx((1.0, 2.0))
        assert wm.weights == pytest.approx((2 / 3, 1 / 3))

    def test_constant_payoff(self):
        wm = weight_map(Game.diagonal([0.6, 0.8], [1.0, 2.0], {1.0: 3.0, 2.0: 3.0}))
        assert len(wm) == 1
        assert wm.payoffs == pytest.approx((3.0,))
        assert wm.weights == pytest.approx((1.0,))

    def test_total_weight_is_one(self, rng):
        for dim in range(1, 7):
            game = random_game(rng, dim, degenerate=dim > 2)
            assert abs(sum(weight_map(game).weights) - 1.0) < 1e-9

    def test_from_pairs_merges_and_drops_zero_weights(self):
        wm = WeightMap.from_pairs([(2.0, 0.25), (1.0, 0.5), (2.0 + 1e-12, 0.25), (5.0, 0.0)])
        assert wm.payoffs == pytest.approx((1.0, 2.0))
        assert wm.weights == pytest.approx((0.5, 0.5))

    def test_invalid_entries(self):
        with pytest.raises(InvalidWeightMap):
            WeightMap(((0.0, -0.5), (1.0, 1.5)))
        with pytest.raises(InvalidWeightMap):
            WeightMap(((0.0, 0.5), (1.0, 0.25)))
        with pytest.raises(InvalidWeightMap):
            WeightMap(((1.0, 0.5), (0.0, 0.5)))

    def test_expectation(self):
        wm = WeightMap(((0.0, 1 / 12), (2.0, 1 / 6), (5.0, 3 / 4)))
        assert wm.expectation() == pytest.approx(1 / 3 + 15 / 4)


class TestEquivalence:
    """同値判定"""

    def test_game_is_equivalent_to_its_canonical_form(self, rng):
        game = random_game(rng, 4, degenerate=True)
        assert equivalent(game, canonicalize(game))

    def test_shifted_payoff_is_not_equivalent(self, equal_game):
        shifted = equal_game.with_payoff(equal_game.payoff + 1.0)
        assert not equivalent(equal_game, shifted)

    def test_different_dimensions(self, equal_game):
        """2次元と4次元のゲームが同じ重みマップ {0: 1/2, 1: 1/2} を持つ"""
        other = Game.diagonal([0.5] * 4, [0.0, 0.0, 1.0, 1.0])
        assert equivalent(equal_game, other)
        assert weight_map(other).weights == pytest.approx((0.5, 0.5))

    def test_canonical_amplitudes_compared_at_tol(self, equal_game):
        """振幅が 1e-6 ずれた正準形は一致しない"""
        t = math.pi / 4 + 1e-6
        nearby = Game.diagonal([math.cos(t), math.sin(t)], [0.0, 1.0])
        assert not canonical_forms_agree(equal_game, nearby)
        assert not equivalent(equal_game, nearby)
        exact = Game.diagonal([math.cos(math.pi / 4), math.sin(math.pi / 4)], [0.0, 1.0])
        assert canonical_forms_agree(equal_game, exact)

    def test_equivalence_matches_brute_force_weights(self, rng):
        """同値 ⇔ 正準形の一致 ⇔ 固有ベクトルの数え上げによる重みの一致（240 組）"""
        verdicts = []
        for i in range(240):
            a, b = _game_pair(rng, PAIR_KINDS[i % len(PAIR_KINDS)])
            expected = _maps_agree(_brute_force_weights(a), _brute_force_weights(b))
            assert equivalent(a, b) == expected
            assert canonical_forms_agree(a, b) == expected
            verdicts.append(expected)
        assert sum(verdicts) >= 120
        assert len(verdicts) - sum(verdicts) >= 60

    def test_equivalence_relation(self, rng):
        """反射律・対称律・推移律"""
        games = []
        for i in range(40):
            games.extend(_game_pair(rng, PAIR_KINDS[i % len(PAIR_KINDS)]))
        n = len(games)
        relation = np.array([[equivalent(a, b) for b in games] for a in games])
        assert relation.diagonal().all()
        assert (relation == relation.T).all()
        composed = (relation.astype(int) @ relation.astype(int)) > 0
        assert not (composed & ~relation).any()
        assert relation.sum() > n


class TestCanonicalize:
    """正準形"""

    def test_degenerate_example(self, degenerate_game):
        canonical = canonicalize(degenerate_game)
        assert canonical.dim == 2
        np.testing.assert_allclose(canonical.state.amps, [math.sqrt(2 / 3), math.sqrt(1 / 3)], atol=1e-12)
        assert canonical.spectrum == pytest.approx((1.0, 2.0))
        assert canonical.payoff.values == pytest.approx((1.0, 2.0))

    def test_idempotent(self, rng):
        game = canonicalize(random_game(rng, 3))
        again = canonicalize(game)
        assert again.payoff.values == game.payoff.values
        np.testing.assert_allclose(again.state.amps, game.state.amps, atol=1e-12)

    def test_equal_payoffs_collapse_to_one_dimension(self):
        game = Game.diagonal([HALF, HALF], [0.0, 1.0], {0.0: 7.0, 1.0: 7.0})
        canonical = canonicalize(game)
        assert canonical.dim == 1
        np.testing.assert_allclose(canonical.state.amps, [1.0])
        assert canonical.payoff.as_dict() == {1.0: 7.0}

    def test_empty_weight_map_is_degenerate(self):
        with pytest.raises(DegenerateGame):
            game_from_weight_map(WeightMap(()))


class TestCompoundGame:
    """複合ゲームと平坦化"""

    def test_rank_one_four_leaves(self, equal_game):
        """外側 (1/2, 1/2)、各部分ゲーム (1/2, 1/2) → 4つの葉に 1/4 ずつ"""
        sub_a = Game.diagonal([HALF, HALF], [1.0, 2.0])
        sub_b = Game.diagonal([HALF, HALF], [3.0, 4.0])
        compound = CompoundGame.from_mapping(equal_game.state, equal_game.observable, {0.0: sub_a, 1.0: sub_b})
        assert compound.rank == 1
        wm = weight_map(flatten(compound))
        assert wm.payoffs == pytest.approx((1.0, 2.0, 3.0, 4.0))
        assert wm.weights == pytest.approx((0.25,) * 4)

    def test_rank_zero_is_unchanged(self, equal_game):
        compound = CompoundGame.from_mapping(equal_game.state, equal_game.observable, {0.0: 0.0, 1.0: 1.0})
        assert compound.rank == 0
        flat = flatten(compound)
        assert flat.observable is equal_game.observable
        assert weight_map(flat).agrees_with(weight_map(equal_game))

    def test_path_products(self, quarter_game):
        """外側 (1/4, 3/4)、枝 B の部分ゲーム (1/3, 2/3) → {0: 1/2, 1: 1/2}"""
        sub = Game.diagonal([math.sqrt(1 / 3), math.sqrt(2 / 3)], [0.0, 1.0])
        compound = CompoundGame.from_mapping(quarter_game.state, quarter_game.observable, {0.0: 0.0, 1.0: sub})
        wm = compound_weight_map(compound)
        assert wm.payoffs == pytest.approx((0.0, 1.0))
        assert wm.weights == pytest.approx((0.5, 0.5))

    def test_nested_rank(self, equal_game):
        inner = CompoundGame.from_mapping(
            equal_game.state, equal_game.observable, {0.0: equal_game, 1.0: 2.0}
        )
        outer = CompoundGame.from_mapping(StateVector([1.0]), HermitianOperator([[1.0]]), {1.0: inner})
        assert outer.rank == 2
        wm = weight_map(flatten(outer))
        assert wm.payoffs == pytest.approx((0.0, 1.0, 2.0))
        assert wm.weights == pytest.approx((0.25, 0.25, 0.5))

    def test_random_compounds_match_path_enumeration(self, rng):
        """ランク 3 以下・分岐数 4 以下の乱択複合ゲームで、平坦化の重みが経路の数え上げと一致"""
        for _ in range(200):
            compound = _random_compound(rng, 2)
            assert compound.rank <= 3
            expected = _brute_force_weights(compound)
            assert math.fsum(expected.values()) == pytest.approx(1.0, abs=1e-9)
            assert _maps_agree(_as_totals(compound_weight_map(compound)), expected)
            flat = flatten(compound)
            assert _maps_agree(_as_totals(weight_map(flat)), expected)
            assert math.fsum(weight_map(flat).weights) == pytest.approx(1.0, abs=1e-9)

    def test_missing_outcome(self, equal_game):
        with pytest.raises(PayoffUndefined):
            CompoundGame.from_mapping(equal_game.state, equal_game.observable, {0.0: 1.0})
