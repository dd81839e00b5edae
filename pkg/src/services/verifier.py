"""
証明ステージの検証 - 各ステージの構成を実際に組み立て、結論を数値的に確かめる

構成の破綻（絡み合い関係の違反など）は StageConstructionError、
結論の不成立は StageReport の失敗した check として区別する。
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.config.settings import settings
from src.models.schemas import CheckResult, StageReport
from src.services.errors import OutOfRange, StageConstructionError, TransformError, UnknownStage
from src.services.games import (
    Game,
    PayoffFunction,
    canonical_forms_agree,
    equivalent,
    weight_map,
)
from src.services.linalg import (
    HermitianOperator,
    Isometry,
    StateVector,
    apply_function,
    conjugate,
    random_hermitian,
    random_state,
)
from src.services.measurement import (
    MeasurementProcedure,
    SubMeasurement,
    compose,
    instantiates,
    run,
)
from src.services.transforms import (
    embed_subspace,
    general_equivalence_route,
    measurement_equivalence,
    payoff_equivalence,
    phase_unitary,
    reflection_unitary,
    splitting_isometry,
)
from src.services.valuation import (
    ValueFunction,
    check_linearity_lemma,
    check_non_contextuality,
    check_representation,
    device_pair_corpus,
    evaluate,
    expected_utility,
    extract_probabilities,
    gleason_fit,
    random_game,
    spanning_observables,
)

logger = logging.getLogger(__name__)

STAGE_IDS = ("S1", "S2", "S3", "S4", "S5", "S6", "V2", "V3", "V4", "REP", "NC", "GLEASON", "LIN")


# === 2進近似 ===
class Direction(str, Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"


def dyadic_approx(a: float, n: int, direction: Direction) -> Fraction:
    """decreasing: a 以上で最小の A/2^n、increasing: a 以下で最大の A/2^n"""
    if not 0 < a < 1:
        raise OutOfRange(f"a は (0, 1) の範囲である必要があります: {a}")
    if n < 1:
        raise OutOfRange(f"n は 1 以上である必要があります: {n}")
    m = 2 ** n
    exact = Fraction(a) * m
    numerator = math.ceil(exact) if Direction(direction) == Direction.DECREASING else math.floor(exact)
    return Fraction(numerator, m)


@dataclass(frozen=True)
class DyadicSequence:
    """A_n/2^n の単調列。A_n = 0 の項は含めない"""

    target: float
    direction: Direction
    start: int
    terms: Tuple[Fraction, ...]

    @classmethod
    def build(cls, target: float, depth: int, direction: Direction) -> "DyadicSequence":
        indexed = [(n, dyadic_approx(target, n, direction)) for n in range(1, depth + 1)]
        indexed = [(n, t) for n, t in indexed if t > 0]
        start = indexed[0][0] if indexed else depth + 1
        return cls(float(target), Direction(direction), start, tuple(t for _, t in indexed))

    def items(self) -> List[Tuple[int, Fraction]]:
        return list(zip(range(self.start, self.start + len(self.terms)), self.terms))

    def is_monotone(self) -> bool:
        pairs = zip(self.terms, self.terms[1:])
        if self.direction == Direction.DECREASING:
            return all(b <= a for a, b in pairs)
        return all(b >= a for a, b in pairs)


# === レポート組み立て ===
class _Checks:
    """ステージ内の check を集め、構成の前提違反は例外にする"""

    def __init__(self, stage_id: str):
        self.stage_id = stage_id
        self.items: List[CheckResult] = []

    def equal(self, description: str, lhs: float, rhs: float, tol: Optional[float] = None, expected: bool = True):
        tol = settings.TOL if tol is None else tol
        lhs, rhs = float(lhs), float(rhs)
        self.items.append(
            CheckResult(
                description=description, lhs=lhs, rhs=rhs, tol=tol, relation="eq",
                passed=abs(lhs - rhs) <= tol, expected=expected,
            )
        )

    def at_most(self, description: str, lhs: float, rhs: float, tol: Optional[float] = None, expected: bool = True):
        tol = settings.TOL if tol is None else tol
        lhs, rhs = float(lhs), float(rhs)
        self.items.append(
            CheckResult(
                description=description, lhs=lhs, rhs=rhs, tol=tol, relation="le",
                passed=lhs <= rhs + tol, expected=expected,
            )
        )

    def require(self, condition: bool, diagnostic: str) -> None:
        if not condition:
            raise StageConstructionError(self.stage_id, diagnostic)


def _require_equivalent(checks: _Checks, b_or_game, game: Game, diagnostic: str) -> None:
    if isinstance(b_or_game, Game):
        checks.require(equivalent(b_or_game, game), diagnostic)
    else:
        checks.require(instantiates(b_or_game, game), diagnostic)


def _identity_game(psi: StateVector, X: HermitianOperator) -> Game:
    return Game(psi, X, PayoffFunction.identity(X.spectral.eigenvalues))


def _two_level(p: float, x1: float, x2: float) -> Game:
    """重み (p, 1-p) で x1, x2 を取る2準位ゲーム"""
    return Game.diagonal([math.sqrt(p), math.sqrt(max(1.0 - p, 0.0))], [x1, x2])


# === ステージ ===
def _stage_s1(params, rng, vf: ValueFunction, checks: _Checks):
    """鏡映 f(x) = -x + x1 + x2 に関する対称性から V = ½(x1 + x2)"""
    x1 = float(params.get("x1", 0.0))
    x2 = float(params.get("x2", 1.0))
    alpha = float(params.get("alpha", 0.5))
    spectator = float(params.get("spectator", 5.0))
    if not 0 < alpha < 1:
        raise OutOfRange(f"alpha は (0, 1) の範囲である必要があります: {alpha}")
    if abs(x1 - x2) <= settings.TOL:
        raise OutOfRange("x1 と x2 は異なる必要があります")
    control = abs(alpha - 0.5) > settings.TOL
    symmetric = not control

    k = x1 + x2
    game = _two_level(alpha, x1, x2)
    X = game.observable
    v = vf.value(game)

    def reflect(x):
        return -x + k

    # 弱加法性・零和性と PE（⟨ψ, X, g⟩ を g で写すと ⟨ψ, g(X), 1⟩）
    def shift(x):
        return x + k

    def negate(x):
        return -x

    shifted = game.with_payoff(game.payoff + k)
    negated = game.with_payoff(-game.payoff)
    shifted_obs = _identity_game(game.state, apply_function(X, shift))
    negated_obs = _identity_game(game.state, apply_function(X, negate))
    _require_equivalent(checks, payoff_equivalence(shifted, shift), shifted_obs, "PE (x + k) で重みマップが保存されていません")
    _require_equivalent(checks, payoff_equivalence(negated, negate), negated_obs, "PE (-x) で重みマップが保存されていません")
    checks.equal("弱加法性: V(ψ, X, 1 + k) = V(ψ, X) + k", vf.value(shifted), v + k)
    checks.equal("PE: V(ψ, X, 1 + k) = V(ψ, X + k)", vf.value(shifted), vf.value(shifted_obs))
    checks.equal("零和性 + PE: V(ψ, -X) = -V(ψ, X)", vf.value(negated_obs), -v)

    reflected_obs = apply_function(X, reflect)
    reflected = _identity_game(game.state, reflected_obs)
    via_pe = payoff_equivalence(game.with_payoff(PayoffFunction.from_callable(reflect, game.spectrum)), reflect)
    checks.equal("PE: V(ψ, f(X), 1) = V(ψ, X, f)", vf.value(reflected), vf.value(via_pe))
    checks.equal("零和性 + 弱加法性: V(ψ, -X + x1 + x2) = -V(ψ, X) + x1 + x2", vf.value(reflected), -v + k)

    # ME: U_f X U_f† = f(X)
    U = reflection_unitary(X, x1, x2, state=game.state)
    checks.require(U.is_unitary(), "U_f がユニタリではありません")
    via_me = measurement_equivalence(game, U, reflected_obs, reflected.payoff)
    _require_equivalent(checks, via_me, game, "ME で重みマップが保存されていません")
    checks.equal("鏡映対称性: max|U_f ψ - ψ| = 0", U.apply(game.state).distance(game.state), 0.0, expected=symmetric)
    checks.equal("ME + 対称性: V(ψ, f(X)) = V(ψ, X)", vf.value(reflected), v, expected=symmetric)
    checks.equal("結論: V(ψ, X) = ½(x1 + x2)", v, k / 2, expected=symmetric)

    # 縮退ケース: x1, x2 の固有空間がともに m 次元で、各固有空間内の成分は任意
    m = int(params.get("degeneracy", 2))
    if not 1 <= m <= 8:
        raise OutOfRange(f"degeneracy は 1 から 8 の範囲である必要があります: {m}")
    Xd = HermitianOperator.diagonal([x1] * m + [x2] * m)
    psi_d = StateVector(
        np.concatenate([math.sqrt(alpha) * random_state(m, rng).amps, math.sqrt(1 - alpha) * random_state(m, rng).amps])
    )
    game_d = _identity_game(psi_d, Xd)
    Ud = reflection_unitary(Xd, x1, x2, state=psi_d)
    reflected_d = _identity_game(psi_d, apply_function(Xd, reflect))
    via_me_d = measurement_equivalence(game_d, Ud, reflected_d.observable, reflected_d.payoff)
    _require_equivalent(checks, via_me_d, game_d, "縮退ケースの ME で重みマップが保存されていません")
    checks.equal(
        f"縮退 (m={m}): max|U_f ψ - ψ| = 0", Ud.apply(psi_d).distance(psi_d), 0.0, expected=symmetric
    )
    checks.equal(f"縮退 (m={m}): V(ψ, X) = ½(x1 + x2)", vf.value(game_d), k / 2, expected=symmetric)

    # 3次元への埋め込み（spectator が x1, x2 と一致すれば縮退ケース）
    X3 = HermitianOperator.diagonal([x1, x2, spectator])
    E = embed_subspace([0, 1], 3)
    embedded = measurement_equivalence(game, E, X3, PayoffFunction.identity(X3.spectral.eigenvalues))
    _require_equivalent(checks, embedded, game, "埋め込みで重みマップが保存されていません")
    checks.equal("埋め込み: V(Eψ, X3) = ½(x1 + x2)", vf.value(embedded), k / 2, expected=symmetric)

    return {"x1": x1, "x2": x2, "alpha": alpha, "spectator": spectator, "degeneracy": m, "value": v}, control


def _equal_block(vf, X, payoff, block: List[int], errors: Dict[str, float]) -> float:
    """
    block 上の等重ね合わせの値を、半分ずつの2ブロックへの逐次測定で求める。
    Y = 1·|A⟩⟨A| + 2·|B⟩⟨B| を測ってから各ブロックで X を測る。
    """
    dim = X.dim
    psi = np.zeros(dim, dtype=complex)
    psi[block] = 1.0 / math.sqrt(len(block))
    psi = StateVector(psi)
    game = Game(psi, X, payoff)
    if len(block) <= 2:
        value = vf.value(game)
        mean = math.fsum(payoff(float(X.entries[i, i].real)) for i in block) / len(block)
        errors["base"] = max(errors.get("base", 0.0), abs(value - mean))
        return value

    half = len(block) // 2
    A, B = block[:half], block[half:]
    y_a = _equal_block(vf, X, payoff, A, errors)
    y_b = _equal_block(vf, X, payoff, B, errors)

    a_vec = np.zeros(dim)
    a_vec[A] = 1.0 / math.sqrt(len(A))
    b_vec = np.zeros(dim)
    b_vec[B] = 1.0 / math.sqrt(len(B))
    Y = HermitianOperator(np.outer(a_vec, a_vec) + 2.0 * np.outer(b_vec, b_vec))

    standard_x = MeasurementProcedure.standard(X)
    continuation = {
        0.0: 0.0,
        1.0: SubMeasurement(standard_x, payoff=payoff),
        2.0: SubMeasurement(standard_x, payoff=payoff),
    }
    composite = compose(MeasurementProcedure.standard(Y), psi, continuation)
    if not instantiates(composite, game):
        raise StageConstructionError("S2", f"ブロック {block} の合成測定が元のゲームを実現していません")

    y_game = Game(psi, Y, PayoffFunction.from_mapping({0.0: 0.0, 1.0: y_a, 2.0: y_b}))
    y_value = vf.value(y_game)
    errors["substitutivity"] = max(errors.get("substitutivity", 0.0), abs(evaluate(vf, composite) - y_value))
    errors["stage1"] = max(errors.get("stage1", 0.0), abs(y_value - (y_a + y_b) / 2))
    return y_value


def _stage_s2(params, rng, vf, checks: _Checks):
    """N = 2^n の等重ね合わせを2項の等重ね合わせへ再帰的に帰着する"""
    n_max = int(params.get("n_max", 3))
    if not 1 <= n_max <= 6:
        raise OutOfRange(f"n_max は 1 から 6 の範囲である必要があります: {n_max}")
    instance = {"n_max": n_max, "payoffs": {}}
    for n in range(1, n_max + 1):
        N = 2 ** n
        xs = rng.integers(-5, 6, size=N).astype(float)
        X = HermitianOperator.diagonal(xs)
        payoff = PayoffFunction.identity(X.spectral.eigenvalues)
        errors: Dict[str, float] = {}
        constructed = _equal_block(vf, X, payoff, list(range(N)), errors)
        mean = math.fsum(xs) / N
        direct = vf.value(Game(StateVector.equal_superposition(N), X, payoff))
        checks.equal(f"N={N}: V(ψ, X) = (1/N)Σx_i", direct, mean)
        checks.equal(f"N={N}: 再帰構成の値 = (1/N)Σx_i", constructed, mean)
        checks.equal(f"N={N}: 2項の等重ね合わせ = ½(x_a + x_b)", errors["base"], 0.0)
        if N > 2:
            checks.equal(f"N={N}: 部分ブロックで V(Y) = ½(y_A + y_B)", errors["stage1"], 0.0)
            checks.equal(f"N={N}: 代替性 V(合成) = V(ψ, Y)", errors["substitutivity"], 0.0)
        instance["payoffs"][str(N)] = [float(x) for x in xs]
    return instance, False


def _stage_s3(params, rng, vf, checks: _Checks):
    """√a1|λ1⟩ + √a2|λ2⟩ を N = a1 + a2 個の等重ね合わせへ分割する"""
    x1 = float(params.get("x1", 0.0))
    x2 = float(params.get("x2", 1.0))
    pairs = [tuple(int(a) for a in p) for p in params.get("pairs", [(1, 3), (3, 5)])]
    if abs(x1 - x2) <= settings.TOL:
        raise OutOfRange("x1 と x2 は異なる必要があります")
    for a1, a2 in pairs:
        N = a1 + a2
        if a1 < 1 or a2 < 1 or N & (N - 1):
            raise OutOfRange(f"a1 + a2 は2の冪である必要があります: ({a1}, {a2})")
        game = _two_level(a1 / N, x1, x2)
        V = splitting_isometry(a1, a2)
        labels = [float(i) for i in range(1, N + 1)]
        Y = HermitianOperator.diagonal(labels)

        def g(i, a1=a1):
            return x1 if i <= a1 + 0.5 else x2

        gY = apply_function(Y, g)
        via_me = measurement_equivalence(game, V, gY, PayoffFunction.identity(gY.spectral.eigenvalues))
        split = Game(via_me.state, Y, PayoffFunction.from_callable(g, labels))
        _require_equivalent(checks, payoff_equivalence(split, g), via_me, "PE で重みマップが保存されていません")

        tag = f"(a1, a2) = ({a1}, {a2})"
        checks.equal(f"{tag}: Vψ は等重ね合わせ", via_me.state.distance(StateVector.equal_superposition(N)), 0.0)
        checks.equal(f"{tag}: 重みマップ W_G = W_G'", weight_map(game).distance(weight_map(split)), 0.0)
        checks.equal(
            f"{tag}: V(Vψ, Y, g) = (1/N)Σg(i)", vf.value(split), math.fsum(g(i) for i in labels) / N
        )
        checks.equal(f"{tag}: V(ψ, X) = (a1 x1 + a2 x2)/N", vf.value(game), (a1 * x1 + a2 * x2) / N)
    return {"x1": x1, "x2": x2, "pairs": [list(p) for p in pairs]}, False


def _stage_s4(params, rng, vf, checks: _Checks):
    """2進有理数の重みで挟み、V(G) = a x1 + (1-a) x2 を任意精度で押さえる"""
    a = float(params.get("a", 1.0 / 3.0))
    depth = int(params.get("depth", settings.DEFAULT_DEPTH))
    x1 = float(params.get("x1", 0.0))
    x2 = float(params.get("x2", 1.0))
    if not 0 < a < 1:
        raise OutOfRange(f"a は (0, 1) の範囲である必要があります: {a}")
    if not x1 < x2:
        raise OutOfRange("x1 < x2 が必要です")
    if depth < 1:
        raise OutOfRange(f"depth は 1 以上である必要があります: {depth}")

    game = _two_level(a, x1, x2)
    X = game.observable
    identity = game.payoff
    standard = MeasurementProcedure.standard(X)
    v = vf.value(game)
    target = a * x1 + (1 - a) * x2

    decreasing = DyadicSequence.build(a, depth, Direction.DECREASING)
    increasing = DyadicSequence.build(a, depth, Direction.INCREASING)
    checks.require(decreasing.is_monotone() and increasing.is_monotone(), "2進列が単調ではありません")

    errors = {"rational": 0.0, "dominance": 0.0, "substitutivity": 0.0, "physicality": 0.0}
    lower: Dict[int, float] = {}
    upper: Dict[int, float] = {}

    def bracket(n: int, p: float, sub_state: StateVector, low_side: bool) -> float:
        """G_n = ⟨ψ_n, X⟩ の値を返し、残りの重みを部分ゲーム G_n' に回した合成で G を実現する"""
        outer = _two_level(p, x1, x2)
        v_n = vf.value(outer)
        errors["rational"] = max(errors["rational"], abs(v_n - (p * x1 + (1 - p) * x2)))
        sub_game = Game(sub_state, X, identity)
        v_sub = vf.value(sub_game)
        if low_side:
            continuation = {x1: SubMeasurement(standard, payoff=identity, state=sub_state), x2: x2}
            cash = {x1: v_sub, x2: x2}
            errors["dominance"] = max(errors["dominance"], x1 - v_sub)
        else:
            continuation = {x1: x1, x2: SubMeasurement(standard, payoff=identity, state=sub_state)}
            cash = {x1: x1, x2: v_sub}
            errors["dominance"] = max(errors["dominance"], v_sub - x2)
        composite = compose(standard, outer.state, continuation)
        if not instantiates(composite, game):
            raise StageConstructionError("S4", f"n={n} の合成測定が G を実現していません")
        v_composite = evaluate(vf, composite)
        v_cash = vf.value(Game(outer.state, X, PayoffFunction.from_mapping(cash)))
        errors["substitutivity"] = max(errors["substitutivity"], abs(v_composite - v_cash))
        errors["physicality"] = max(errors["physicality"], abs(v_composite - v))
        return v_n

    for n, a_n in decreasing.items():
        p = float(a_n)
        phi = StateVector([math.sqrt(a / p), math.sqrt(max(p - a, 0.0) / p)])
        lower[n] = bracket(n, p, phi, low_side=True)
    for n, b_n in increasing.items():
        p = float(b_n)
        phi = StateVector([math.sqrt(max(a - p, 0.0) / (1 - p)), math.sqrt((1 - a) / (1 - p))])
        upper[n] = bracket(n, p, phi, low_side=False)

    common = sorted(set(lower) & set(upper))
    checks.require(bool(common), "上下の2進列に共通の深さがありません")
    widths = [upper[n] - lower[n] for n in common]
    final_width = widths[-1]

    checks.equal("全ての n で V(G_n) = a_n x1 + (1 - a_n) x2", errors["rational"], 0.0)
    checks.at_most("優越性: G_n' の値は x1 以上（上側は x2 以下）", errors["dominance"], 0.0)
    checks.equal("代替性: V(合成) = V(G_n' を値で置換)", errors["substitutivity"], 0.0)
    checks.equal("物理性: V(合成) = V(G)", errors["physicality"], 0.0)
    checks.at_most("下界: max_n (V(G_n) - V(G)) ≤ 0", max(lower[n] - v for n in lower), 0.0)
    checks.at_most("上界: max_n (V(G) - V(G'_n)) ≤ 0", max(v - upper[n] for n in upper), 0.0)
    checks.at_most(
        "区間幅は単調非増加", max([b - w for w, b in zip(widths, widths[1:])], default=0.0), 0.0
    )
    checks.at_most(f"深さ {depth} の区間幅 ≤ 2^-{depth}·(x2 - x1)", final_width, 2.0 ** (-depth) * (x2 - x1))
    checks.at_most("結論: |V - (a x1 + (1 - a) x2)| ≤ 区間幅", abs(v - target), final_width)

    return {"a": a, "depth": depth, "x1": x1, "x2": x2, "value": v, "final_width": final_width}, False


def _stage_s5(params, rng, vf, checks: _Checks):
    """固有基底での位相は X と可換なユニタリで消せる"""
    trials = int(params.get("trials", 8))
    tol = 1e-12
    errors = {"positive": 0.0, "invariance": 0.0, "random_phase": 0.0, "formula": 0.0}
    for _ in range(trials):
        x1, x2 = sorted(rng.choice(np.arange(-5, 6), size=2, replace=False).astype(float))
        X = HermitianOperator.diagonal([x1, x2])
        game = _identity_game(random_state(2, rng), X)
        dec = X.spectral
        coeffs = [complex((basis.conj().T @ game.state.amps)[0]) for basis in dec.eigenbases]
        U = phase_unitary(X, [-np.angle(c) for c in coeffs])
        if conjugate(X, U).distance(X) > settings.TOL:
            raise StageConstructionError("S5", "位相ユニタリが X と可換ではありません")
        rotated = measurement_equivalence(game, U, X, game.payoff)
        new_coeffs = [complex((basis.conj().T @ rotated.state.amps)[0]) for basis in dec.eigenbases]
        errors["positive"] = max(errors["positive"], max(abs(c.imag) + max(-c.real, 0.0) for c in new_coeffs))
        v = vf.value(game)
        errors["invariance"] = max(errors["invariance"], abs(vf.value(rotated) - v))
        extra = phase_unitary(X, rng.uniform(0, 2 * np.pi, size=2))
        shuffled = measurement_equivalence(game, extra, X, game.payoff)
        errors["random_phase"] = max(errors["random_phase"], abs(vf.value(shuffled) - v))
        expected = abs(coeffs[0]) ** 2 * dec.eigenvalues[0] + abs(coeffs[1]) ** 2 * dec.eigenvalues[1]
        errors["formula"] = max(errors["formula"], abs(v - expected))

    checks.equal("位相を除いた状態の係数は正の実数", errors["positive"], 0.0)
    checks.equal("位相除去で値は不変", errors["invariance"], 0.0, tol=tol)
    checks.equal("ランダム位相で値は不変", errors["random_phase"], 0.0, tol=tol)
    checks.equal("V = |α1|² x1 + |α2|² x2", errors["formula"], 0.0)
    return {"trials": trials}, False


def _stage_s6(params, rng, vf, checks: _Checks):
    """n 項のゲームを2項測定の逐次合成で組み立てる"""
    n = int(params.get("n_terms", 5))
    if not 2 <= n <= 16:
        raise OutOfRange(f"n_terms は 2 から 16 の範囲である必要があります: {n}")
    xs = rng.choice(np.arange(-9, 10), size=n, replace=False).astype(float)
    psi = random_state(n, rng)
    X = HermitianOperator.diagonal(xs)
    game = _identity_game(psi, X)
    weights = np.abs(psi.amps) ** 2

    observables = []
    for k in range(n - 1):
        labels = [0.0 if i < k else (1.0 if i == k else 2.0) for i in range(n)]
        observables.append(HermitianOperator.diagonal(labels))

    def chain(k: int) -> Dict[float, Any]:
        continuation: Dict[float, Any] = {0.0: 0.0, 1.0: float(xs[k])}
        if k == n - 2:
            continuation[2.0] = float(xs[n - 1])
        else:
            continuation[2.0] = SubMeasurement(
                MeasurementProcedure.standard(observables[k + 1]), continuation=chain(k + 1)
            )
        return continuation

    composite = compose(MeasurementProcedure.standard(observables[0]), psi, chain(0))
    if not instantiates(composite, game):
        raise StageConstructionError("S6", "2項測定の合成が元のゲームを実現していません")
    expected = math.fsum(weights * xs)
    checks.equal("V(合成) = Σ|α_i|² x_i", evaluate(vf, composite), expected)
    checks.equal("V(ψ, X) = Σ|α_i|² x_i", vf.value(game), expected)

    # 末尾から: V_k = p_k x_k + (1 - p_k) V_{k+1}
    tail_value = float(xs[n - 1])
    worst = 0.0
    for k in range(n - 2, -1, -1):
        tail = psi.amps.copy()
        tail[:k] = 0.0
        tail_state = StateVector.normalized(tail)
        p_k = weights[k] / math.fsum(weights[k:])
        step = Game(tail_state, observables[k], PayoffFunction.from_mapping({0.0: 0.0, 1.0: xs[k], 2.0: tail_value}))
        value = vf.value(step)
        worst = max(worst, abs(value - (p_k * xs[k] + (1 - p_k) * tail_value)))
        tail_value = value
    checks.equal("各2項ゲームで V_k = p_k x_k + (1 - p_k) V_{k+1}", worst, 0.0)
    checks.equal("再帰の値 V_0 = Σ|α_i|² x_i", tail_value, expected)
    return {"n_terms": n, "payoffs": [float(x) for x in xs]}, False


def _stage_v2(params, rng, vf, checks: _Checks):
    """置換ペイオフの和は定数になることから、等重ね合わせの値は平均"""
    n = int(params.get("n", 4))
    depth = int(params.get("depth", settings.DEFAULT_DEPTH))
    if not 2 <= n <= 6:
        raise OutOfRange(f"n は 2 から 6 の範囲である必要があります: {n}")
    xs = sorted(rng.choice(np.arange(-9, 10), size=n, replace=False).astype(float))
    labels = [float(i) for i in range(1, n + 1)]
    X = HermitianOperator.diagonal(labels)
    psi = StateVector.equal_superposition(n)
    base = Game(psi, X, PayoffFunction(tuple(zip(labels, xs))))

    values = []
    distance = 0.0
    total = PayoffFunction.constant(labels, 0.0)
    for perm in itertools.permutations(range(n)):
        payoff = PayoffFunction(tuple((labels[i], xs[perm[i]]) for i in range(n)))
        game = Game(psi, X, payoff)
        distance = max(distance, weight_map(game).distance(weight_map(base)))
        values.append(vf.value(game))
        total = total + payoff

    count = math.factorial(n)
    sum_x = math.fsum(xs)
    checks.equal("全ての置換ゲームは同値（重みマップ一致）", distance, 0.0)
    checks.equal("全ての置換で値が等しい", max(values) - min(values), 0.0)
    checks.equal("加法性: Σ V(P_π) = V(Σ P_π)", math.fsum(values), vf.value(Game(psi, X, total)))
    checks.equal("n!·V = (n-1)!·Σx_i", count * values[0], math.factorial(n - 1) * sum_x)

    # 値の重複: 異なる値で上下から挟む
    duplicated = list(xs)
    duplicated[1] = duplicated[0]
    dup_game = Game(psi, X, PayoffFunction(tuple(zip(labels, duplicated))))
    v_dup = vf.value(dup_game)
    worst_mean, worst_order = 0.0, 0.0
    width = float("inf")
    for m in range(1, depth + 1):
        eps = 2.0 ** (-m) / n
        low = [c - (i + 1) * eps for i, c in enumerate(duplicated)]
        high = [c + (i + 1) * eps for i, c in enumerate(duplicated)]
        v_low = vf.value(Game(psi, X, PayoffFunction(tuple(zip(labels, low)))))
        v_high = vf.value(Game(psi, X, PayoffFunction(tuple(zip(labels, high)))))
        worst_mean = max(worst_mean, abs(v_low - math.fsum(low) / n), abs(v_high - math.fsum(high) / n))
        worst_order = max(worst_order, v_low - v_dup, v_dup - v_high)
        width = v_high - v_low
    checks.equal("相異なる値の置換ゲームで V = 平均", worst_mean, 0.0)
    checks.at_most("優越性: V(P-) ≤ V(P) ≤ V(P+)", worst_order, 0.0)
    checks.at_most(f"深さ {depth} の挟み幅", width, (n + 1) / n * 2.0 ** (-depth))
    checks.at_most("重複値のゲームの値は平均に収束", abs(v_dup - math.fsum(duplicated) / n), width)
    return {"n": n, "payoffs": [float(x) for x in xs], "depth": depth}, False


def _stage_v3(params, rng, vf, checks: _Checks):
    """有理数の重み m_i/N を持つゲームを N 個の等重ね合わせへ同値変換する"""
    ms = [int(m) for m in params.get("weights", (1, 2, 5))]
    if any(m < 1 for m in ms):
        raise OutOfRange(f"重みの分子は正の整数である必要があります: {ms}")
    N = sum(ms)
    xs = sorted(rng.choice(np.arange(-9, 10), size=len(ms), replace=False).astype(float))
    game = Game.diagonal([math.sqrt(m / N) for m in ms], xs)
    labels = [float(i) for i in range(1, N + 1)]
    blocks = [x for x, m in zip(xs, ms) for _ in range(m)]
    relabeled = Game(StateVector.equal_superposition(N), HermitianOperator.diagonal(labels), PayoffFunction(tuple(zip(labels, blocks))))

    route_a = general_equivalence_route(game)
    route_b = general_equivalence_route(relabeled)
    expected = math.fsum(m * x for m, x in zip(ms, xs)) / N

    checks.equal("重みマップ W_G = W_G'", weight_map(game).distance(weight_map(relabeled)), 0.0)
    checks.equal("正準形が一致", float(canonical_forms_agree(game, relabeled)), 1.0)
    checks.equal("GE 経路（元のゲーム）: PE 側と ME 側が一致", route_a.discrepancy(), 0.0)
    checks.equal("GE 経路（等重ね合わせ）: PE 側と ME 側が一致", route_b.discrepancy(), 0.0)
    checks.equal("V(G') = (1/N)Σ m_i x_i", vf.value(relabeled), expected)
    checks.equal("V(G) = V(G')", vf.value(game), vf.value(relabeled))
    checks.equal("V(G) = EU(G)", vf.value(game), expected_utility(game))
    return {"weights": ms, "payoffs": [float(x) for x in xs]}, False


def _stage_v4(params, rng, vf, checks: _Checks):
    """補助固有状態（全ての x_i より小さい / 大きい固有値）を使った有理数近似での挟み込み"""
    n = int(params.get("n_terms", 3))
    depth = int(params.get("depth", settings.DEFAULT_DEPTH))
    if not 2 <= n <= 8:
        raise OutOfRange(f"n_terms は 2 から 8 の範囲である必要があります: {n}")
    xs = sorted(rng.choice(np.arange(0, 1000), size=n, replace=False) / 1000.0)
    amps = np.abs(rng.normal(size=n)) + 0.1
    amps = amps / np.linalg.norm(amps)
    weights = amps ** 2
    ys_low = [xs[0] - 0.1 * (i + 1) for i in range(n)]
    ys_high = [xs[-1] + 0.1 * (i + 1) for i in range(n)]

    game = Game.diagonal(amps, xs)
    v = vf.value(game)
    target = math.fsum(weights * np.array(xs))
    E = embed_subspace(list(range(n)), 2 * n)
    X_low = HermitianOperator.diagonal(list(xs) + ys_low)
    X_high = HermitianOperator.diagonal(list(xs) + ys_high)
    for X_ext in (X_low, X_high):
        ext = measurement_equivalence(game, E, X_ext, PayoffFunction.identity(X_ext.spectral.eigenvalues))
        _require_equivalent(checks, ext, game, "補助空間への埋め込みで重みマップが保存されていません")

    worst_rational, worst_order = 0.0, 0.0
    widths = []
    for k in range(1, depth + 1):
        m = 2 ** k
        a = np.floor(weights * m) / m
        rest = np.clip(weights - a, 0.0, None)
        psi_k = StateVector.normalized(np.concatenate([np.sqrt(a), np.sqrt(rest)]))
        low = vf.value(_identity_game(psi_k, X_low))
        high = vf.value(_identity_game(psi_k, X_high))
        eu_low = math.fsum(a * np.array(xs)) + math.fsum(rest * np.array(ys_low))
        eu_high = math.fsum(a * np.array(xs)) + math.fsum(rest * np.array(ys_high))
        worst_rational = max(worst_rational, abs(low - eu_low), abs(high - eu_high))
        worst_order = max(worst_order, low - v, v - high)
        widths.append(high - low)

    checks.equal("有理数重みの近似ゲームで V = EU", worst_rational, 0.0)
    checks.at_most("優越性: V(ψ_k, X_low) ≤ V(ψ, X) ≤ V(ψ_k, X_high)", worst_order, 0.0)
    checks.at_most("区間幅は単調非増加", max([b - w for w, b in zip(widths, widths[1:])], default=0.0), 0.0)
    # 各 i で余り重み < 2^-depth、区間は最大でも spread 幅
    spread = max(ys_high) - min(ys_low)
    bound = n * 2.0 ** (-depth) * spread
    checks.at_most(f"深さ {depth} の区間幅 ≤ n·2^-depth·(y_max - y_min)", widths[-1], bound, tol=0.0)
    checks.at_most("結論: |V - Σ|α_i|² x_i| ≤ 区間幅", abs(v - target), widths[-1])
    return {"n_terms": n, "depth": depth, "payoffs": [float(x) for x in xs], "final_width": widths[-1]}, False


def _stage_rep(params, rng, vf, checks: _Checks):
    dim = int(params.get("dim", 4))
    count = int(params.get("payoffs", 100))
    psi = random_state(dim, rng)
    X = random_hermitian(dim, rng, rng.integers(-3, 4, size=dim).astype(float))
    spectrum = X.spectral.eigenvalues
    corpus = [
        PayoffFunction(tuple((x, float(rng.uniform(-5, 5))) for x in spectrum)) for _ in range(count)
    ]
    report = check_representation(vf, psi, X, corpus)
    table = extract_probabilities(vf, psi, X)
    projector_error = max(
        abs(table[x] - float(np.vdot(psi.amps, P @ psi.amps).real))
        for x, P in zip(spectrum, X.spectral.projectors)
    )
    checks.equal("表現定理: max|V(P) - Σ Pr(x)·P(x)|", report.max_violation, 0.0, tol=settings.REPRESENTATION_TOL)
    checks.equal("Σ Pr = 1", table.total, 1.0, tol=settings.REPRESENTATION_TOL)
    checks.equal("Pr(x) = ⟨ψ|P_X(x)|ψ⟩", projector_error, 0.0)
    checks.equal("前提条件（加法性・優越性）を満たす", float(report.vacuous), 0.0)
    return {"dim": dim, "payoffs": count, "eigenvalues": [float(x) for x in spectrum]}, False


def _stage_nc(params, rng, vf, checks: _Checks):
    count = int(params.get("games", 20))
    worst = 0.0
    for index in range(count):
        dim = int(rng.integers(1, 7))
        game = random_game(rng, dim, degenerate=(index % 2 == 1 and dim >= 2))
        report = check_non_contextuality(vf, game.state, game.observable, game.payoff)
        worst = max(worst, report.max_violation)
    checks.equal("非文脈性: max|V(ψ,X,P) - Σ V(ψ,P_X(x),1)·P(x)|", worst, 0.0)

    X = HermitianOperator.diagonal([1.0, 1.0, 2.0])
    psi = StateVector.equal_superposition(3)
    report = check_non_contextuality(vf, psi, X, PayoffFunction.identity(X.spectral.eigenvalues))
    checks.equal("縮退 X = diag(1,1,2): V = 4/3", vf.value(_identity_game(psi, X)), 4.0 / 3.0)
    checks.equal("縮退 X = diag(1,1,2): 射影子分解と一致", report.max_violation, 0.0)
    return {"games": count}, False


def _stage_lin(params, rng, vf, checks: _Checks):
    depth = int(params.get("depth", settings.DEFAULT_DEPTH))
    a_values = [float(a) for a in params.get("a_values", (1.0, 1.0 / 3.0, -2.0, 0.7))]
    dim = 3
    psi = random_state(dim, rng)
    X = random_hermitian(dim, rng, np.arange(1, dim + 1, dtype=float))
    payoff = PayoffFunction(tuple((x, float(rng.uniform(-5, 5))) for x in X.spectral.eigenvalues))
    base = vf.value(Game(psi, X, payoff))
    for a in a_values:
        report = check_linearity_lemma(vf, psi, X, payoff, a, depth)
        checks.equal(f"a={a:g}: 2進括弧からの最大逸脱", report.max_violation, 0.0)
        checks.equal(f"a={a:g}: V(aP) = a·V(P)", vf.value(Game(psi, X, payoff * a)), a * base, tol=1e-6)
    return {"depth": depth, "a_values": a_values}, False


def _stage_gleason(params, rng, vf, checks: _Checks):
    dim = int(params.get("gleason_dim", 3))
    psi = random_state(dim, rng)
    fit = gleason_fit(vf, psi, spanning_observables(dim, rng))
    rho = fit.density_matrix.entries
    pure = np.outer(psi.amps, psi.amps.conj())
    tol = settings.GLEASON_TOL
    checks.at_most("フィット残差", fit.residual, tol, tol=0.0)
    checks.at_most("‖ρ - |ψ⟩⟨ψ|‖_F", float(np.linalg.norm(rho - pure)), tol, tol=0.0)
    checks.equal("⟨ψ|ρ|ψ⟩ = 1", float(np.vdot(psi.amps, rho @ psi.amps).real), 1.0, tol=tol)

    # 基底状態では ρ = |e1⟩⟨e1|
    e1 = StateVector.basis(dim, 0)
    basis_fit = gleason_fit(vf, e1, spanning_observables(dim, rng))
    checks.at_most(
        "基底状態: ‖ρ - |e1⟩⟨e1|‖_F",
        float(np.linalg.norm(basis_fit.density_matrix.entries - np.outer(e1.amps, e1.amps))),
        tol,
        tol=0.0,
    )

    # 手順1: 非文脈性
    game = random_game(rng, dim, degenerate=True)
    report = check_non_contextuality(vf, game.state, game.observable, game.payoff)
    checks.equal("手順1: 非文脈性", report.max_violation, 0.0)

    # 手順3: ψ の張る1次元空間上のゲーム ⟨1, 1, 1⟩ を ME で ⟨ψ, |ψ⟩⟨ψ|, 1⟩ へ
    line = Game(StateVector([1.0]), HermitianOperator([[1.0]]), PayoffFunction.from_mapping({1.0: 1.0}))
    projector = HermitianOperator.projector([psi.amps])
    embedded = measurement_equivalence(
        line, Isometry(psi.amps.reshape(-1, 1)), projector, PayoffFunction.identity(projector.spectral.eigenvalues)
    )
    checks.equal("手順3: V(ψ, |ψ⟩⟨ψ|, 1) = 1", vf.value(embedded), 1.0)
    checks.equal("手順3: Pr(1) = 1", extract_probabilities(vf, psi, projector)[1.0], 1.0, tol=tol)
    return {"dim": dim, "residual": fit.residual}, False


_STAGES: Dict[str, Callable] = {
    "S1": _stage_s1,
    "S2": _stage_s2,
    "S3": _stage_s3,
    "S4": _stage_s4,
    "S5": _stage_s5,
    "S6": _stage_s6,
    "V2": _stage_v2,
    "V3": _stage_v3,
    "V4": _stage_v4,
    "REP": _stage_rep,
    "NC": _stage_nc,
    "GLEASON": _stage_gleason,
    "LIN": _stage_lin,
}


def verify_stage(
    stage_id: str,
    params: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
    vf: Optional[ValueFunction] = None,
) -> StageReport:
    """1つのステージを構成して検証する"""
    sid = stage_id.strip().upper()
    handler = _STAGES.get(sid)
    if handler is None:
        raise UnknownStage(f"未知のステージ: {stage_id}（有効: {', '.join(STAGE_IDS)}）")
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    rng = np.random.default_rng([seed, STAGE_IDS.index(sid)])
    checks = _Checks(sid)
    try:
        instance, control = handler(dict(params or {}), rng, vf or ValueFunction.born(), checks)
    except TransformError as e:
        raise StageConstructionError(sid, str(e)) from e

    report = StageReport(stage_id=sid, instance_params=instance, checks=checks.items, negative_control=control)
    if report.as_expected:
        logger.info("✅ %s: %s", sid, report.outcome.value)
    else:
        logger.warning("❌ %s: %s", sid, report.outcome.value)
    return report


def verify_stages(
    stage_ids: Sequence[str],
    params: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
    jobs: int = 1,
) -> List[StageReport]:
    """複数ステージを（必要ならスレッドで並列に）検証し、ステージID順に返す"""
    requested: List[str] = []
    for sid in stage_ids:
        expanded = STAGE_IDS if sid.strip().lower() == "all" else (sid.strip().upper(),)
        for item in expanded:
            if item not in requested:
                requested.append(item)
    for item in requested:
        if item not in _STAGES:
            raise UnknownStage(f"未知のステージ: {item}（有効: {', '.join(STAGE_IDS)}）")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(lambda s: verify_stage(s, params, seed), requested))
    else:
        reports = [verify_stage(s, params, seed) for s in requested]
    return sorted(reports, key=lambda r: STAGE_IDS.index(r.stage_id))


def device_pair_demo(multiplicity: int) -> StageReport:
    """
    スピン上向きを multiplicity 本に分岐させる装置 B と標準装置 A。
    Born の値は一致し、分岐数で数える価値関数は 0 と (m-1)/(m+1) に分かれる。
    """
    if multiplicity < 1:
        raise OutOfRange(f"multiplicity は 1 以上である必要があります: {multiplicity}")
    instance = device_pair_corpus(multiplicity)[0]
    game = instance.game
    b_a = run(instance.device, game.state, game.payoff)
    b_b = run(instance.alternative, game.state, game.payoff)
    born, counting = ValueFunction.born(), ValueFunction.branch_count()
    born_a, born_b = evaluate(born, b_a), evaluate(born, b_b)
    count_a, count_b = evaluate(counting, b_a), evaluate(counting, b_b)

    checks = _Checks("DEVICE-PAIR")
    checks.equal("装置 A は G を実現", float(instantiates(b_a, game)), 1.0)
    checks.equal("装置 B は G を実現", float(instantiates(b_b, game)), 1.0)
    checks.equal("Born: V(A) = 0", born_a, 0.0)
    checks.equal("Born: V(B) = 0", born_b, 0.0)
    checks.equal("分岐数: V(A) = 0", count_a, 0.0)
    checks.equal("分岐数: V(B) = (m - 1)/(m + 1)", count_b, (multiplicity - 1) / (multiplicity + 1))
    checks.equal("測定中立性: 分岐数 V(A) = V(B)", count_a, count_b, expected=(multiplicity == 1))

    return StageReport(
        stage_id="DEVICE-PAIR",
        instance_params={
            "multiplicity": multiplicity,
            "branches": [len(b_a), len(b_b)],
            "witness": {"axiom": "measurement-neutrality", "branch-count": [count_a, count_b], "born": [born_a, born_b]},
        },
        checks=checks.items,
        negative_control=multiplicity > 1,
    )
