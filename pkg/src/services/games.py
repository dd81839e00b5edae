"""
量子ゲーム - ペイオフ関数・ゲーム・重みマップ・正準形・複合ゲーム
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config.settings import settings
from src.services.errors import (
    DegenerateGame,
    DimMismatch,
    InvalidWeightMap,
    PayoffUndefined,
    ValidationError,
)
from src.services.linalg import HermitianOperator, StateVector

logger = logging.getLogger(__name__)


def _tol() -> float:
    return settings.TOL


@dataclass(frozen=True)
class PayoffFunction:
    """固有値 → 現金価値の有限写像。照合は許容誤差付き"""

    entries: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        pairs = sorted((float(x), float(c)) for x, c in self.entries)
        merged: List[Tuple[float, float]] = []
        for x, c in pairs:
            if not (math.isfinite(x) and math.isfinite(c)):
                raise ValidationError(f"ペイオフに有限でない値があります: {x} → {c}")
            if merged and abs(x - merged[-1][0]) <= _tol():
                if abs(c - merged[-1][1]) > _tol():
                    raise ValidationError(f"固有値 {x} に異なるペイオフが指定されています")
                continue
            merged.append((x, c))
        object.__setattr__(self, "entries", tuple(merged))

    @classmethod
    def from_mapping(cls, mapping: Mapping[float, float]) -> "PayoffFunction":
        return cls(tuple(mapping.items()))

    @classmethod
    def from_callable(cls, f: Callable[[float], float], spectrum: Iterable[float]) -> "PayoffFunction":
        return cls(tuple((x, f(x)) for x in spectrum))

    @classmethod
    def identity(cls, spectrum: Iterable[float]) -> "PayoffFunction":
        """恒等ペイオフ 1: x ↦ x"""
        return cls(tuple((x, x) for x in spectrum))

    @classmethod
    def constant(cls, spectrum: Iterable[float], value: float) -> "PayoffFunction":
        return cls(tuple((x, value) for x in spectrum))

    @classmethod
    def delta(cls, spectrum: Iterable[float], target: float) -> "PayoffFunction":
        """x = target で 1、それ以外で 0"""
        return cls(tuple((x, 1.0 if abs(x - target) <= _tol() else 0.0) for x in spectrum))

    @property
    def domain(self) -> Tuple[float, ...]:
        return tuple(x for x, _ in self.entries)

    @property
    def values(self) -> Tuple[float, ...]:
        return tuple(c for _, c in self.entries)

    def lookup(self, x: float) -> Optional[float]:
        for key, value in self.entries:
            if abs(key - x) <= _tol():
                return value
        return None

    def __call__(self, x: float) -> float:
        value = self.lookup(x)
        if value is None:
            raise PayoffUndefined(f"ペイオフが固有値 {x} で定義されていません")
        return value

    def missing(self, spectrum: Iterable[float]) -> List[float]:
        return [x for x in spectrum if self.lookup(x) is None]

    def covers(self, spectrum: Iterable[float]) -> bool:
        return not self.missing(spectrum)

    def restrict(self, spectrum: Iterable[float]) -> "PayoffFunction":
        return PayoffFunction(tuple((x, self(x)) for x in spectrum))

    def map(self, fn: Callable[[float], float]) -> "PayoffFunction":
        return PayoffFunction(tuple((x, fn(c)) for x, c in self.entries))

    def as_dict(self) -> Dict[float, float]:
        return dict(self.entries)

    # 点ごとの演算
    def __add__(self, other: Union["PayoffFunction", float]) -> "PayoffFunction":
        if isinstance(other, PayoffFunction):
            return PayoffFunction(tuple((x, c + other(x)) for x, c in self.entries))
        return self.map(lambda c: c + float(other))

    __radd__ = __add__

    def __neg__(self) -> "PayoffFunction":
        return self.map(lambda c: -c)

    def __sub__(self, other: Union["PayoffFunction", float]) -> "PayoffFunction":
        return self + (-other)

    def __mul__(self, scalar: float) -> "PayoffFunction":
        return self.map(lambda c: float(scalar) * c)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Game:
    """量子ゲーム ⟨ψ, X, P⟩"""

    state: StateVector
    observable: HermitianOperator
    payoff: PayoffFunction

    def __post_init__(self):
        if self.state.dim != self.observable.dim:
            raise DimMismatch(f"状態の次元 {self.state.dim} と演算子の次元 {self.observable.dim} が一致しません")
        missing = self.payoff.missing(self.spectrum)
        if missing:
            raise PayoffUndefined(f"ペイオフが固有値 {missing} で定義されていません")

    @property
    def dim(self) -> int:
        return self.state.dim

    @property
    def spectrum(self) -> Tuple[float, ...]:
        return self.observable.spectral.eigenvalues

    def with_payoff(self, payoff: PayoffFunction) -> "Game":
        return Game(self.state, self.observable, payoff)

    def with_state(self, state: StateVector) -> "Game":
        return Game(state, self.observable, self.payoff)

    @classmethod
    def diagonal(
        cls,
        amplitudes: Sequence[complex],
        eigenvalues: Sequence[float],
        payoff: Optional[Mapping[float, float]] = None,
    ) -> "Game":
        """対角観測量のゲーム（payoff 省略時は恒等ペイオフ）"""
        X = HermitianOperator.diagonal(eigenvalues)
        P = PayoffFunction.identity(eigenvalues) if payoff is None else PayoffFunction.from_mapping(payoff)
        return cls(StateVector(amplitudes), X, P)


@dataclass(frozen=True)
class WeightMap:
    """ペイオフ値 → 重み。キーは昇順、重みは正、合計は1"""

    entries: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        tol = _tol()
        previous = None
        for payoff, weight in self.entries:
            if weight <= 0 or not math.isfinite(weight):
                raise InvalidWeightMap(f"重みは正である必要があります: {payoff} → {weight}")
            if previous is not None and payoff - previous <= tol:
                raise InvalidWeightMap("ペイオフ値が昇順で互いに区別できる必要があります")
            previous = payoff
        total = math.fsum(w for _, w in self.entries)
        if self.entries and abs(total - 1.0) > tol:
            raise InvalidWeightMap(f"重みの合計が1ではありません: {total:.12g}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, float]]) -> "WeightMap":
        """
        (ペイオフ, 重み) 列を集約する。差が許容誤差以内のペイオフは
        最小の値を代表として合算し、ZERO_WEIGHT_TOL 以下の重みは除く。
        """
        tol = _tol()
        merged: List[List[float]] = []
        for payoff, weight in sorted((float(c), float(w)) for c, w in pairs):
            if merged and payoff - merged[-1][0] <= tol:
                merged[-1][1] += weight
            else:
                merged.append([payoff, weight])
        entries = tuple((c, w) for c, w in merged if w > settings.ZERO_WEIGHT_TOL)
        if not entries:
            return cls(())
        total = math.fsum(w for _, w in entries)
        if abs(total - 1.0) > tol:
            raise InvalidWeightMap(f"重みの合計が1ではありません: {total:.12g}")
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tuple[float, float]]:
        return iter(self.entries)

    @property
    def payoffs(self) -> Tuple[float, ...]:
        return tuple(c for c, _ in self.entries)

    @property
    def weights(self) -> Tuple[float, ...]:
        return tuple(w for _, w in self.entries)

    def expectation(self) -> float:
        return math.fsum(c * w for c, w in self.entries)

    def distance(self, other: "WeightMap") -> float:
        """キー集合が一致すれば重みの最大差、一致しなければ 1.0"""
        if len(self) != len(other):
            return 1.0
        tol = _tol()
        worst = 0.0
        for (c1, w1), (c2, w2) in zip(self.entries, other.entries):
            if abs(c1 - c2) > tol:
                return 1.0
            worst = max(worst, abs(w1 - w2))
        return worst

    def agrees_with(self, other: "WeightMap") -> bool:
        return self.distance(other) <= _tol()

    def as_records(self) -> List[Dict[str, float]]:
        return [{"payoff": c, "weight": w} for c, w in self.entries]


def eigen_weights(state: StateVector, observable: HermitianOperator) -> List[Tuple[float, float]]:
    """各固有値 x について (x, ‖P_X(x)ψ‖²)"""
    if state.dim != observable.dim:
        raise DimMismatch(f"状態の次元 {state.dim} と演算子の次元 {observable.dim} が一致しません")
    dec = observable.spectral
    result = []
    for x, basis in zip(dec.eigenvalues, dec.eigenbases):
        coeffs = basis.conj().T @ state.amps
        result.append((x, float(np.vdot(coeffs, coeffs).real)))
    return result


def weight_map(game: Game) -> WeightMap:
    """W_G(c) = Σ_{x: P(x)=c} ‖P_X(x)ψ‖²"""
    return WeightMap.from_pairs((game.payoff(x), w) for x, w in eigen_weights(game.state, game.observable))


def equivalent(g1: Game, g2: Game) -> bool:
    """重みマップが許容誤差内で一致するか"""
    return weight_map(g1).agrees_with(weight_map(g2))


def game_from_weight_map(wm: WeightMap) -> Game:
    """K = diag(1..n)、振幅 √w_i、ペイオフ i ↦ c_i の正準ゲーム"""
    if len(wm) == 0:
        raise DegenerateGame("重みが全てゼロのゲームは正準化できません")
    n = len(wm)
    weights = np.array(wm.weights, dtype=float)
    amps = np.sqrt(weights / math.fsum(weights))
    labels = [float(i) for i in range(1, n + 1)]
    return Game(
        StateVector(amps),
        HermitianOperator.diagonal(labels),
        PayoffFunction(tuple(zip(labels, wm.payoffs))),
    )


def canonicalize(game: Game) -> Game:
    return game_from_weight_map(weight_map(game))


def canonical_forms_agree(g1: Game, g2: Game) -> bool:
    """正準形が同じ次元・ペイオフを持ち、振幅が TOL 以内で一致するか"""
    c1, c2 = canonicalize(g1), canonicalize(g2)
    if c1.dim != c2.dim:
        return False
    tol = _tol()
    if any(abs(a - b) > tol for a, b in zip(c1.payoff.values, c2.payoff.values)):
        return False
    return c1.state.distance(c2.state) <= tol


# === 複合ゲーム ===
Outcome = Union[float, Game, "CompoundGame"]


@dataclass(frozen=True, eq=False)
class CompoundGame:
    """ペイオフの代わりに後続ゲームを割り当て得るゲーム"""

    state: StateVector
    observable: HermitianOperator
    payoff: Tuple[Tuple[float, Outcome], ...]

    def __post_init__(self):
        if self.state.dim != self.observable.dim:
            raise DimMismatch(f"状態の次元 {self.state.dim} と演算子の次元 {self.observable.dim} が一致しません")
        entries = []
        for x, outcome in self.payoff:
            if not isinstance(outcome, (Game, CompoundGame)):
                outcome = float(outcome)
            entries.append((float(x), outcome))
        object.__setattr__(self, "payoff", tuple(sorted(entries, key=lambda e: e[0])))
        missing = [x for x in self.observable.spectral.eigenvalues if self._find(x) is None]
        if missing:
            raise PayoffUndefined(f"複合ゲームの結果が固有値 {missing} で定義されていません")

    @classmethod
    def from_mapping(
        cls, state: StateVector, observable: HermitianOperator, mapping: Mapping[float, Outcome]
    ) -> "CompoundGame":
        return cls(state, observable, tuple(mapping.items()))

    def _find(self, x: float):
        for key, outcome in self.payoff:
            if abs(key - x) <= _tol():
                return (outcome,)
        return None

    def outcome(self, x: float) -> Outcome:
        found = self._find(x)
        if found is None:
            raise PayoffUndefined(f"複合ゲームの結果が固有値 {x} で定義されていません")
        return found[0]

    @property
    def rank(self) -> int:
        """全て現金なら 0、それ以外は 1 + 後続の最大ランク"""
        sub_ranks = [
            outcome.rank if isinstance(outcome, CompoundGame) else 0
            for _, outcome in self.payoff
            if not isinstance(outcome, float)
        ]
        return 0 if not sub_ranks else 1 + max(sub_ranks)

    def as_game(self) -> Game:
        if self.rank != 0:
            raise ValidationError("ランク 0 の複合ゲームのみ単純ゲームに変換できます")
        return Game(self.state, self.observable, PayoffFunction(self.payoff))


def _leaf_pairs(node: Union[Game, CompoundGame], scale: float) -> Iterator[Tuple[float, float]]:
    if isinstance(node, Game):
        for c, w in weight_map(node):
            yield c, scale * w
        return
    for x, w in eigen_weights(node.state, node.observable):
        if w <= settings.ZERO_WEIGHT_TOL:
            continue
        outcome = node.outcome(x)
        if isinstance(outcome, float):
            yield outcome, scale * w
        else:
            yield from _leaf_pairs(outcome, scale * w)


def compound_weight_map(compound: CompoundGame) -> WeightMap:
    """経路上の重みの積で葉のペイオフを集約する"""
    return WeightMap.from_pairs(_leaf_pairs(compound, 1.0))


def flatten(compound: CompoundGame) -> Game:
    """複合ゲームを等価な単純ゲームにする（ランク 0 ならそのまま）"""
    if compound.rank == 0:
        return compound.as_game()
    return game_from_weight_map(compound_weight_map(compound))
