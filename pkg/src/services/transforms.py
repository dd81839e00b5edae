"""
同値変換 - ペイオフ同値（PE）・測定同値（ME）と証明で使う等長写像の構成
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config.settings import settings
from src.services.errors import (
    DimMismatch,
    DomainError,
    DuplicateIndex,
    IndexOutOfRange,
    IntertwinerViolation,
    NonInjective,
    OutOfRange,
    PayoffMismatch,
    SpectrumNotInvariant,
)
from src.services.games import Game, PayoffFunction, game_from_weight_map, weight_map
from src.services.linalg import (
    HermitianOperator,
    Isometry,
    StateVector,
    apply_function,
    intertwining_error,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectrumFunction:
    """スペクトル上で定義された実関数 f: σ(X) → R"""

    entries: Tuple[Tuple[float, float], ...]

    @classmethod
    def from_callable(cls, f: Callable[[float], float], spectrum: Sequence[float]) -> "SpectrumFunction":
        pairs = []
        for x in spectrum:
            try:
                y = float(f(x))
            except (KeyError, ValueError, TypeError, ZeroDivisionError, ArithmeticError) as e:
                raise DomainError(f"関数が固有値 {x} で定義されていません: {e}") from e
            if not np.isfinite(y):
                raise DomainError(f"関数値 f({x}) が有限ではありません")
            pairs.append((float(x), y))
        return cls(tuple(pairs))

    @classmethod
    def from_mapping(cls, mapping: Mapping[float, float]) -> "SpectrumFunction":
        return cls(tuple((float(x), float(y)) for x, y in mapping.items()))

    def __call__(self, x: float) -> float:
        for key, value in self.entries:
            if abs(key - x) <= settings.TOL:
                return value
        raise DomainError(f"関数が固有値 {x} で定義されていません")

    @property
    def domain(self) -> Tuple[float, ...]:
        return tuple(x for x, _ in self.entries)

    def fiber(self, y: float) -> List[float]:
        """f(x) = y となる x の一覧"""
        return [x for x, value in self.entries if abs(value - y) <= settings.TOL]

    def is_injective(self) -> bool:
        values = sorted(y for _, y in self.entries)
        return all(b - a > settings.TOL for a, b in zip(values, values[1:]))


FunctionLike = Union[SpectrumFunction, Callable[[float], float], Mapping[float, float]]


def _as_spectrum_function(f: FunctionLike, spectrum: Sequence[float]) -> SpectrumFunction:
    if isinstance(f, SpectrumFunction):
        return f
    if isinstance(f, Mapping):
        return SpectrumFunction.from_mapping(f)
    return SpectrumFunction.from_callable(f, spectrum)


def payoff_equivalence(game: Game, f: FunctionLike) -> Game:
    """
    ⟨ψ, X, P⟩ → ⟨ψ, f(X), P∘f⁻¹⟩

    f が単射でなくても、各ファイバー上で P が一定なら P∘f⁻¹ は well-defined。
    """
    fn = _as_spectrum_function(f, game.spectrum)
    new_observable = apply_function(game.observable, fn)
    entries = []
    for y in new_observable.spectral.eigenvalues:
        preimage = [x for x in game.spectrum if abs(fn(x) - y) <= settings.TOL]
        if not preimage:
            raise DomainError(f"f(X) の固有値 {y} の逆像が空です")
        payoffs = [game.payoff(x) for x in preimage]
        if max(payoffs) - min(payoffs) > settings.TOL:
            raise NonInjective(
                f"f は単射ではなく、ファイバー {preimage} 上でペイオフが一致しません: {payoffs}"
            )
        entries.append((y, payoffs[0]))
    logger.debug("PE 変換: %d 個の固有値を写像", len(entries))
    return Game(game.state, new_observable, PayoffFunction(tuple(entries)))


def measurement_equivalence(
    game: Game, U: Isometry, X_prime: HermitianOperator, P_prime: PayoffFunction
) -> Game:
    """UX = X'U かつ P' = P（σ(X) 上）のとき ⟨ψ, X, P⟩ → ⟨Uψ, X', P'⟩"""
    if U.dim_in != game.dim or U.dim_out != X_prime.dim:
        raise DimMismatch(
            f"ME の次元不一致: U は {U.dim_in}→{U.dim_out}, ゲームは {game.dim}, X' は {X_prime.dim}"
        )
    error = intertwining_error(U, game.observable, X_prime)
    if error > settings.TOL:
        raise IntertwinerViolation(error, settings.TOL)

    worst = 0.0
    for x in game.spectrum:
        value = P_prime.lookup(x)
        if value is None:
            raise PayoffMismatch(float(np.finfo(float).max), settings.TOL)
        worst = max(worst, abs(value - game.payoff(x)))
    if worst > settings.TOL:
        raise PayoffMismatch(worst, settings.TOL)
    return Game(U.apply(game.state), X_prime, P_prime)


def _state_adapted_basis(basis: np.ndarray, psi: Optional[StateVector]) -> np.ndarray:
    """先頭の列が P(x)ψ/‖P(x)ψ‖ となるよう固有空間の正規直交基底を取り直す"""
    if psi is None:
        return basis
    coeffs = basis.conj().T @ psi.amps
    norm = float(np.linalg.norm(coeffs))
    if norm <= settings.ZERO_WEIGHT_TOL:
        return basis
    unit = coeffs / norm
    q, _ = np.linalg.qr(np.column_stack([unit, np.eye(basis.shape[1])]))
    q[:, 0] *= np.vdot(q[:, 0], unit)
    return basis @ q


def reflection_unitary(
    X: HermitianOperator, x1: float, x2: float, state: Optional[StateVector] = None
) -> Isometry:
    """
    f(x) = -x + x1 + x2 に対し U_f λ_x = λ_{f(x)} となるユニタリ。
    σ(X) が f で不変で、対応する固有空間の次元が等しいことが必要。
    state を渡すと P(x)ψ を P(f(x))ψ の方向へ送るので、
    ‖P(x)ψ‖ = ‖P(f(x))ψ‖ なら U_f ψ = ψ が固有ベクトルの位相に依らず成り立つ。
    """
    dec = X.spectral
    if state is not None and state.dim != X.dim:
        raise DimMismatch(f"状態の次元 {state.dim} と演算子の次元 {X.dim} が一致しません")
    adapted = [_state_adapted_basis(basis, state) for basis in dec.eigenbases]
    mat = np.zeros((X.dim, X.dim), dtype=complex)
    for i, x in enumerate(dec.eigenvalues):
        j = dec.index_of(-x + x1 + x2)
        if j is None:
            raise SpectrumNotInvariant(f"固有値 {x} の鏡映 {-x + x1 + x2} がスペクトルにありません")
        if adapted[j].shape[1] != adapted[i].shape[1]:
            raise SpectrumNotInvariant(f"固有値 {x} と鏡映先の固有空間の次元が異なります")
        mat += adapted[j] @ adapted[i].conj().T
    return Isometry(mat)


def splitting_isometry(a1: int, a2: int) -> Isometry:
    """V: C² → C^N（N = a1 + a2）、λ1 を先頭 a1 個、λ2 を残り a2 個の等重ね合わせへ送る"""
    if a1 < 1 or a2 < 1:
        raise OutOfRange(f"分割数は 1 以上である必要があります: a1={a1}, a2={a2}")
    n = a1 + a2
    if n > settings.MAX_DIM:
        raise OutOfRange(f"分割後の次元 {n} が上限 MAX_DIM={settings.MAX_DIM} を超えています")
    mat = np.zeros((n, 2), dtype=complex)
    mat[:a1, 0] = 1.0 / np.sqrt(a1)
    mat[a1:, 1] = 1.0 / np.sqrt(a2)
    return Isometry(mat)


def embed_subspace(indices: Sequence[int], dim: int) -> Isometry:
    """C^k → C^dim、j 番目の基底を e_{indices[j]} へ送る"""
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"インデックスが重複しています: {list(indices)}")
    for i in indices:
        if not 0 <= i < dim:
            raise IndexOutOfRange(f"インデックス {i} が範囲 [0, {dim}) の外です")
    mat = np.zeros((dim, len(indices)), dtype=complex)
    for j, i in enumerate(indices):
        mat[i, j] = 1.0
    return Isometry(mat)


def phase_unitary(X: HermitianOperator, phases: Union[Mapping[float, float], Sequence[float]]) -> Isometry:
    """U = Σ e^{iθ_x} P_X(x)。X と可換なので UXU† = X"""
    dec = X.spectral
    if isinstance(phases, Mapping):
        thetas = []
        for x in dec.eigenvalues:
            matches = [t for key, t in phases.items() if abs(key - x) <= settings.TOL]
            thetas.append(matches[0] if matches else 0.0)
    else:
        thetas = list(phases)
        if len(thetas) != len(dec.eigenvalues):
            raise DimMismatch("位相の個数が固有値の個数と一致しません")
    mat = np.zeros((X.dim, X.dim), dtype=complex)
    for theta, proj in zip(thetas, dec.projectors):
        mat += np.exp(1j * float(theta)) * proj
    return Isometry(mat)


@dataclass(frozen=True, eq=False)
class EquivalenceRoute:
    """任意のゲームから正準形へ PE と ME で到達する経路"""

    relabel: SpectrumFunction
    relabeled: Game
    embedding: Isometry
    canonical: Game
    via_measurement: Game

    def discrepancy(self) -> float:
        """ME 側から得たゲームと PE 側のゲームの状態・演算子の最大差"""
        return max(
            self.via_measurement.state.distance(self.relabeled.state),
            self.via_measurement.observable.distance(self.relabeled.observable),
        )


def general_equivalence_route(game: Game) -> EquivalenceRoute:
    """
    PE: f(x) = i（P(x) が i 番目のペイオフ値）で ⟨ψ, f(X), P∘f⁻¹⟩ へ写し、
    ME: U κ_i = μ_i で正準形 ⟨ψ0, K, P0⟩ をそこへ写す。
    重みゼロのペイオフ値には n+1, n+2, ... のラベルを割り当てる。
    """
    wm = weight_map(game)
    canonical = game_from_weight_map(wm)
    classes = list(wm.payoffs)
    n = len(classes)
    extra: List[float] = []
    labels: Dict[float, float] = {}
    branches = [np.zeros(game.dim, dtype=complex) for _ in classes]

    dec = game.observable.spectral
    for x, basis in zip(dec.eigenvalues, dec.eigenbases):
        c = game.payoff(x)
        index = next((i for i, ci in enumerate(classes) if abs(c - ci) <= settings.TOL), None)
        if index is not None:
            labels[x] = float(index + 1)
            branches[index] = branches[index] + basis @ (basis.conj().T @ game.state.amps)
            continue
        slot = next((k for k, ck in enumerate(extra) if abs(c - ck) <= settings.TOL), None)
        if slot is None:
            extra.append(c)
            slot = len(extra) - 1
        labels[x] = float(n + 1 + slot)

    relabel = SpectrumFunction.from_mapping(labels)
    relabeled = payoff_equivalence(game, relabel)
    columns = [b / np.linalg.norm(b) for b in branches]
    embedding = Isometry.from_columns(columns)
    via_measurement = measurement_equivalence(
        canonical, embedding, relabeled.observable, relabeled.payoff
    )
    return EquivalenceRoute(relabel, relabeled, embedding, canonical, via_measurement)
