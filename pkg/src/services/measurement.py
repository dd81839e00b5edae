"""
測定手続きとブランチ - 測定装置のモデル化、実行、逐次合成
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config.settings import settings
from src.services.errors import (
    DimMismatch,
    DuplicateReadout,
    EmptyBranchSet,
    InvalidProcedure,
    InvalidWeightMap,
    PayoffUndefined,
    ValidationError,
)
from src.services.games import CompoundGame, Game, PayoffFunction, WeightMap, weight_map
from src.services.linalg import HermitianOperator, StateVector

logger = logging.getLogger(__name__)

RESOLUTIONS = ("component", "eigenvalue")


def _lookup(entries: Sequence[Tuple[float, object]], x: float):
    for key, value in entries:
        if abs(key - x) <= settings.TOL:
            return value
    return None


@dataclass(frozen=True, eq=False)
class MeasurementProcedure:
    """
    観測量 X の測定装置。固有値 x ごとに多重度 m(x) と
    Σ|μ_α|² = 1 を満たす係数 μ_α(x) を持つ。

    resolution="component" は固有空間の基底成分ごとに、
    "eigenvalue" は固有値ごとに1本のブランチを作る。
    """

    observable: HermitianOperator
    coefficients: Tuple[Tuple[float, Tuple[complex, ...]], ...]
    resolution: str = "component"

    def __post_init__(self):
        if self.resolution not in RESOLUTIONS:
            raise InvalidProcedure(f"未知の分解モード: {self.resolution}")
        normalized = []
        for x in self.observable.spectral.eigenvalues:
            mu = _lookup(self.coefficients, x)
            if mu is None:
                raise InvalidProcedure(f"固有値 {x} の係数が指定されていません")
            mu = tuple(complex(c) for c in mu)
            if len(mu) < 1:
                raise InvalidProcedure(f"固有値 {x} の多重度は 1 以上である必要があります")
            norm_sq = math.fsum(abs(c) ** 2 for c in mu)
            if abs(norm_sq - 1.0) > settings.TOL:
                raise InvalidProcedure(f"固有値 {x} の係数が規格化されていません: Σ|μ|² = {norm_sq:.12g}")
            normalized.append((x, mu))
        object.__setattr__(self, "coefficients", tuple(normalized))

    @classmethod
    def standard(cls, observable: HermitianOperator, resolution: str = "component") -> "MeasurementProcedure":
        """全ての多重度が 1 の標準装置"""
        return cls(observable, tuple((x, (1.0,)) for x in observable.spectral.eigenvalues), resolution)

    @classmethod
    def uniform(
        cls,
        observable: HermitianOperator,
        multiplicities: Mapping[float, int],
        resolution: str = "component",
    ) -> "MeasurementProcedure":
        """μ_α(x) = 1/√m(x)。指定のない固有値は多重度 1"""
        coefficients = []
        for x in observable.spectral.eigenvalues:
            m = _lookup(tuple(multiplicities.items()), x)
            m = 1 if m is None else int(m)
            if m < 1:
                raise InvalidProcedure(f"固有値 {x} の多重度は 1 以上である必要があります: {m}")
            coefficients.append((x, tuple([1.0 / math.sqrt(m)] * m)))
        return cls(observable, tuple(coefficients), resolution)

    @classmethod
    def with_coefficients(
        cls,
        observable: HermitianOperator,
        coefficients: Mapping[float, Sequence[complex]],
        resolution: str = "component",
    ) -> "MeasurementProcedure":
        return cls(observable, tuple((x, tuple(mu)) for x, mu in coefficients.items()), resolution)

    @classmethod
    def random(
        cls, observable: HermitianOperator, rng: np.random.Generator, max_multiplicity: int = 3
    ) -> "MeasurementProcedure":
        """多重度と複素係数をランダムに選んだ装置"""
        coefficients = []
        for x in observable.spectral.eigenvalues:
            m = int(rng.integers(1, max_multiplicity + 1))
            z = rng.normal(size=m) + 1j * rng.normal(size=m)
            coefficients.append((x, tuple(z / np.linalg.norm(z))))
        return cls(observable, tuple(coefficients))

    def mu(self, x: float) -> Tuple[complex, ...]:
        value = _lookup(self.coefficients, x)
        if value is None:
            raise InvalidProcedure(f"固有値 {x} は装置の観測量のスペクトルにありません")
        return value

    def multiplicity(self, x: float) -> int:
        return len(self.mu(x))


@dataclass(frozen=True)
class Readout:
    """1回の読み出し: 固有値、固有空間内の成分、装置内ブランチ α"""

    eigenvalue: float
    component: int
    alpha: int

    def as_list(self) -> List[float]:
        return [self.eigenvalue, self.component, self.alpha]


Label = Tuple[Readout, ...]


@dataclass(frozen=True)
class Branch:
    """測定後の1本のブランチ"""

    readout_label: Label
    payoff: float
    amplitude: complex

    @property
    def weight(self) -> float:
        return abs(self.amplitude) ** 2

    @property
    def final_eigenvalue(self) -> float:
        return self.readout_label[-1].eigenvalue


@dataclass(frozen=True)
class BranchSet:
    """ブランチの有限集合。ラベルは互いに異なり、重みの合計は1"""

    branches: Tuple[Branch, ...]

    def __post_init__(self):
        if not self.branches:
            raise EmptyBranchSet("ブランチ集合が空です")
        labels = [b.readout_label for b in self.branches]
        if len(set(labels)) != len(labels):
            raise DuplicateReadout("読み出しラベルが重複しています")
        total = self.total_weight
        if abs(total - 1.0) > settings.TOL:
            raise InvalidWeightMap(f"ブランチ重みの合計が1ではありません: {total:.12g}")

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "BranchSet":
        """{"label": [[x, a, α], ...], "payoff": c, "weight": w} の列から復元する"""
        branches = []
        for record in records:
            label = tuple(Readout(float(r[0]), int(r[1]), int(r[2])) for r in record["label"])
            branches.append(Branch(label, float(record["payoff"]), complex(math.sqrt(float(record["weight"])))))
        return cls(tuple(branches))

    def __len__(self) -> int:
        return len(self.branches)

    def __iter__(self) -> Iterator[Branch]:
        return iter(self.branches)

    @property
    def total_weight(self) -> float:
        return math.fsum(b.weight for b in self.branches)

    @property
    def weights(self) -> np.ndarray:
        return np.array([b.weight for b in self.branches], dtype=float)

    @property
    def payoffs(self) -> np.ndarray:
        return np.array([b.payoff for b in self.branches], dtype=float)

    def weight_map(self) -> WeightMap:
        return WeightMap.from_pairs((b.payoff, b.weight) for b in self.branches)

    def as_records(self) -> List[Dict]:
        return [
            {"label": [r.as_list() for r in b.readout_label], "payoff": b.payoff, "weight": b.weight}
            for b in self.branches
        ]


@dataclass(frozen=True, eq=False)
class SubMeasurement:
    """
    あるブランチで続けて行う測定。payoff で終わるか、continuation で更に続く。
    state を省略すると P_X(x)ψ を規格化した相対状態を用いる。
    """

    procedure: MeasurementProcedure
    payoff: Optional[PayoffFunction] = None
    continuation: Optional[Mapping[float, "Continuation"]] = None
    state: Optional[StateVector] = None

    def __post_init__(self):
        if (self.payoff is None) == (self.continuation is None):
            raise ValidationError("payoff と continuation のどちらか一方を指定してください")
        if self.state is not None and self.state.dim != self.procedure.observable.dim:
            raise DimMismatch("後続測定の状態と観測量の次元が一致しません")


Continuation = Union[float, SubMeasurement]


def _check_inputs(procedure: MeasurementProcedure, psi: StateVector) -> None:
    if psi.dim != procedure.observable.dim:
        raise DimMismatch(f"状態の次元 {psi.dim} と装置の観測量の次元 {procedure.observable.dim} が一致しません")


def _outcome_for(continuation, x: float):
    if isinstance(continuation, PayoffFunction):
        return continuation(x)
    value = _lookup(tuple(continuation.items()), x)
    if value is None:
        raise PayoffUndefined(f"固有値 {x} の後続が定義されていません")
    if isinstance(value, SubMeasurement):
        return value
    return float(value)


def _relative_state(basis: np.ndarray, coeffs: np.ndarray, norm: float) -> StateVector:
    if norm ** 2 <= settings.ZERO_WEIGHT_TOL:
        return StateVector.normalized(basis[:, 0])
    return StateVector.normalized(basis @ coeffs)


def _branches(
    procedure: MeasurementProcedure,
    psi: StateVector,
    continuation,
    prefix: Label,
    scale: complex,
) -> Iterator[Branch]:
    _check_inputs(procedure, psi)
    zero = settings.ZERO_WEIGHT_TOL
    dec = procedure.observable.spectral
    for x, basis in zip(dec.eigenvalues, dec.eigenbases):
        outcome = _outcome_for(continuation, x)
        coeffs = basis.conj().T @ psi.amps
        mu = procedure.mu(x)

        if isinstance(outcome, float):
            if procedure.resolution == "component":
                components = list(enumerate(coeffs))
            else:
                components = [(0, np.linalg.norm(coeffs))]
            for a, c in components:
                for alpha, m in enumerate(mu):
                    amp = scale * c * m
                    if abs(amp) ** 2 <= zero:
                        continue
                    yield Branch(prefix + (Readout(x, a, alpha),), outcome, complex(amp))
            continue

        # 後続測定: 固有値ごとに相対状態へ縮約して続ける
        norm = float(np.linalg.norm(coeffs))
        if abs(scale * norm) ** 2 <= zero:
            continue
        relative = outcome.state or _relative_state(basis, coeffs, norm)
        inner = outcome.payoff if outcome.payoff is not None else outcome.continuation
        for alpha, m in enumerate(mu):
            amp = scale * norm * m
            if abs(amp) ** 2 <= zero:
                continue
            yield from _branches(outcome.procedure, relative, inner, prefix + (Readout(x, 0, alpha),), amp)


def run(procedure: MeasurementProcedure, psi: StateVector, payoff: PayoffFunction) -> BranchSet:
    """装置を状態に適用し、ゼロ重みを除いたブランチ集合を得る"""
    _check_inputs(procedure, psi)
    missing = payoff.missing(procedure.observable.spectral.eigenvalues)
    if missing:
        raise PayoffUndefined(f"ペイオフが固有値 {missing} で定義されていません")
    return BranchSet(tuple(_branches(procedure, psi, payoff, (), 1.0)))


def run_game(game: Game, procedure: Optional[MeasurementProcedure] = None) -> BranchSet:
    """ゲームを装置（省略時は標準装置）で実行する"""
    procedure = procedure or MeasurementProcedure.standard(game.observable)
    if procedure.observable is not game.observable and procedure.observable.distance(game.observable) > settings.TOL:
        raise DimMismatch("装置の観測量がゲームの観測量と一致しません")
    return run(procedure, game.state, game.payoff)


def instantiates(branches: BranchSet, game: Game) -> bool:
    """ブランチ集合の集約重みがゲームの重みマップと一致するか"""
    return branches.weight_map().agrees_with(weight_map(game))


def compose(
    outer: MeasurementProcedure, psi: StateVector, continuation: Mapping[float, Continuation]
) -> BranchSet:
    """外側の測定の各結果に現金または後続測定を割り当てて逐次実行する"""
    return BranchSet(tuple(_branches(outer, psi, continuation, (), 1.0)))


def compound_game(
    outer: MeasurementProcedure, psi: StateVector, continuation: Mapping[float, Continuation]
) -> CompoundGame:
    """compose と同じ構造を複合ゲームとして表す"""
    _check_inputs(outer, psi)
    dec = outer.observable.spectral
    mapping = {}
    for x, basis in zip(dec.eigenvalues, dec.eigenbases):
        outcome = _outcome_for(continuation, x)
        if isinstance(outcome, float):
            mapping[x] = outcome
            continue
        coeffs = basis.conj().T @ psi.amps
        relative = outcome.state or _relative_state(basis, coeffs, float(np.linalg.norm(coeffs)))
        if outcome.payoff is not None:
            mapping[x] = Game(relative, outcome.procedure.observable, outcome.payoff)
        else:
            mapping[x] = compound_game(outcome.procedure, relative, outcome.continuation)
    return CompoundGame.from_mapping(psi, outer.observable, mapping)
