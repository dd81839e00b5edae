"""
有限次元複素線形代数 - 状態ベクトル・エルミート演算子・スペクトル分解・等長写像

全ての値は生成後に不変（numpy 配列は書き込み禁止フラグ付き）。
許容誤差は呼び出し時に settings から読み込む。
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as la
from scipy.stats import unitary_group

from src.config.settings import settings
from src.services.errors import (
    DimMismatch,
    DomainError,
    NotHermitian,
    NotIsometry,
    NotNormalized,
    ValidationError,
)

logger = logging.getLogger(__name__)


def _frozen(values, name: str) -> np.ndarray:
    """複素配列へ変換し、有限性を検証して書き込み禁止にする"""
    arr = np.array(values, dtype=complex)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} に NaN または Inf が含まれています")
    arr.setflags(write=False)
    return arr


def _check_dim(dim: int, name: str) -> None:
    if dim < 1:
        raise DimMismatch(f"{name} の次元は 1 以上である必要があります")
    if dim > settings.MAX_DIM:
        raise DimMismatch(f"{name} の次元 {dim} が上限 MAX_DIM={settings.MAX_DIM} を超えています")


@dataclass(frozen=True, eq=False)
class StateVector:
    """規格化された状態ベクトル |ψ⟩"""

    amps: np.ndarray

    def __post_init__(self):
        amps = _frozen(self.amps, "状態ベクトル")
        if amps.ndim != 1:
            raise DimMismatch("状態ベクトルは1次元配列である必要があります")
        _check_dim(amps.size, "状態ベクトル")
        norm_sq = float(np.vdot(amps, amps).real)
        if abs(norm_sq - 1.0) > settings.TOL:
            raise NotNormalized(norm_sq, settings.TOL)
        object.__setattr__(self, "amps", amps)

    @property
    def dim(self) -> int:
        return int(self.amps.size)

    @classmethod
    def normalized(cls, values) -> "StateVector":
        """任意の非ゼロベクトルを規格化して状態にする"""
        arr = np.array(values, dtype=complex)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not np.isfinite(norm):
            raise NotNormalized(0.0, settings.TOL)
        return cls(arr / norm)

    @classmethod
    def basis(cls, dim: int, index: int) -> "StateVector":
        amps = np.zeros(dim, dtype=complex)
        amps[index] = 1.0
        return cls(amps)

    @classmethod
    def equal_superposition(cls, dim: int) -> "StateVector":
        return cls(np.full(dim, 1.0 / np.sqrt(dim), dtype=complex))

    def inner(self, other: "StateVector") -> complex:
        """⟨self|other⟩"""
        if other.dim != self.dim:
            raise DimMismatch(f"内積の次元不一致: {self.dim} != {other.dim}")
        return complex(np.vdot(self.amps, other.amps))

    def distance(self, other: "StateVector") -> float:
        if other.dim != self.dim:
            return float("inf")
        return float(np.max(np.abs(self.amps - other.amps)))


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    """自己共役演算子 X"""

    entries: np.ndarray

    def __post_init__(self):
        mat = np.array(self.entries, dtype=complex)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimMismatch(f"演算子は正方行列である必要があります: shape={mat.shape}")
        _check_dim(mat.shape[0], "演算子")
        if not np.all(np.isfinite(mat)):
            raise ValidationError("演算子に NaN または Inf が含まれています")
        deviation = float(np.max(np.abs(mat - mat.conj().T)))
        if deviation > settings.TOL:
            raise NotHermitian(deviation, settings.TOL)
        # 丸め誤差レベルの非エルミート成分を除去
        object.__setattr__(self, "entries", _frozen((mat + mat.conj().T) / 2.0, "演算子"))

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def diagonal(cls, values: Sequence[float]) -> "HermitianOperator":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def projector(cls, vectors: Sequence[Sequence[complex]]) -> "HermitianOperator":
        """正規直交ベクトル列が張る部分空間への射影子"""
        cols = np.array(vectors, dtype=complex).T
        return cls(cols @ cols.conj().T)

    @classmethod
    def from_spectral(
        cls, eigenvalues: Sequence[float], projector_bases: Sequence[Sequence[Sequence[complex]]]
    ) -> "HermitianOperator":
        """固有値と各固有空間の正規直交基底から X = Σ x P(x) を組み立てる"""
        if len(eigenvalues) != len(projector_bases):
            raise DimMismatch("固有値と射影子基底の個数が一致しません")
        if any(len(basis) == 0 for basis in projector_bases):
            raise DimMismatch("空の射影子基底があります")
        columns = [np.array(v, dtype=complex) for basis in projector_bases for v in basis]
        if not columns:
            raise DimMismatch("射影子基底が空です")
        if len({c.shape for c in columns}) != 1 or columns[0].ndim != 1:
            raise DimMismatch(f"基底ベクトルの長さがそろっていません: {sorted({c.size for c in columns})}")
        frame = np.column_stack(columns)
        dim = frame.shape[0]
        if frame.shape[1] != dim:
            raise DimMismatch(f"基底ベクトルの総数 {frame.shape[1]} が次元 {dim} と一致しません")
        deviation = float(np.max(np.abs(frame.conj().T @ frame - np.eye(dim))))
        if deviation > settings.TOL:
            raise NotIsometry(deviation, settings.TOL)
        mat = np.zeros((dim, dim), dtype=complex)
        for x, basis in zip(eigenvalues, projector_bases):
            cols = np.array(basis, dtype=complex).T
            mat += float(x) * (cols @ cols.conj().T)
        return cls(mat)

    @cached_property
    def spectral(self) -> "SpectralDecomposition":
        """既定のクラスタ許容誤差でのスペクトル分解（キャッシュ）"""
        return spectral_decompose(self)

    def expectation(self, psi: StateVector) -> float:
        if psi.dim != self.dim:
            raise DimMismatch(f"期待値の次元不一致: {psi.dim} != {self.dim}")
        return float(np.vdot(psi.amps, self.entries @ psi.amps).real)

    def distance(self, other: "HermitianOperator") -> float:
        if other.dim != self.dim:
            return float("inf")
        return float(np.max(np.abs(self.entries - other.entries)))


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """X = Σ x P_X(x)。固有値は昇順で互いに異なる"""

    eigenvalues: Tuple[float, ...]
    projectors: Tuple[np.ndarray, ...]
    eigenbases: Tuple[np.ndarray, ...]

    def index_of(self, x: float, tol: Optional[float] = None) -> Optional[int]:
        tol = settings.TOL if tol is None else tol
        for i, value in enumerate(self.eigenvalues):
            if abs(value - x) <= tol:
                return i
        return None

    def projector_for(self, x: float) -> np.ndarray:
        i = self.index_of(x)
        if i is None:
            raise DomainError(f"{x} は固有値ではありません")
        return self.projectors[i]

    def multiplicity(self, x: float) -> int:
        i = self.index_of(x)
        return 0 if i is None else int(self.eigenbases[i].shape[1])

    def reconstruct(self) -> np.ndarray:
        dim = self.projectors[0].shape[0]
        mat = np.zeros((dim, dim), dtype=complex)
        for x, proj in zip(self.eigenvalues, self.projectors):
            mat += x * proj
        return mat

    def invariant_errors(self, X: Optional[HermitianOperator] = None) -> dict:
        """冪等性・直交性・完全性・再構成の最大誤差"""
        dim = self.projectors[0].shape[0]
        idempotent = max(float(np.max(np.abs(p @ p - p))) for p in self.projectors)
        orthogonal = 0.0
        for i, p in enumerate(self.projectors):
            for q in self.projectors[i + 1:]:
                orthogonal = max(orthogonal, float(np.max(np.abs(p @ q))))
        completeness = float(np.max(np.abs(sum(self.projectors) - np.eye(dim))))
        errors = {"idempotent": idempotent, "orthogonal": orthogonal, "completeness": completeness}
        if X is not None:
            errors["reconstruction"] = float(np.linalg.norm(self.reconstruct() - X.entries))
        return errors


@dataclass(frozen=True, eq=False)
class Isometry:
    """等長写像 U: H → H'（U†U = I、dim_out ≥ dim_in）"""

    entries: np.ndarray

    def __post_init__(self):
        mat = _frozen(self.entries, "等長写像")
        if mat.ndim != 2:
            raise DimMismatch("等長写像は2次元配列である必要があります")
        dim_out, dim_in = mat.shape
        _check_dim(dim_in, "等長写像の入力")
        _check_dim(dim_out, "等長写像の出力")
        if dim_out < dim_in:
            raise DimMismatch(f"等長写像は dim_out ≥ dim_in が必要です: {dim_out} < {dim_in}")
        deviation = float(np.max(np.abs(mat.conj().T @ mat - np.eye(dim_in))))
        if deviation > settings.TOL:
            raise NotIsometry(deviation, settings.TOL)
        object.__setattr__(self, "entries", mat)

    @property
    def dim_in(self) -> int:
        return int(self.entries.shape[1])

    @property
    def dim_out(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "Isometry":
        return cls(np.eye(dim))

    @classmethod
    def from_columns(cls, columns: Sequence[Sequence[complex]]) -> "Isometry":
        return cls(np.column_stack([np.asarray(c, dtype=complex) for c in columns]))

    @property
    def adjoint(self) -> np.ndarray:
        return self.entries.conj().T

    def apply(self, psi: StateVector) -> StateVector:
        if psi.dim != self.dim_in:
            raise DimMismatch(f"等長写像の入力次元 {self.dim_in} と状態の次元 {psi.dim} が一致しません")
        return StateVector(self.entries @ psi.amps)

    def then(self, other: "Isometry") -> "Isometry":
        """other ∘ self"""
        if other.dim_in != self.dim_out:
            raise DimMismatch("等長写像の合成で次元が一致しません")
        return Isometry(other.entries @ self.entries)

    def is_unitary(self, tol: Optional[float] = None) -> bool:
        tol = settings.TOL if tol is None else tol
        if self.dim_in != self.dim_out:
            return False
        return float(np.max(np.abs(self.entries @ self.adjoint - np.eye(self.dim_out)))) <= tol


def spectral_decompose(X: HermitianOperator, cluster_tol: Optional[float] = None) -> SpectralDecomposition:
    """
    スペクトル分解。差が cluster_tol 以下の隣接固有値は1つにまとめ、
    値は平均、射影子は和を取る。cluster_tol の既定値は TOL·max(1, max|x|)。
    """
    values, vectors = la.eigh(np.asarray(X.entries))
    if cluster_tol is None:
        scale = float(np.max(np.abs(values))) if values.size else 0.0
        cluster_tol = settings.TOL * max(scale, 1.0)

    groups = [[0]]
    for i in range(1, values.size):
        if values[i] - values[i - 1] <= cluster_tol:
            groups[-1].append(i)
        else:
            groups.append([i])

    eigenvalues = []
    projectors = []
    bases = []
    for group in groups:
        basis = np.array(vectors[:, group], dtype=complex)
        # 各列の絶対値最大の成分を正の実数にそろえる（LAPACK の符号・位相に依存しない）
        pivots = basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])]
        basis = basis * (pivots.conj() / np.abs(pivots))
        eigenvalues.append(float(np.mean(values[group])))
        proj = basis @ basis.conj().T
        basis.setflags(write=False)
        proj.setflags(write=False)
        bases.append(basis)
        projectors.append(proj)

    return SpectralDecomposition(tuple(eigenvalues), tuple(projectors), tuple(bases))


def apply_function(X: HermitianOperator, f: Callable[[float], float]) -> HermitianOperator:
    """f(X) = Σ f(x) P_X(x)"""
    dec = X.spectral
    mat = np.zeros((X.dim, X.dim), dtype=complex)
    for x, proj in zip(dec.eigenvalues, dec.projectors):
        try:
            y = float(f(x))
        except DomainError:
            raise
        except (KeyError, ValueError, TypeError, ZeroDivisionError, ArithmeticError) as e:
            raise DomainError(f"関数が固有値 {x} で定義されていません: {e}") from e
        if not np.isfinite(y):
            raise DomainError(f"関数値 f({x}) が有限ではありません")
        mat += y * proj
    return HermitianOperator(mat)


def conjugate(X: HermitianOperator, U: Isometry) -> HermitianOperator:
    """U X U†（U の値域側の空間上の演算子）"""
    if U.dim_in != X.dim:
        raise DimMismatch(f"等長写像の入力次元 {U.dim_in} と演算子の次元 {X.dim} が一致しません")
    return HermitianOperator(U.entries @ X.entries @ U.adjoint)


def intertwining_error(U: Isometry, X: HermitianOperator, X_prime: HermitianOperator) -> float:
    """max|UX - X'U|"""
    if U.dim_in != X.dim or U.dim_out != X_prime.dim:
        raise DimMismatch(
            f"絡み合い関係の次元不一致: U は {U.dim_in}→{U.dim_out}, X は {X.dim}, X' は {X_prime.dim}"
        )
    return float(np.max(np.abs(U.entries @ X.entries - X_prime.entries @ U.entries)))


def dilate(V: Isometry) -> Isometry:
    """等長写像 H → H' の列を補完して H' 上のユニタリにする（補助空間による実現）"""
    if V.dim_in == V.dim_out:
        return V
    complement = la.null_space(V.adjoint)
    return Isometry(np.hstack([V.entries, complement]))


def pad_state(psi: StateVector, dim: int) -> StateVector:
    """|ψ⟩ を先頭成分として dim 次元へ埋め込む"""
    if dim < psi.dim:
        raise DimMismatch(f"埋め込み先の次元 {dim} が状態の次元 {psi.dim} より小さいです")
    amps = np.zeros(dim, dtype=complex)
    amps[: psi.dim] = psi.amps
    return StateVector(amps)


# === 乱数生成ヘルパー ===
def random_state(dim: int, rng: np.random.Generator) -> StateVector:
    z = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return StateVector.normalized(z)


def random_unitary(dim: int, rng: np.random.Generator) -> Isometry:
    if dim == 1:
        return Isometry(np.array([[np.exp(1j * rng.uniform(0, 2 * np.pi))]]))
    return Isometry(unitary_group.rvs(dim, random_state=rng))


def random_hermitian(
    dim: int, rng: np.random.Generator, eigenvalues: Optional[Sequence[float]] = None
) -> HermitianOperator:
    """指定スペクトル（省略時は正規乱数）をランダムな基底で持つエルミート演算子"""
    values = rng.normal(size=dim) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    if values.size != dim:
        raise DimMismatch("固有値の個数が次元と一致しません")
    U = random_unitary(dim, rng).entries
    return HermitianOperator(U @ np.diag(values) @ U.conj().T)
