"""
カスタム例外クラス - サービス層で発生するエラーの統一管理
"""
from typing import Optional


# === 基底例外 ===
class QGameError(Exception):
    """ライブラリ全体の基底例外"""
    pass


# === 入力検証エラー ===
class ValidationError(QGameError):
    """入力値の検証エラー（CLIでは終了コード2）"""
    pass


class NotHermitian(ValidationError):
    """エルミート性の検証失敗"""

    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        super().__init__(
            f"演算子がエルミートではありません: max|X - X†| = {max_deviation:.3e} > HERM_TOL={tol:.1e}"
        )


class NotNormalized(ValidationError):
    """状態ベクトルの規格化エラー"""

    def __init__(self, norm_sq: float, tol: float):
        self.deviation = abs(norm_sq - 1.0)
        super().__init__(
            f"状態ベクトルが規格化されていません: Σ|a|² = {norm_sq:.12g}（NORM_TOL={tol:.1e}）"
        )


class NotIsometry(ValidationError):
    """等長写像の検証失敗"""

    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        super().__init__(f"等長写像ではありません: max|U†U - I| = {max_deviation:.3e} > {tol:.1e}")


class DimMismatch(ValidationError):
    """次元の不一致"""
    pass


class DomainError(ValidationError):
    """関数がスペクトル上で定義されていない"""
    pass


class PayoffUndefined(ValidationError):
    """ペイオフ関数が固有値上で未定義"""
    pass


class IndexOutOfRange(ValidationError):
    """基底インデックスが範囲外"""
    pass


class DuplicateIndex(ValidationError):
    """基底インデックスの重複"""
    pass


class OutOfRange(ValidationError):
    """パラメータが許容範囲外"""
    pass


class InvalidWeightMap(ValidationError):
    """重みマップの不変条件違反"""
    pass


class InvalidProcedure(ValidationError):
    """測定手続きの不変条件違反"""
    pass


class EmptyBranchSet(ValidationError):
    """空のブランチ集合"""
    pass


class DuplicateReadout(ValidationError):
    """読み出しラベルの重複"""
    pass


class UnknownAxiom(ValidationError):
    """未知の公理名"""
    pass


class UnknownValueFunction(ValidationError):
    """未知の価値関数名"""
    pass


class UnknownStage(ValidationError):
    """未知のステージID"""
    pass


class DocumentError(ValidationError):
    """ドキュメントの解析・検証エラー（位置情報付き）"""

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        prefix = f"{location}: " if location else ""
        super().__init__(f"{prefix}{message}")


# === 変換エラー ===
class TransformError(QGameError):
    """同値変換の前提条件違反"""
    pass


class NonInjective(TransformError):
    """逆関数が必要だが単射ではない"""
    pass


class IntertwinerViolation(TransformError):
    """UX = X'U が成り立たない"""

    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        super().__init__(f"絡み合い関係 UX = X'U の違反: max|UX - X'U| = {max_deviation:.3e} > {tol:.1e}")


class PayoffMismatch(TransformError):
    """ペイオフ関数が σ(X) 上で一致しない"""

    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        super().__init__(f"ペイオフが σ(X) 上で一致しません: 最大差 {max_deviation:.3e} > PAYOFF_TOL={tol:.1e}")


class SpectrumNotInvariant(TransformError):
    """スペクトルが鏡映で不変でない"""
    pass


# === その他 ===
class DegenerateGame(QGameError):
    """全ての重みがゼロのゲーム"""
    pass


class InsufficientSpan(QGameError):
    """射影子族がエルミート演算子空間を張らない"""

    def __init__(self, rank: int, required: int):
        self.rank = rank
        self.required = required
        super().__init__(f"射影子族の張る次元が不足しています: rank={rank} < {required}")


class DimTooSmall(QGameError):
    """次元が小さすぎる（Gleason の定理は dim ≥ 3 が必要）"""
    pass


class StageConstructionError(QGameError):
    """証明ステージの構成そのものが壊れている（結論の失敗とは区別する）"""

    def __init__(self, stage_id: str, diagnostic: str):
        self.stage_id = stage_id
        self.diagnostic = diagnostic
        super().__init__(f"ステージ {stage_id} の構成エラー: {diagnostic}")
