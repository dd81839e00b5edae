"""
設定管理 - 許容誤差・既定パラメータの一元管理

環境変数（接頭辞 QGAME_）または .env ファイルで上書きできる。
CLI の --tol は実行時に settings.TOL を書き換えるため、環境変数より優先される。
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """アプリケーション設定"""

    model_config = SettingsConfigDict(
        env_prefix="QGAME_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # 数値許容誤差（NORM_TOL = HERM_TOL = PAYOFF_TOL）
    TOL: float = 1e-9
    ZERO_WEIGHT_TOL: float = 1e-12
    REPRESENTATION_TOL: float = 1e-6
    GLEASON_TOL: float = 1e-6

    # 既定パラメータ
    DEFAULT_SEED: int = 7
    DEFAULT_DEPTH: int = 20
    DEVICE_MULTIPLICITY: int = 1000
    CORPUS_SIZE: int = 200
    MAX_DIM: int = 256

    LOG_LEVEL: str = "WARNING"
    APP_VERSION: str = "1.0.0"

    def tolerances(self) -> dict:
        """レポートに記録する許容誤差一覧"""
        return {
            "tol": self.TOL,
            "zero_weight_tol": self.ZERO_WEIGHT_TOL,
            "representation_tol": self.REPRESENTATION_TOL,
            "gleason_tol": self.GLEASON_TOL,
        }


settings = Settings()
