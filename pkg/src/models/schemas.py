from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator
from typing import Any, Dict, List, Optional, Tuple, Union
from enum import Enum


ComplexPair = Tuple[float, float]


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


class StageOutcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    EXPECTED_FAIL = "expected-fail"


# 入力スキーマ
class MatrixObservable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    matrix: List[List[ComplexPair]] = Field(..., description="行列成分 [re, im] の2次元配列")


class SpectralBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eigenvalues: List[float]
    projector_bases: List[List[List[ComplexPair]]] = Field(
        ..., description="各固有値の固有空間の正規直交基底"
    )


class SpectralObservable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spectral: SpectralBody


class PayoffEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eigenvalue: float
    value: float


class GameDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(..., ge=1, description="ヒルベルト空間の次元")
    state: List[ComplexPair] = Field(..., description="状態ベクトルの振幅 [re, im]")
    observable: Union[MatrixObservable, SpectralObservable]
    payoff: List[PayoffEntry]


# 結果スキーマ
class CheckResult(BaseModel):
    description: str
    lhs: float
    rhs: float
    tol: float
    relation: str = Field("eq", description="eq: |lhs - rhs| ≤ tol、le: lhs ≤ rhs + tol")
    passed: bool
    expected: bool = Field(True, description="False の場合は否定的対照として失敗が期待される")


class StageReport(BaseModel):
    stage_id: str
    instance_params: Dict[str, Any]
    checks: List[CheckResult]
    negative_control: bool = False

    @computed_field
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @computed_field
    @property
    def outcome(self) -> StageOutcome:
        if not all(c.passed == c.expected for c in self.checks):
            return StageOutcome.FAIL
        if any(not c.expected for c in self.checks):
            return StageOutcome.EXPECTED_FAIL
        return StageOutcome.PASS

    @property
    def as_expected(self) -> bool:
        return self.outcome != StageOutcome.FAIL


class AxiomReport(BaseModel):
    axiom: str
    value_function: str
    verdict: Verdict
    witness: Optional[Dict[str, Any]] = None
    max_violation: float = 0.0
    instances_checked: int = 0
    vacuous: bool = False

    @model_validator(mode="after")
    def _witness_required_on_fail(self):
        if self.verdict == Verdict.FAIL and self.witness is None:
            raise ValueError("fail の判定には witness が必要です")
        return self


class ReportDocument(BaseModel):
    command: str
    seed: Optional[int] = None
    tolerances: Dict[str, float]
    version: str
    results: List[Dict[str, Any]]
