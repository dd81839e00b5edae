"""
価値関数と公理監査 - Born 則・反例となる価値関数・表現定理・非文脈性・Gleason フィット

価値関数はゲームを標準装置で実行したブランチ集合上で評価する。
Born 以外の価値関数はブランチの数や重みの非線形性に依存するので、
装置や PE/ME 変換の違いで値が変わり得る。監査はそれを反例として記録する。
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as la

from src.config.settings import settings
from src.models.schemas import AxiomReport, GameDocument, Verdict
from src.services.documents import game_from_document, game_to_dict
from src.services.errors import (
    DimMismatch,
    DimTooSmall,
    EmptyBranchSet,
    InsufficientSpan,
    UnknownAxiom,
    UnknownValueFunction,
    ValidationError,
)
from src.services.games import (
    Game,
    PayoffFunction,
    WeightMap,
    canonical_forms_agree,
    canonicalize,
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
from src.services.measurement import (
    BranchSet,
    MeasurementProcedure,
    SubMeasurement,
    compose,
    instantiates,
    run,
)
from src.services.transforms import measurement_equivalence, payoff_equivalence, splitting_isometry

logger = logging.getLogger(__name__)


# === 価値関数 ===
class ValueKind(str, Enum):
    BORN = "born"
    BRANCH_COUNT = "branch-count"
    WEIGHT_POWER = "weight-power"
    USER_TABLE = "user-table"


@dataclass(frozen=True)
class ValueFunction:
    """ゲームまたはブランチ集合に実数値を割り当てる規則"""

    name: str
    kind: ValueKind
    alpha: float = 1.0
    table: Tuple[Tuple[float, float], ...] = ()

    @classmethod
    def born(cls) -> "ValueFunction":
        return cls("born", ValueKind.BORN)

    @classmethod
    def branch_count(cls) -> "ValueFunction":
        return cls("branch-count", ValueKind.BRANCH_COUNT)

    @classmethod
    def weight_power(cls, alpha: float) -> "ValueFunction":
        return cls(f"weight-power:{alpha:g}", ValueKind.WEIGHT_POWER, alpha=float(alpha))

    @classmethod
    def user_table(cls, table: Mapping[float, float]) -> "ValueFunction":
        """固有値ごとの固定オッズ t(x)。表にない固有値は 1"""
        for x, t in table.items():
            if t < 0 or not math.isfinite(t):
                raise ValidationError(f"オッズ表の値は非負である必要があります: {x} → {t}")
        return cls("user-table", ValueKind.USER_TABLE, table=tuple(sorted((float(x), float(t)) for x, t in table.items())))

    @classmethod
    def parse(cls, spec: str) -> "ValueFunction":
        """born | branch-count | weight-power:α | table:x=t,x=t"""
        text = spec.strip().lower()
        if text == "born":
            return cls.born()
        if text in ("branch-count", "branchcount"):
            return cls.branch_count()
        if text.startswith("weight-power:"):
            try:
                return cls.weight_power(float(text.split(":", 1)[1]))
            except ValueError as e:
                raise UnknownValueFunction(f"weight-power の指数を解釈できません: {spec}") from e
        if text.startswith("table:"):
            try:
                pairs = [item.split("=") for item in text.split(":", 1)[1].split(",") if item]
                return cls.user_table({float(x): float(t) for x, t in pairs})
            except ValueError as e:
                raise UnknownValueFunction(f"オッズ表を解釈できません: {spec}") from e
        raise UnknownValueFunction(f"未知の価値関数: {spec}")

    @property
    def is_born_equivalent(self) -> bool:
        return self.kind == ValueKind.BORN or (self.kind == ValueKind.WEIGHT_POWER and self.alpha == 1.0)

    def odds(self, x: float) -> float:
        for key, t in self.table:
            if abs(key - x) <= settings.TOL:
                return t
        return 1.0

    def value(self, target: Union[Game, BranchSet], procedure: Optional[MeasurementProcedure] = None) -> float:
        """ゲーム（装置省略時は標準装置で実行）またはブランチ集合の値"""
        if isinstance(target, BranchSet):
            return evaluate(self, target)
        procedure = procedure or MeasurementProcedure.standard(target.observable)
        return evaluate(self, run(procedure, target.state, target.payoff))


def evaluate(vf: ValueFunction, branches: BranchSet) -> float:
    if len(branches) == 0:
        raise EmptyBranchSet("空のブランチ集合は評価できません")
    weights = branches.weights
    payoffs = branches.payoffs
    if vf.kind == ValueKind.BORN:
        return math.fsum(weights * payoffs)
    if vf.kind == ValueKind.BRANCH_COUNT:
        return math.fsum(payoffs) / len(payoffs)
    if vf.kind == ValueKind.WEIGHT_POWER:
        powered = weights ** vf.alpha
        return math.fsum(powered * payoffs) / math.fsum(powered)
    odds = np.array([vf.odds(b.final_eigenvalue) for b in branches], dtype=float)
    total = math.fsum(odds)
    if total <= 0:
        raise ValidationError("全ブランチのオッズがゼロです")
    return math.fsum(odds * payoffs) / total


def born_value(game: Game) -> float:
    """V = Σ_c c·W_G(c)"""
    return weight_map(game).expectation()


def expected_utility(target: Union[Game, WeightMap]) -> float:
    """EU(G) = Σ_c W_G(c)·c"""
    wm = target if isinstance(target, WeightMap) else weight_map(target)
    return wm.expectation()


@dataclass(frozen=True)
class ProbabilityTable:
    """固有値 → 確率"""

    entries: Tuple[Tuple[float, float], ...]

    def __getitem__(self, x: float) -> float:
        for key, p in self.entries:
            if abs(key - x) <= settings.TOL:
                return p
        raise KeyError(x)

    @property
    def total(self) -> float:
        return math.fsum(p for _, p in self.entries)

    def as_dict(self) -> Dict[float, float]:
        return dict(self.entries)


def extract_probabilities(
    vf: ValueFunction, psi: StateVector, X: HermitianOperator, procedure: Optional[MeasurementProcedure] = None
) -> ProbabilityTable:
    """Pr(x) = V(ψ, X, δ_x)"""
    spectrum = X.spectral.eigenvalues
    return ProbabilityTable(
        tuple((x, vf.value(Game(psi, X, PayoffFunction.delta(spectrum, x)), procedure)) for x in spectrum)
    )


# === 監査コーパス ===
class Axiom(str, Enum):
    ADDITIVITY = "additivity"
    DOMINANCE = "dominance"
    MEASUREMENT_NEUTRALITY = "measurement-neutrality"
    PHYSICALITY = "physicality"
    SUBSTITUTIVITY = "substitutivity"
    WEAK_ADDITIVITY = "weak-additivity"
    ZERO_SUM = "zero-sum"

    @classmethod
    def parse(cls, name: Union[str, "Axiom"]) -> "Axiom":
        if isinstance(name, Axiom):
            return name
        key = str(name).strip().lower().replace("_", "-").replace(" ", "-")
        for axiom in cls:
            if axiom.value == key:
                return axiom
        raise UnknownAxiom(f"未知の公理: {name}")


@dataclass(frozen=True, eq=False)
class AuditInstance:
    """監査の1インスタンス: ゲーム、標準装置、別装置、正準形が一致する相手ゲーム"""

    label: str
    game: Game
    device: MeasurementProcedure
    alternative: MeasurementProcedure
    partner: Game
    route: str


def random_game(rng: np.random.Generator, dim: int, degenerate: bool = False) -> Game:
    """ランダムな基底・整数スペクトル・小数2桁のペイオフを持つゲーム"""
    if degenerate and dim >= 2:
        values = rng.choice(np.arange(-4, 5), size=dim - 1, replace=False).astype(float)
        values = np.append(values, values[0])
    else:
        values = rng.choice(np.arange(-6, 7), size=dim, replace=False).astype(float)
    X = random_hermitian(dim, rng, values)
    payoff = {x: round(float(rng.uniform(-5, 5)), 2) for x in X.spectral.eigenvalues}
    return Game(random_state(dim, rng), X, PayoffFunction.from_mapping(payoff))


def split_partner(game: Game, a1: int, a2: int) -> Game:
    """
    2準位ゲーム ⟨ψ, diag(x1,x2), P⟩ を N = a1 + a2 個の等重ね合わせへ分割した
    ⟨Vψ, diag(1..N), i ↦ P(x_{1 or 2})⟩
    """
    if game.dim != 2 or len(game.spectrum) != 2:
        raise DimMismatch("分割は非縮退の2準位ゲームにのみ適用できます")
    x1, x2 = game.spectrum
    V = splitting_isometry(a1, a2)
    n = a1 + a2
    labels = [float(i) for i in range(1, n + 1)]
    payoff = PayoffFunction(tuple((float(i), game.payoff(x1 if i <= a1 else x2)) for i in range(1, n + 1)))
    # 固有基底 (λ1, λ2) での成分
    coeffs = np.concatenate([basis.conj().T @ game.state.amps for basis in game.observable.spectral.eigenbases])
    return Game(V.apply(StateVector(coeffs)), HermitianOperator.diagonal(labels), payoff)


def _rational_two_level(rng: np.random.Generator, n: int) -> Tuple[Game, int, int]:
    a1 = int(rng.integers(1, n))
    a2 = n - a1
    x1, x2 = sorted(rng.choice(np.arange(-5, 6), size=2, replace=False).astype(float))
    payoff = {x1: round(float(rng.uniform(-5, 5)), 2), x2: round(float(rng.uniform(-5, 5)), 2)}
    game = Game.diagonal([math.sqrt(a1 / n), math.sqrt(a2 / n)], [x1, x2], payoff)
    return game, a1, a2


def build_random_corpus(size: int, seed: int, max_dim: int = 4) -> List[AuditInstance]:
    """ME（ランダムユニタリ）・PE（再ラベル）・分割・正準化の4種の相手を順に持つコーパス"""
    corpus = []
    for index in range(size):
        rng = np.random.default_rng([seed, index])
        kind = index % 4
        if kind == 2:
            game, a1, a2 = _rational_two_level(rng, 4)
            partner, route = split_partner(game, a1, a2), "split"
        else:
            dim = int(rng.integers(2 if kind == 3 else 1, max_dim + 1))
            game = random_game(rng, dim, degenerate=(kind == 3))
            if kind == 0:
                U = random_unitary(dim, rng)
                partner = measurement_equivalence(game, U, conjugate(game.observable, U), game.payoff)
                route = "me-unitary"
            elif kind == 1:
                scale = float(rng.choice([-2.0, -1.0, 1.0, 2.0, 3.0]))
                shift = float(rng.integers(-3, 4))
                partner = payoff_equivalence(game, lambda x: scale * x + shift)
                route = "pe-relabel"
            else:
                partner, route = canonicalize(game), "canonical"
        corpus.append(
            AuditInstance(
                label=f"random-{index}",
                game=game,
                device=MeasurementProcedure.standard(game.observable),
                alternative=MeasurementProcedure.random(game.observable, rng),
                partner=partner,
                route=route,
            )
        )
    logger.info("✅ ランダムコーパスを生成しました: %d 件 (seed=%d)", size, seed)
    return corpus


def device_pair_corpus(multiplicity: int) -> List[AuditInstance]:
    """スピン上向きを multiplicity 本に分岐させる装置 B と標準装置 A の対"""
    game = Game.diagonal([1 / math.sqrt(2), 1 / math.sqrt(2)], [1.0, -1.0])
    X = game.observable
    return [
        AuditInstance(
            label=f"device-pair:{multiplicity}",
            game=game,
            device=MeasurementProcedure.standard(X),
            alternative=MeasurementProcedure.uniform(X, {1.0: multiplicity}),
            partner=game,
            route="identity",
        )
    ]


def stage3_split_corpus() -> List[AuditInstance]:
    """重み (1/4, 3/4) の2準位ゲームと、それを4分割した等重ね合わせの対"""
    game = Game.diagonal([0.5, math.sqrt(3) / 2], [0.0, 1.0])
    X = game.observable
    return [
        AuditInstance(
            label="stage3-split",
            game=game,
            device=MeasurementProcedure.standard(X),
            alternative=MeasurementProcedure.standard(X),
            partner=split_partner(game, 1, 3),
            route="split",
        )
    ]


# === 公理チェック ===
def _evidence(
    instance: str,
    description: str,
    values: Sequence[float],
    branch_sets: Sequence[BranchSet],
    relation: str = "eq",
    games: Optional[Sequence[Game]] = None,
) -> Dict[str, Any]:
    evidence = {
        "instance": instance,
        "description": description,
        "relation": relation,
        "values": [float(v) for v in values],
        "branch_sets": [b.as_records() for b in branch_sets],
    }
    if games is not None:
        evidence["games"] = [game_to_dict(g) for g in games]
    return evidence


def _random_payoff(spectrum: Sequence[float], rng: np.random.Generator) -> PayoffFunction:
    return PayoffFunction(tuple((x, round(float(rng.uniform(-5, 5)), 2)) for x in spectrum))


def _check_dominance(vf, inst: AuditInstance, rng):
    game = inst.game
    lowered = PayoffFunction(
        tuple((x, c - float(rng.uniform(0.0, 1.0))) for x, c in game.payoff.restrict(game.spectrum).entries)
    )
    b_high = run(inst.device, game.state, game.payoff)
    b_low = run(inst.device, game.state, lowered)
    v_high, v_low = evaluate(vf, b_high), evaluate(vf, b_low)
    violation = max(0.0, v_low - v_high)
    return violation, _evidence(inst.label, "P ≥ P' ⇒ V(P) ≥ V(P')", [v_high, v_low], [b_high, b_low], "ge")


def _check_weak_additivity(vf, inst: AuditInstance, rng):
    game = inst.game
    k = round(float(rng.uniform(-5, 5)), 3)
    b = run(inst.device, game.state, game.payoff)
    b_k = run(inst.device, game.state, game.payoff + k)
    lhs, rhs = evaluate(vf, b_k), evaluate(vf, b) + k
    evidence = _evidence(inst.label, f"V(P + {k}) = V(P) + {k}", [lhs, rhs], [b_k, b])
    evidence["shift"] = k
    return abs(lhs - rhs), evidence


def _check_zero_sum(vf, inst: AuditInstance, rng):
    game = inst.game
    b = run(inst.device, game.state, game.payoff)
    b_neg = run(inst.device, game.state, -game.payoff)
    lhs, rhs = evaluate(vf, b_neg), -evaluate(vf, b)
    evidence = _evidence(inst.label, "V(-P) = -V(P)", [lhs, rhs], [b_neg, b])
    evidence["negate_second"] = True
    return abs(lhs - rhs), evidence


def _check_additivity(vf, inst: AuditInstance, rng):
    game = inst.game
    other = _random_payoff(game.spectrum, rng)
    b1 = run(inst.device, game.state, game.payoff)
    b2 = run(inst.device, game.state, other)
    b_sum = run(inst.device, game.state, game.payoff + other)
    lhs = evaluate(vf, b_sum)
    rhs = evaluate(vf, b1) + evaluate(vf, b2)
    evidence = _evidence(inst.label, "V(P + P') = V(P) + V(P')", [lhs, rhs], [b_sum, b1, b2])
    evidence["sum_of_rest"] = True
    return abs(lhs - rhs), evidence


def _check_substitutivity(vf, inst: AuditInstance, rng):
    """各結果に2準位の部分ゲームを続けた複合ゲームと、部分ゲームを値で置き換えたゲームを比べる"""
    game = inst.game
    continuation = {}
    cash = {}
    for x in game.spectrum:
        sub_values = rng.choice(np.arange(-5, 6), size=2, replace=False).astype(float)
        sub_X = HermitianOperator.diagonal(sub_values)
        sub_payoff = _random_payoff(sub_X.spectral.eigenvalues, rng)
        sub_state = random_state(2, rng)
        procedure = MeasurementProcedure.standard(sub_X)
        continuation[x] = SubMeasurement(procedure, payoff=sub_payoff, state=sub_state)
        cash[x] = evaluate(vf, run(procedure, sub_state, sub_payoff))
    b_compound = compose(inst.device, game.state, continuation)
    b_cash = run(inst.device, game.state, PayoffFunction.from_mapping(cash))
    lhs, rhs = evaluate(vf, b_compound), evaluate(vf, b_cash)
    return abs(lhs - rhs), _evidence(
        inst.label, "V(複合ゲーム) = V(部分ゲームを値で置換したゲーム)", [lhs, rhs], [b_compound, b_cash]
    )


def _check_physicality(vf, inst: AuditInstance, rng):
    b1 = run(MeasurementProcedure.standard(inst.game.observable), inst.game.state, inst.game.payoff)
    b2 = run(MeasurementProcedure.standard(inst.partner.observable), inst.partner.state, inst.partner.payoff)
    lhs, rhs = evaluate(vf, b1), evaluate(vf, b2)
    evidence = _evidence(
        inst.label,
        f"正準形が一致するゲーム対で値が一致（{inst.route}）",
        [lhs, rhs],
        [b1, b2],
        games=[inst.game, inst.partner],
    )
    return abs(lhs - rhs), evidence


def _check_measurement_neutrality(vf, inst: AuditInstance, rng):
    game = inst.game
    b1 = run(inst.device, game.state, game.payoff)
    b2 = run(inst.alternative, game.state, game.payoff)
    if not (instantiates(b1, game) and instantiates(b2, game)):
        raise ValidationError(f"{inst.label}: 装置が同じゲームを実現していません")
    lhs, rhs = evaluate(vf, b1), evaluate(vf, b2)
    return abs(lhs - rhs), _evidence(inst.label, "同じゲームを実現する装置間で値が一致", [lhs, rhs], [b1, b2])


_CHECKERS: Dict[Axiom, Callable] = {
    Axiom.DOMINANCE: _check_dominance,
    Axiom.WEAK_ADDITIVITY: _check_weak_additivity,
    Axiom.ZERO_SUM: _check_zero_sum,
    Axiom.ADDITIVITY: _check_additivity,
    Axiom.SUBSTITUTIVITY: _check_substitutivity,
    Axiom.PHYSICALITY: _check_physicality,
    Axiom.MEASUREMENT_NEUTRALITY: _check_measurement_neutrality,
}


def check_axiom(
    vf: ValueFunction, axiom: Union[str, Axiom], corpus: Sequence[AuditInstance], rng_seed: int
) -> AxiomReport:
    """コーパス全体で公理を検査し、最初の反例を witness として記録する"""
    axiom = Axiom.parse(axiom)
    if not corpus:
        raise ValidationError("監査コーパスが空です")
    checker = _CHECKERS[axiom]
    tol = settings.TOL
    max_violation = 0.0
    witness = None
    for index, inst in enumerate(corpus):
        rng = np.random.default_rng([rng_seed, index])
        violation, evidence = checker(vf, inst, rng)
        max_violation = max(max_violation, violation)
        if violation > tol and witness is None:
            witness = evidence
            logger.info("❌ %s が %s に違反: %s", vf.name, axiom.value, inst.label)
    return AxiomReport(
        axiom=axiom.value,
        value_function=vf.name,
        verdict=Verdict.FAIL if witness is not None else Verdict.PASS,
        witness=witness,
        max_violation=max_violation,
        instances_checked=len(corpus),
    )


def audit(vf: ValueFunction, corpus: Sequence[AuditInstance], seed: int, axioms: Optional[Sequence[Axiom]] = None) -> List[AxiomReport]:
    """全公理（または指定した公理）の監査結果を公理名順に返す"""
    selected = sorted(axioms or list(Axiom), key=lambda a: a.value)
    return [check_axiom(vf, axiom, corpus, seed) for axiom in selected]


def recheck_witness(vf: ValueFunction, report: AxiomReport) -> bool:
    """witness のブランチデータから値を再計算し、違反が再現するか確認する"""
    witness = report.witness
    if witness is None:
        return False
    tol = settings.TOL
    branch_sets = [BranchSet.from_records(records) for records in witness["branch_sets"]]
    recomputed = [evaluate(vf, b) for b in branch_sets]
    if witness.get("negate_second"):
        recomputed[1] = -recomputed[1]
    if witness.get("sum_of_rest"):
        recomputed = [recomputed[0], math.fsum(recomputed[1:])]
    if "shift" in witness:
        recomputed[1] += witness["shift"]
    recorded = witness["values"]
    if any(abs(a - b) > 10 * tol for a, b in zip(recomputed, recorded)):
        return False
    if "games" in witness:
        games = [game_from_document(GameDocument.model_validate(d)) for d in witness["games"]]
        if not canonical_forms_agree(games[0], games[1]):
            return False
    if witness["relation"] == "ge":
        return recomputed[1] - recomputed[0] > tol
    return abs(recomputed[0] - recomputed[1]) > tol


class ProfileExpectation(str, Enum):
    ALL_PASS = "all-pass"
    PHYSICAL_FAILURE = "physical-failure"


def expected_profile(vf: ValueFunction) -> ProfileExpectation:
    """Born 同値な価値関数は全て合格、それ以外は物理性か測定中立性のどちらかで不合格"""
    return ProfileExpectation.ALL_PASS if vf.is_born_equivalent else ProfileExpectation.PHYSICAL_FAILURE


def matches_profile(vf: ValueFunction, reports: Sequence[AxiomReport]) -> bool:
    if expected_profile(vf) == ProfileExpectation.ALL_PASS:
        return all(r.verdict == Verdict.PASS for r in reports)
    physical = {Axiom.PHYSICALITY.value, Axiom.MEASUREMENT_NEUTRALITY.value}
    return any(r.verdict == Verdict.FAIL and r.axiom in physical for r in reports)


# === 表現定理 ===
def check_representation(
    vf: ValueFunction,
    psi: StateVector,
    X: HermitianOperator,
    payoff_corpus: Sequence[PayoffFunction],
    procedures: Optional[Sequence[MeasurementProcedure]] = None,
) -> AxiomReport:
    """
    V(P) = Σ Pr(x)·P(x) と Σ Pr = 1 を検証する。
    procedures を複数与えると k 番目のペイオフを procedures[k % len] で評価する。
    """
    procedures = list(procedures or [MeasurementProcedure.standard(X)])
    device = procedures[0]
    tol = settings.REPRESENTATION_TOL
    payoffs = list(payoff_corpus)
    if not payoffs:
        raise ValidationError("ペイオフコーパスが空です")

    # 前提条件: このコーパス上で加法性と優越性
    precondition = 0.0
    for p, q in zip(payoffs, payoffs[1:] + payoffs[:1]):
        v_p = vf.value(Game(psi, X, p), device)
        v_q = vf.value(Game(psi, X, q), device)
        precondition = max(precondition, abs(vf.value(Game(psi, X, p + q), device) - v_p - v_q))
        precondition = max(precondition, vf.value(Game(psi, X, p - 1.0), device) - v_p)
    vacuous = precondition > settings.TOL

    table = extract_probabilities(vf, psi, X, device)
    max_violation = abs(table.total - 1.0)
    witness = None
    if max_violation > tol:
        witness = {"description": "Σ Pr = 1", "values": [table.total, 1.0]}

    for k, payoff in enumerate(payoffs):
        procedure = procedures[k % len(procedures)]
        branches = run(procedure, psi, payoff)
        value = evaluate(vf, branches)
        reconstructed = math.fsum(p * payoff(x) for x, p in table.entries)
        error = abs(value - reconstructed)
        max_violation = max(max_violation, error)
        if error > tol and witness is None:
            witness = {
                "description": "V(P) = Σ Pr(x)·P(x)",
                "payoff_index": k,
                "values": [value, reconstructed],
                "probabilities": [[x, p] for x, p in table.entries],
                "branch_sets": [branches.as_records()],
            }

    return AxiomReport(
        axiom="representation",
        value_function=vf.name,
        verdict=Verdict.FAIL if witness is not None else Verdict.PASS,
        witness=witness,
        max_violation=max_violation,
        instances_checked=len(payoffs),
        vacuous=vacuous,
    )


def check_linearity_lemma(
    vf: ValueFunction,
    psi: StateVector,
    X: HermitianOperator,
    payoff: PayoffFunction,
    a: float,
    depth: int,
    procedure: Optional[MeasurementProcedure] = None,
) -> AxiomReport:
    """
    2進有理数 k/2^n ≤ a ≤ K/2^n で V(aP) を (k/2^n)V(P) と (K/2^n)V(P) の間に挟む。
    a < 0 は零和性 V(-P) = -V(P) で a > 0 に帰着する。
    """
    if depth < 1:
        raise ValidationError("depth は 1 以上である必要があります")
    procedure = procedure or MeasurementProcedure.standard(X)
    tol = settings.TOL

    def value(p: PayoffFunction) -> float:
        return vf.value(Game(psi, X, p), procedure)

    violation = 0.0
    base, scale = payoff, float(a)
    if scale < 0:
        violation = abs(value(-payoff) + value(payoff))
        base, scale = -payoff, -scale

    v_base = value(base)
    v_scaled = value(base * scale)
    width = float("inf")
    for n in range(1, depth + 1):
        m = 2 ** n
        lower = math.floor(scale * m) / m * v_base
        upper = math.ceil(scale * m) / m * v_base
        lo, hi = min(lower, upper), max(lower, upper)
        violation = max(violation, lo - v_scaled, v_scaled - hi)
        width = hi - lo
    bound = abs(v_base) * 2.0 ** (-depth) + tol
    violation = max(violation, width - bound)

    witness = None
    if violation > tol:
        witness = {
            "description": "V(aP) が 2進括弧に収まる",
            "a": float(a),
            "depth": depth,
            "values": [v_scaled, float(a) * value(payoff)],
            "final_width": width,
        }
    return AxiomReport(
        axiom="linearity",
        value_function=vf.name,
        verdict=Verdict.FAIL if witness is not None else Verdict.PASS,
        witness=witness,
        max_violation=max(violation, 0.0),
        instances_checked=depth,
    )


def check_non_contextuality(
    vf: ValueFunction,
    psi: StateVector,
    X: HermitianOperator,
    payoff: PayoffFunction,
    procedure: Optional[MeasurementProcedure] = None,
) -> AxiomReport:
    """V(ψ, X, P) = Σ_x V(ψ, P_X(x), 1)·P(x)（射影子ゲームは固有値単位の装置で実行）"""
    procedure = procedure or MeasurementProcedure.standard(X)
    lhs_branches = run(procedure, psi, payoff)
    lhs = evaluate(vf, lhs_branches)
    terms = []
    rhs = 0.0
    dec = X.spectral
    for x, proj in zip(dec.eigenvalues, dec.projectors):
        P_x = HermitianOperator(proj)
        game = Game(psi, P_x, PayoffFunction.identity(P_x.spectral.eigenvalues))
        v = vf.value(game, MeasurementProcedure.standard(P_x, resolution="eigenvalue"))
        terms.append([x, v])
        rhs += v * payoff(x)
    violation = abs(lhs - rhs)
    witness = None
    if violation > settings.TOL:
        witness = {
            "description": "V(ψ,X,P) = Σ V(ψ,P_X(x),1)·P(x)",
            "values": [lhs, rhs],
            "projector_values": terms,
            "branch_sets": [lhs_branches.as_records()],
        }
    return AxiomReport(
        axiom="non-contextuality",
        value_function=vf.name,
        verdict=Verdict.FAIL if witness is not None else Verdict.PASS,
        witness=witness,
        max_violation=violation,
        instances_checked=1,
    )


# === Gleason フィット ===
class GleasonFit(NamedTuple):
    density_matrix: HermitianOperator
    residual: float


def hermitian_basis(dim: int) -> List[np.ndarray]:
    """ヒルベルト・シュミット内積で正規直交なエルミート行列の基底（d² 個）"""
    basis = []
    for j in range(dim):
        E = np.zeros((dim, dim), dtype=complex)
        E[j, j] = 1.0
        basis.append(E)
    for j in range(dim):
        for k in range(j + 1, dim):
            S = np.zeros((dim, dim), dtype=complex)
            S[j, k] = S[k, j] = 1 / math.sqrt(2)
            A = np.zeros((dim, dim), dtype=complex)
            A[j, k] = 1j / math.sqrt(2)
            A[k, j] = -1j / math.sqrt(2)
            basis.extend([S, A])
    return basis


def spanning_observables(dim: int, rng: np.random.Generator, count: Optional[int] = None) -> List[HermitianOperator]:
    """ランダム基底の非縮退観測量。d+1 個で射影子がエルミート空間を張る（余裕を見て d+2 個）"""
    count = dim + 2 if count is None else count
    return [random_hermitian(dim, rng, np.arange(1, dim + 1, dtype=float)) for _ in range(count)]


def _project_density(rho: np.ndarray) -> np.ndarray:
    values, vectors = la.eigh((rho + rho.conj().T) / 2)
    values = np.clip(values, 0.0, None)
    if values.sum() <= 0:
        values = np.full_like(values, 1.0 / values.size)
    values = values / values.sum()
    return (vectors * values) @ vectors.conj().T


def gleason_fit(
    source: ValueFunction, psi: StateVector, observables: Sequence[HermitianOperator]
) -> GleasonFit:
    """
    全観測量の全射影子について Pr(P) = Tr(Pρ) を満たす密度演算子 ρ を最小二乗で求める。
    ρ はエルミート・トレース1・半正定値に射影する。
    """
    dim = psi.dim
    if dim < 3:
        raise DimTooSmall(f"Gleason の定理は dim ≥ 3 が必要です: dim={dim}")
    basis = hermitian_basis(dim)
    rows, targets, projectors = [], [], []
    for X in observables:
        if X.dim != dim:
            raise DimMismatch(f"観測量の次元 {X.dim} が状態の次元 {dim} と一致しません")
        table = extract_probabilities(source, psi, X)
        for x, proj in zip(X.spectral.eigenvalues, X.spectral.projectors):
            rows.append([float(np.trace(proj @ B).real) for B in basis])
            targets.append(table[x])
            projectors.append(proj)

    A = np.array(rows, dtype=float)
    rank = int(np.linalg.matrix_rank(A, tol=1e-8)) if rows else 0
    if rank < dim * dim:
        raise InsufficientSpan(rank, dim * dim)

    trace_row = np.array([[float(np.trace(B).real) for B in basis]])
    coef, *_ = la.lstsq(np.vstack([A, trace_row]), np.append(np.array(targets, dtype=float), 1.0))
    rho = sum(c * B for c, B in zip(coef, basis))
    rho = _project_density(rho)
    residual = max(abs(t - float(np.trace(P @ rho).real)) for t, P in zip(targets, projectors))
    logger.debug("Gleason フィット: 射影子 %d 個、残差 %.3e", len(projectors), residual)
    return GleasonFit(HermitianOperator(rho), residual)
