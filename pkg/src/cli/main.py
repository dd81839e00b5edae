"""
コマンドラインインターフェース
量子ゲームの正準化・同値判定・公理監査・証明ステージ検証

終了コード: 0 成功（期待どおりのプロファイル）、1 内部エラー、2 入力エラー、3 検証・監査の不一致
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

# プロジェクトルートをパスに追加
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from src.config.settings import settings
from src.models.schemas import ReportDocument
from src.services.documents import dump_json, game_to_dict, load_game
from src.services.errors import QGameError, ValidationError
from src.services.games import canonicalize, equivalent, weight_map
from src.services.valuation import (
    ValueFunction,
    audit,
    build_random_corpus,
    device_pair_corpus,
    matches_profile,
    stage3_split_corpus,
)
from src.services.verifier import STAGE_IDS, device_pair_demo, verify_stages

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_MISMATCH = 3


class CLIError(Exception):
    """CLI 層のエラー（終了コード付き）"""

    def __init__(self, exit_code: int, detail: str):
        self.exit_code = exit_code
        self.detail = detail
        super().__init__(detail)


# === 出力 ===
def _report(command: str, results: List[Dict[str, Any]], seed: Optional[int] = None) -> ReportDocument:
    return ReportDocument(
        command=command,
        seed=seed,
        tolerances=settings.tolerances(),
        version=settings.APP_VERSION,
        results=results,
    )


def _emit(payload: Dict[str, Any], output: Optional[str]) -> None:
    """JSON を --output のファイルか標準出力へ書く"""
    text = dump_json(payload) + "\n"
    if output:
        try:
            Path(output).write_text(text, encoding="utf-8")
        except OSError as e:
            raise CLIError(EXIT_INPUT, f"出力ファイルに書き込めません: {output} ({e.strerror})") from e
        logger.info("✅ レポートを書き出しました: %s", output)
    else:
        sys.stdout.write(text)


def _summary(rows: List[Dict[str, Any]]) -> None:
    """人間向けの要約表を標準エラーへ出す"""
    if rows:
        print(pd.DataFrame(rows).to_string(index=False), file=sys.stderr)


# === コマンド ===
def cmd_canonicalize(args: argparse.Namespace) -> int:
    game = load_game(args.input)
    canonical = canonicalize(game)
    _emit(game_to_dict(canonical), args.output)
    _summary([{"payoff": c, "weight": w} for c, w in weight_map(canonical)])
    return EXIT_OK


def cmd_equivalent(args: argparse.Namespace) -> int:
    game_a = load_game(args.input_a)
    game_b = load_game(args.input_b)
    same = equivalent(game_a, game_b)
    result = {
        "equivalent": same,
        "weight_map_a": weight_map(game_a).as_records(),
        "weight_map_b": weight_map(game_b).as_records(),
        "canonical_a": game_to_dict(canonicalize(game_a)),
        "canonical_b": game_to_dict(canonicalize(game_b)),
    }
    _emit(_report("equivalent", [result]).model_dump(mode="json"), args.output)
    print(f"{'✅ 同値です' if same else '❌ 同値ではありません'}", file=sys.stderr)
    return EXIT_OK


def _parse_corpus(args: argparse.Namespace, seed: int):
    if args.demo:
        if args.demo == "stage3-split":
            return stage3_split_corpus()
        kind, _, count = args.demo.partition(":")
        if kind == "device-pair":
            try:
                multiplicity = int(count) if count else settings.DEVICE_MULTIPLICITY
            except ValueError as e:
                raise CLIError(EXIT_INPUT, f"多重度を解釈できません: {args.demo}") from e
            if multiplicity < 1:
                raise CLIError(EXIT_INPUT, f"多重度は 1 以上である必要があります: {multiplicity}")
            return device_pair_corpus(multiplicity)
        raise CLIError(EXIT_INPUT, f"未知のデモ: {args.demo}")

    spec = args.corpus or f"random:{settings.CORPUS_SIZE}"
    kind, _, count = spec.partition(":")
    if kind != "random":
        raise CLIError(EXIT_INPUT, f"コーパス指定を解釈できません: {spec}")
    try:
        size = int(count) if count else settings.CORPUS_SIZE
    except ValueError as e:
        raise CLIError(EXIT_INPUT, f"コーパスの大きさを解釈できません: {spec}") from e
    if size < 1:
        raise CLIError(EXIT_INPUT, f"コーパスの大きさは 1 以上である必要があります: {size}")
    return build_random_corpus(size, seed)


def cmd_audit(args: argparse.Namespace) -> int:
    vf = ValueFunction.parse(args.value_function)
    seed = settings.DEFAULT_SEED if args.seed is None else args.seed
    corpus = _parse_corpus(args, seed)
    reports = audit(vf, corpus, seed)
    _emit(_report("audit", [r.model_dump(mode="json") for r in reports], seed).model_dump(mode="json"), args.output)
    _summary(
        [
            {
                "axiom": r.axiom,
                "verdict": r.verdict.value,
                "max_violation": r.max_violation,
                "witness": None if r.witness is None else r.witness["values"],
            }
            for r in reports
        ]
    )
    if matches_profile(vf, reports):
        print(f"✅ {vf.name}: 期待どおりのプロファイルです", file=sys.stderr)
        return EXIT_OK
    print(f"❌ {vf.name}: 期待されるプロファイルと一致しません", file=sys.stderr)
    return EXIT_MISMATCH


def _stage_params(args: argparse.Namespace) -> Dict[str, Any]:
    params = {}
    for key in ("x1", "x2", "a", "alpha", "spectator", "degeneracy", "depth", "n_max"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    return params


def cmd_verify(args: argparse.Namespace) -> int:
    seed = settings.DEFAULT_SEED if args.seed is None else args.seed
    if args.jobs < 1:
        raise CLIError(EXIT_INPUT, f"--jobs は 1 以上である必要があります: {args.jobs}")
    reports = verify_stages(args.stages, _stage_params(args), seed, jobs=args.jobs)
    _emit(_report("verify", [r.model_dump(mode="json") for r in reports], seed).model_dump(mode="json"), args.output)
    _summary(
        [
            {
                "stage": r.stage_id,
                "outcome": r.outcome.value,
                "checks": len(r.checks),
                "failed": sum(not c.passed for c in r.checks),
            }
            for r in reports
        ]
    )
    if all(r.as_expected for r in reports):
        return EXIT_OK
    return EXIT_MISMATCH


def cmd_demo(args: argparse.Namespace) -> int:
    multiplicity = settings.DEVICE_MULTIPLICITY if args.multiplicity is None else args.multiplicity
    report = device_pair_demo(multiplicity)
    _emit(_report("demo", [report.model_dump(mode="json")]).model_dump(mode="json"), args.output)
    _summary([{"check": c.description, "lhs": c.lhs, "rhs": c.rhs, "passed": c.passed} for c in report.checks])
    return EXIT_OK if report.as_expected else EXIT_MISMATCH


# === 引数解析 ===
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qgame",
        description="量子ゲームの決定理論的検証ツール",
    )
    parser.add_argument("--tol", type=float, default=None, help="数値許容誤差（QGAME_TOL より優先）")
    parser.add_argument("--log-level", default=None, help="ログレベル（既定: settings.LOG_LEVEL）")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("canonicalize", help="ゲームを正準形にする")
    p.add_argument("input")
    p.add_argument("--output")
    p.set_defaults(handler=cmd_canonicalize)

    p = sub.add_parser("equivalent", help="2つのゲームが同値か判定する")
    p.add_argument("input_a")
    p.add_argument("input_b")
    p.add_argument("--output")
    p.set_defaults(handler=cmd_equivalent)

    p = sub.add_parser("audit", help="価値関数の公理監査")
    p.add_argument("value_function", help="born | branch-count | weight-power:α | table:x=t,...")
    p.add_argument("--seed", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--corpus", help="random:N")
    group.add_argument("--demo", help="device-pair:M | stage3-split")
    p.add_argument("--output")
    p.set_defaults(handler=cmd_audit)

    p = sub.add_parser("verify", help="証明ステージの検証")
    p.add_argument("stages", nargs="+", help=f"all または {' '.join(STAGE_IDS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--x1", type=float)
    p.add_argument("--x2", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--spectator", type=float, help="S1 の3次元埋め込みの第3固有値")
    p.add_argument("--degeneracy", type=int, help="S1 の縮退ケースの固有空間の次元")
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("demo", help="デモ")
    p.add_argument("name", choices=["device-pair"])
    p.add_argument("--multiplicity", type=int)
    p.add_argument("--output")
    p.set_defaults(handler=cmd_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = (args.log_level or settings.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"❌ 未知のログレベル: {level}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    original_tol = settings.TOL
    if args.tol is not None:
        if not args.tol > 0:
            print(f"❌ --tol は正の値である必要があります: {args.tol}", file=sys.stderr)
            return EXIT_INPUT
        settings.TOL = args.tol
    try:
        return args.handler(args)
    except CLIError as e:
        print(f"❌ {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"❌ 入力エラー: {e}", file=sys.stderr)
        return EXIT_INPUT
    except QGameError as e:
        logger.error("内部エラー: %s", e)
        print(f"❌ 内部エラー: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception("予期しないエラー")
        print(f"❌ 予期しないエラー: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        settings.TOL = original_tol


if __name__ == "__main__":
    sys.exit(main())
