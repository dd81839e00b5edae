"""
ゲームドキュメントの読み書き - JSON ⇔ Game の変換と位置情報付きエラー
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from src.models.schemas import GameDocument, MatrixObservable, PayoffEntry
from src.services.errors import DocumentError, ValidationError
from src.services.games import Game, PayoffFunction
from src.services.linalg import HermitianOperator, StateVector

logger = logging.getLogger(__name__)


def _complex(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def _pairs(values) -> List[List[float]]:
    arr = np.asarray(values, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def parse_document(text: str) -> GameDocument:
    """JSON テキストを GameDocument に検証して変換する"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DocumentError(f"JSON の構文エラー: {e.msg}", location=f"line {e.lineno}, column {e.colno}") from e
    try:
        return GameDocument.model_validate(data)
    except PydanticValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or None
        raise DocumentError(first["msg"], location=location) from e


def game_from_document(doc: GameDocument) -> Game:
    """ドキュメントを検証済みの Game に変換する"""
    if len(doc.state) != doc.dim:
        raise DocumentError(f"状態の長さ {len(doc.state)} が dim={doc.dim} と一致しません", location="state")
    try:
        state = StateVector(_complex(doc.state))
    except ValidationError as e:
        raise DocumentError(str(e), location="state") from e

    try:
        if isinstance(doc.observable, MatrixObservable):
            rows = doc.observable.matrix
            ragged = [i for i, row in enumerate(rows) if len(row) != doc.dim]
            if len(rows) != doc.dim or ragged:
                raise DocumentError(
                    f"行列は {doc.dim}×{doc.dim} である必要があります（行数 {len(rows)}、長さの異なる行 {ragged}）",
                    location="observable.matrix",
                )
            observable = HermitianOperator(_complex(rows))
        else:
            body = doc.observable.spectral
            for i, basis in enumerate(body.projector_bases):
                ragged = [j for j, v in enumerate(basis) if len(v) != doc.dim]
                if not basis or ragged:
                    raise DocumentError(
                        f"基底は dim={doc.dim} の長さのベクトル1本以上からなる必要があります（長さの異なるベクトル {ragged}）",
                        location=f"observable.spectral.projector_bases[{i}]",
                    )
            bases = [[_complex(v) for v in basis] for basis in body.projector_bases]
            observable = HermitianOperator.from_spectral(body.eigenvalues, bases)
    except DocumentError:
        raise
    except ValidationError as e:
        raise DocumentError(str(e), location="observable") from e

    try:
        payoff = PayoffFunction(tuple((p.eigenvalue, p.value) for p in doc.payoff))
        return Game(state, observable, payoff)
    except ValidationError as e:
        raise DocumentError(str(e), location="payoff") from e


def load_game(path: Union[str, Path]) -> Game:
    """ファイルからゲームを読み込む"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DocumentError(f"ファイルを読み込めません: {e.strerror}", location=str(path)) from e
    game = game_from_document(parse_document(text))
    logger.info("✅ ゲームを読み込みました: %s (dim=%d)", path, game.dim)
    return game


def game_to_document(game: Game) -> GameDocument:
    """Game を行列形式のドキュメントにする（ペイオフはスペクトル上に制限）"""
    return GameDocument(
        dim=game.dim,
        state=_pairs(game.state.amps),
        observable=MatrixObservable(matrix=_pairs(game.observable.entries)),
        payoff=[PayoffEntry(eigenvalue=x, value=game.payoff(x)) for x in game.spectrum],
    )


def game_to_dict(game: Game) -> Dict[str, Any]:
    return game_to_document(game).model_dump(mode="json")


def dump_json(payload: Any) -> str:
    """レポート出力用の JSON 文字列（インデント2、非 ASCII をそのまま出力）"""
    return json.dumps(payload, indent=2, ensure_ascii=False)
