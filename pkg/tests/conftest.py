import math
import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートをパスに追加
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.services.games import Game
from src.services.valuation import ValueFunction


@pytest.fixture
def rng():
    """固定シードの乱数生成器"""
    return np.random.default_rng(20240607)


@pytest.fixture
def born():
    return ValueFunction.born()


@pytest.fixture
def equal_game():
    """(1/√2)(e1 + e2)、X = diag(0, 1)、恒等ペイオフ"""
    return Game.diagonal([1 / math.sqrt(2), 1 / math.sqrt(2)], [0.0, 1.0])


@pytest.fixture
def degenerate_game():
    """ψ = (1/√3)(1, 1, 1)、X = diag(1, 1, 2)、恒等ペイオフ"""
    return Game.diagonal([1 / math.sqrt(3)] * 3, [1.0, 1.0, 2.0])


@pytest.fixture
def quarter_game():
    """√(1/4)e1 + √(3/4)e2、X = diag(0, 1)"""
    return Game.diagonal([0.5, math.sqrt(3) / 2], [0.0, 1.0])
