# データモデル
