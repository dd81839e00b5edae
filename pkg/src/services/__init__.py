# サービス層
