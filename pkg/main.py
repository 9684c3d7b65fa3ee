#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Gaussian Head Avatar - メインエントリーポイント

単眼動画風の合成データから、変形可能なガウス点群の頭部アバターを学習する
"""

import sys
from pathlib import Path

# プロジェクトルートをsys.pathに追加
project_root = Path(__file__).parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from src.app import AvatarApp


def main():
    """アプリケーションのメインエントリーポイント"""
    app = AvatarApp(sys.argv)
    sys.exit(app.run())


if __name__ == "__main__":
    main()
