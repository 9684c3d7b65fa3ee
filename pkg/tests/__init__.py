"""
Gaussian Head Avatar のテストパッケージ

共通の補助は conftest.py（乱数・点群の生成）と gradcheck.py（中心差分による勾配検査）にある。
"""
