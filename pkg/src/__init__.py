"""
Gaussian Head Avatar ソースパッケージ
"""

__version__ = "1.0.0"
__author__ = "Gaussian Head Avatar Team"
