"""
コア機能パッケージ
"""

from src.core.gaussian_cloud import Camera, GaussianCloud, PoseExpression
from src.core.rasterizer import render_fast
from src.core.splat import render_oracle

__all__ = ["Camera", "GaussianCloud", "PoseExpression", "render_fast", "render_oracle"]
