"""
ユーティリティパッケージ
"""

from src.utils.checkpoint import CheckpointFile
from src.utils.config import Config
from src.utils.file_handler import FileHandler

__all__ = ["CheckpointFile", "Config", "FileHandler"]
