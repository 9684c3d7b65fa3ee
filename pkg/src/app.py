#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
アプリケーション初期化モジュール

サブコマンド gen-data / train / render / eval / export-ply / config を持つ
コマンドラインアプリケーション。
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from src import __version__
from src.core.errors import CheckpointError, ConfigError, NonFiniteError
from src.core.fields import FieldConfig
from src.core.gaussian_cloud import Camera, PoseExpression
from src.core.synthdata import SceneConfig, build_scene, generate_dataset, load_dataset
from src.core.trainer import (
    TrainConfig, evaluate, export_cloud, finetune_frame_latents, fit, init_state,
    load_checkpoint, render_frame,
)
from src.utils.config import PRESETS, Config
from src.utils.file_handler import FileHandler


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class InputError(Exception):
    """ファイル入出力の失敗（終了コード 4）"""


def build_parser() -> argparse.ArgumentParser:
    """コマンドライン引数の定義"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="乱数シード (run.seed)")
    common.add_argument("--threads", type=int, help="タイル処理のワーカー数 (run.threads)")
    common.add_argument("--config", help="設定ファイル (section.key = value)")
    common.add_argument("--preset", default="default", choices=sorted(PRESETS), help="設定プリセット")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="設定値を上書きする（複数指定可）")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="gaussian-head-avatar", description="ガウス点群による頭部アバター")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="合成データセットを生成する")
    gen.add_argument("out_dir", help="出力ディレクトリ")

    train = sub.add_parser("train", parents=[common], help="学習する")
    train.add_argument("dataset", help="データセットディレクトリ")
    train.add_argument("--out", required=True, help="チェックポイント・ログの出力先")
    train.add_argument("--epochs", type=int, help="エポック数 (train.epochs)")
    train.add_argument("--resume", help="再開するチェックポイント")
    train.add_argument("--ablate-param-deform", action="store_true", help="パラメータ変形フィールドを無効にする")
    train.add_argument("--finetune-latents", action="store_true", help="学習中にフレーム係数も更新する")

    render = sub.add_parser("render", parents=[common], help="学習済みモデルで描画する")
    render.add_argument("checkpoint", help="チェックポイント")
    render.add_argument("--dataset", help="係数とカメラを取るデータセット")
    render.add_argument("--latents", help="係数 CSV（--dataset の代わり）")
    render.add_argument("--cameras", help="カメラ JSON（--dataset の代わり）")
    render.add_argument("--frames", type=int, nargs="*", help="描画するフレーム番号（省略時はすべて）")
    render.add_argument("--out", required=True, help="出力ディレクトリ")
    render.add_argument("--oracle", action="store_true", help="検証用レンダラで描画する")
    render.add_argument("--resolution", type=int, help="出力の幅（内部パラメータを比例させる）")

    ev = sub.add_parser("eval", parents=[common], help="評価する")
    ev.add_argument("checkpoint", help="チェックポイント")
    ev.add_argument("dataset", help="データセットディレクトリ")
    ev.add_argument("--split", choices=["train", "heldout", "all"], help="評価するフレーム (eval.split)")
    ev.add_argument("--finetune-latents", type=int, metavar="N", help="RGB 損失のみで係数を N 回微調整する")
    ev.add_argument("--out", help="評価結果 CSV")

    export = sub.add_parser("export-ply", parents=[common], help="点群を PLY に書き出す")
    export.add_argument("checkpoint", help="チェックポイント")
    export.add_argument("out", help="出力 PLY")
    export.add_argument("--dataset", help="姿勢を取るデータセット")
    export.add_argument("--frame", type=int, help="姿勢を取るフレーム番号（省略時は静止姿勢）")
    export.add_argument("--canonical", action="store_true", help="カノニカル空間の点群を書き出す")

    cfg = sub.add_parser("config", parents=[common], help="設定を表示する")
    cfg.add_argument("--dump", action="store_true", help="すべてのキーと有効値を表示する")
    return parser


class AvatarApp:
    """コマンドラインアプリケーションクラス"""

    def __init__(self, argv: List[str]):
        """
        アプリケーションを初期化

        Args:
            argv: コマンドライン引数（先頭はプログラム名）
        """
        self.argv = list(argv)
        self.parser = build_parser()

    def run(self) -> int:
        """
        アプリケーションを実行

        Returns:
            終了コード（0 成功, 2 設定エラー, 3 数値異常, 4 入出力エラー）
        """
        try:
            args = self.parser.parse_args(self.argv[1:])
        except SystemExit as e:
            return EXIT_OK if not e.code else EXIT_CONFIG
        logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

        handler = getattr(self, "cmd_" + args.command.replace("-", "_"))
        try:
            config = self.load_config(args)
            return handler(args, config)
        except ConfigError as e:
            print(f"設定エラー ({e.key}): {e}", file=sys.stderr)
            return EXIT_CONFIG
        except NonFiniteError as e:
            print(f"数値異常のため中断しました: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        except (InputError, CheckpointError, OSError) as e:
            print(f"入出力エラー: {e}", file=sys.stderr)
            return EXIT_IO
        except ValueError as e:
            print(f"設定または入力が不正です: {e}", file=sys.stderr)
            return EXIT_CONFIG

    # ------------------------------------------------------------------
    # 設定
    # ------------------------------------------------------------------

    @staticmethod
    def load_config(args: argparse.Namespace) -> Config:
        """既定値 < プリセット < 設定ファイル < --set < 個別フラグ"""
        config = Config.from_sources(args.preset, args.config, args.overrides)
        if args.seed is not None:
            config.set("run.seed", args.seed)
        if args.threads is not None:
            config.set("run.threads", args.threads)
        if getattr(args, "epochs", None) is not None:
            config.set("train.epochs", args.epochs)
        if getattr(args, "ablate_param_deform", False):
            config.set("fields.deform_enabled", False)
        if getattr(args, "finetune_latents", None) is True:
            config.set("train.finetune_latents", True)
        if getattr(args, "resolution", None) is not None:
            config.set("render.resolution", args.resolution)
        return config

    @staticmethod
    def _check(error: Optional[str]) -> None:
        if error:
            raise InputError(error)

    def _load_state(self, path: str, config: Config):
        state, error = load_checkpoint(path)
        self._check(error)
        state.config = state.config.with_changes(
            threads=config.get("run.threads"),
            progress=config.get("train.progress"),
        )
        return state

    def _load_dataset(self, path: str):
        dataset, error = load_dataset(path)
        self._check(error)
        return dataset

    # ------------------------------------------------------------------
    # サブコマンド
    # ------------------------------------------------------------------

    def cmd_gen_data(self, args: argparse.Namespace, config: Config) -> int:
        scene_config = SceneConfig.from_config(config)
        scene = build_scene(scene_config)
        records, error = generate_dataset(
            scene, args.out_dir, threads=config.get("run.threads"),
            config_digest=config.digest(), progress=config.get("train.progress"),
        )
        self._check(error)
        n_train = sum(1 for record in records if record.split == "train")
        print(
            f"データセットを生成しました: {args.out_dir}\n"
            f"  フレーム: {n_train} (学習) + {len(records) - n_train} (評価), "
            f"{scene_config.width}x{scene_config.height}\n"
            f"  正解点数: {scene.gt_cloud.n_points}, シード: {scene_config.seed}"
        )
        return EXIT_OK

    def cmd_train(self, args: argparse.Namespace, config: Config) -> int:
        dataset = self._load_dataset(args.dataset)
        frames = dataset.split("train")
        for frame in frames:
            _, error = frame.load()
            self._check(error)

        if args.resume:
            state = self._load_state(args.resume, config)
            state.config = state.config.with_changes(epochs=config.get("train.epochs"))
            logger.info("エポック %d から再開します", state.epoch)
        else:
            state = init_state(
                TrainConfig.from_config(config), dataset.rig, dataset.template,
                FieldConfig.from_config(config), frames,
            )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.dump(), encoding="utf-8")

        summaries = fit(state, frames, str(out))
        if summaries:
            last = summaries[-1]
            mean_psnr = float(np.nanmean([row["psnr"] for row in last.rows]))
            print(
                f"学習が完了しました: エポック {state.epoch}, 点数 {state.n_points}\n"
                f"  最終エポックの平均損失 {last.mean_loss:.6f}, 平均 PSNR {mean_psnr:.2f} dB\n"
                f"  チェックポイント: {out / 'checkpoint.npz'}"
            )
        else:
            print(f"学習済みのエポック数 {state.epoch} が指定エポック数以上のため、学習は行いませんでした")
        return EXIT_OK

    def cmd_render(self, args: argparse.Namespace, config: Config) -> int:
        state = self._load_state(args.checkpoint, config)
        if args.dataset:
            items = [(f.index, f.camera, f.latents) for f in self._load_dataset(args.dataset).frames]
        elif args.latents and args.cameras:
            cameras, error = FileHandler.load_cameras(args.cameras)
            self._check(error)
            loaded, error = FileHandler.load_latents(args.latents, state.rig.n_joints)
            self._check(error)
            items = [(i, camera, pose) for i, (camera, pose) in enumerate(zip(cameras, loaded[0]))]
        else:
            raise ConfigError("render.source", "--dataset、または --latents と --cameras を指定してください")
        if args.frames:
            wanted = set(args.frames)
            items = [item for item in items if item[0] in wanted]

        width = config.get("render.resolution")
        out = Path(args.out)
        for index, camera, pose in items:
            camera = rescale_camera(camera, width)
            image = render_frame(state, camera, pose, oracle=args.oracle)
            self._check(FileHandler.save_image(image, str(out / f"render_{index:04d}.png")))
        print(f"{len(items)} 枚を描画しました: {out}" + (" (検証用レンダラ)" if args.oracle else ""))
        return EXIT_OK

    def cmd_eval(self, args: argparse.Namespace, config: Config) -> int:
        state = self._load_state(args.checkpoint, config)
        dataset = self._load_dataset(args.dataset)
        split = args.split or config.get("eval.split")
        frames = dataset.split(split)
        if not frames:
            raise ConfigError("eval.split", f"分割 {split} にフレームがありません")

        steps = args.finetune_latents if args.finetune_latents is not None else config.get("eval.finetune_steps")
        latents = None
        if steps > 0:
            latents = finetune_frame_latents(state, frames, steps, config.get("eval.finetune_lr"))
        result = evaluate(state, frames, latents)

        rows = result.rows + [{"frame": "mean", **result.means}]
        if args.out:
            self._check(FileHandler.save_rows(rows, args.out))
        print(format_table(rows))
        return EXIT_OK

    def cmd_export_ply(self, args: argparse.Namespace, config: Config) -> int:
        state = self._load_state(args.checkpoint, config)
        pose = PoseExpression.zeros(state.rig.n_joints, state.rig.n_expressions)
        if args.frame is not None:
            if not args.dataset:
                raise ConfigError("export.frame", "--frame には --dataset が必要です")
            frames = {f.index: f for f in self._load_dataset(args.dataset).frames}
            if args.frame not in frames:
                raise ConfigError("export.frame", f"フレーム {args.frame} がデータセットにありません")
            pose = frames[args.frame].latents
        cloud = export_cloud(state, pose, canonical=args.canonical)
        self._check(FileHandler.save_ply(cloud, args.out))
        print(f"{cloud.n_points} 点を書き出しました: {args.out} ({cloud.space_tag})")
        return EXIT_OK

    def cmd_config(self, args: argparse.Namespace, config: Config) -> int:
        if args.dump:
            print(config.dump(), end="")
        else:
            print(f"設定ハッシュ: {config.digest()}（--dump で全キーを表示）")
        return EXIT_OK


def rescale_camera(camera: Camera, width: int) -> Camera:
    """幅 width に合わせて縦横比を保ったまま解像度を変える（0 ならそのまま）"""
    if width <= 0 or width == camera.width:
        return camera
    height = max(1, int(round(camera.height * width / camera.width)))
    return camera.rescaled(width, height)


def format_table(rows: List[dict]) -> str:
    """評価結果の表"""
    lines = [f"{'frame':>8} {'L1':>10} {'PSNR':>8} {'SSIM':>8}"]
    for row in rows:
        lines.append(f"{str(row['frame']):>8} {row['l1']:>10.5f} {row['psnr']:>8.2f} {row['ssim']:>8.4f}")
    return "\n".join(lines)
