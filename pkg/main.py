"""densitybench - メインエントリーポイント"""

import asyncio
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

# プロジェクトルートをPythonパスに追加
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from densitybench import __version__
from densitybench.cli import run_cli

LOG_FILE_NAME = "densitybench.log"
LOG_MAX_BYTES = 10 * 1024 * 1024
LOG_MAX_FILES = 10


def setup_logging(log_level: str = "INFO", log_dir: Path = Path("logs")):
    """
    ログ設定をセットアップ

    標準出力は CLI の表出力に使うので、コンソールのログは標準エラーに出す。
    """
    log_dir.mkdir(parents=True, exist_ok=True)
    file_handler = RotatingFileHandler(
        log_dir / LOG_FILE_NAME,
        maxBytes=LOG_MAX_BYTES,
        backupCount=LOG_MAX_FILES - 1,  # 現在+過去9件
        encoding="utf-8"
    )
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=[logging.StreamHandler(sys.stderr), file_handler],
    )
    logging.getLogger("asyncio").setLevel(logging.WARNING)
    logging.debug(f"Logging to {log_dir / LOG_FILE_NAME} (rotation {LOG_MAX_BYTES // (1024 * 1024)}MB x {LOG_MAX_FILES})")


def cleanup_old_logs(log_dir: Path, max_files: int = LOG_MAX_FILES) -> int:
    """
    ローテーションで残った古いログファイルを削除

    Args:
        log_dir: ログディレクトリ
        max_files: 保持する最大ファイル数

    Returns:
        削除したファイル数
    """
    # 更新時刻の新しい順
    log_files = sorted(log_dir.glob(f"{LOG_FILE_NAME}*"), key=lambda f: f.stat().st_mtime, reverse=True)
    deleted = 0
    for path in log_files[max_files:]:
        try:
            path.unlink()
            deleted += 1
        except OSError as e:
            logging.warning(f"Failed to delete log file {path.name}: {e}")
    if deleted:
        logging.info(f"Log cleanup: deleted {deleted} old files")
    return deleted


def check_environment():
    """起動時に読み込む環境変数の検証（不正な値は無視して警告）"""
    threads = os.getenv("DENSITYBENCH_THREADS")
    if threads is not None and not threads.strip().isdigit():
        logging.warning(f"Ignoring non-numeric DENSITYBENCH_THREADS={threads!r}")
        del os.environ["DENSITYBENCH_THREADS"]


async def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数（終了コードを返す）"""
    # LOG_LEVEL を .env から取るためロギング設定より先に読み込む
    env_loaded = load_dotenv(Path(".env"))
    log_dir = Path(os.getenv("DENSITYBENCH_LOG_DIR", "logs"))
    setup_logging(os.getenv("LOG_LEVEL", "INFO"), log_dir)
    cleanup_old_logs(log_dir)
    logging.info(f"densitybench v{__version__} starting (.env {'loaded' if env_loaded else 'not found'})")
    check_environment()

    try:
        code = await run_cli(argv)
    except KeyboardInterrupt:
        logging.info("Received keyboard interrupt, shutting down...")
        code = 2
    logging.info(f"densitybench finished with exit code {code}")
    return code


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        print("\nStopped by user", file=sys.stderr)
        sys.exit(2)
