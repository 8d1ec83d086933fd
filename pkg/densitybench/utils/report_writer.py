"""レポート・監査ログの非同期書き込み"""

import asyncio
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping

import aiofiles
import pandas as pd

from .error_handler import DensityBenchError, ErrorCategory, ErrorSeverity

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.10g"


def digest_bytes(data: bytes) -> str:
    """SHA-256 ダイジェスト（16 進）"""
    return hashlib.sha256(data).hexdigest()


def digest_object(obj: Any) -> str:
    """
    JSON 化可能なオブジェクトのダイジェスト

    キー順を固定したシリアライズをハッシュ化するので、内容が同じなら常に同じ値。
    """
    key_string = json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)
    return digest_bytes(key_string.encode("utf-8"))


def file_digest(path: Path) -> str:
    """ファイル内容のダイジェスト"""
    return digest_bytes(Path(path).read_bytes())


def frame_to_csv(frame: pd.DataFrame) -> str:
    """決定論的な CSV 文字列"""
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=str) + "\n"


class ReportWriter:
    """出力ディレクトリへの非同期書き込みとダイジェスト管理"""

    def __init__(self, output_dir: str = "reports"):
        """
        レポートライターを初期化

        Args:
            output_dir: 出力ディレクトリパス

        Raises:
            DensityBenchError: ディレクトリを作成できない
        """
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DensityBenchError(
                f"cannot create output directory {output_dir}: {e}",
                severity=ErrorSeverity.CRITICAL,
                category=ErrorCategory.IO,
                original_error=e
            ) from e

        self.digests: Dict[str, str] = {}
        self._file_locks: Dict[str, asyncio.Lock] = {}
        self._locks_lock = asyncio.Lock()

        logger.info(f"Report writer initialized: dir={self.output_dir}")

    async def _get_file_lock(self, name: str) -> asyncio.Lock:
        """ファイル固有のロックを取得"""
        async with self._locks_lock:
            if name not in self._file_locks:
                self._file_locks[name] = asyncio.Lock()
            return self._file_locks[name]

    async def write_text(self, name: str, content: str) -> Path:
        """
        テキストを書き込みダイジェストを記録

        Args:
            name: 出力ディレクトリからの相対ファイル名
            content: 内容

        Returns:
            書き込んだファイルのパス
        """
        path = self.output_dir / name
        lock = await self._get_file_lock(name)
        async with lock:
            data = content.encode("utf-8")
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                async with aiofiles.open(path, "wb") as f:
                    await f.write(data)
            except OSError as e:
                raise DensityBenchError(
                    f"cannot write {path}: {e}",
                    severity=ErrorSeverity.CRITICAL,
                    category=ErrorCategory.IO,
                    original_error=e
                ) from e
            self.digests[name] = digest_bytes(data)
        logger.debug(f"Wrote {path} ({len(data)} bytes)")
        return path

    async def write_json(self, name: str, obj: Any) -> Path:
        return await self.write_text(name, dumps_json(obj))

    async def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        return await self.write_text(name, frame_to_csv(frame))

    async def write_jsonl(self, name: str, records: Iterable[Mapping[str, Any]]) -> Path:
        """1 行 1 レコードの JSON"""
        lines = [json.dumps(r, sort_keys=True, ensure_ascii=False, default=str) for r in records]
        return await self.write_text(name, "".join(line + "\n" for line in lines))

    def get_stats(self) -> Dict[str, Any]:
        """書き込み済みファイルの一覧"""
        return {
            "output_dir": str(self.output_dir),
            "file_count": len(self.digests),
            "files": dict(sorted(self.digests.items())),
        }
