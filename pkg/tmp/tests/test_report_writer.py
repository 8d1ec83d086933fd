"""レポート書き込みのテスト"""

import asyncio
import hashlib
import json

import pandas as pd
import pytest

from densitybench.utils.report_writer import (
    ReportWriter,
    digest_object,
    dumps_json,
    file_digest,
    frame_to_csv,
)


class TestDigests:
    def test_key_order_does_not_matter(self):
        assert digest_object({"a": 1, "b": [1, 2]}) == digest_object({"b": [1, 2], "a": 1})
        assert digest_object({"a": 1}) != digest_object({"a": 2})

    def test_file_digest(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_bytes(b"abc")
        assert file_digest(path) == hashlib.sha256(b"abc").hexdigest()

    def test_csv_is_deterministic(self):
        frame = pd.DataFrame({"model": ["VG", "LN-ATM"], "crps": [1.0 / 3.0, 2.5]})
        text = frame_to_csv(frame)
        assert text == "model,crps\nVG,0.3333333333\nLN-ATM,2.5\n"

    def test_json_sorted(self):
        assert dumps_json({"b": 1, "a": 2}) == '{\n  "a": 2,\n  "b": 1\n}\n'


class TestReportWriter:
    """非同期書き込み"""

    @pytest.mark.asyncio
    async def test_writes_and_records_digests(self, tmp_path):
        writer = ReportWriter(str(tmp_path / "out"))
        await writer.write_json("scoreboard.json", {"models": ["VG"]})
        await writer.write_csv("table6.csv", pd.DataFrame({"model": ["VG"], "ifs": [0.88]}))
        await writer.write_jsonl("audit.jsonl", [{"model": "VG", "pit": 0.4}, {"model": "BATES", "pit": 0.6}])

        out = tmp_path / "out"
        assert json.loads((out / "scoreboard.json").read_text(encoding="utf-8")) == {"models": ["VG"]}
        lines = (out / "audit.jsonl").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["model"] for line in lines] == ["VG", "BATES"]
        for name, digest in writer.digests.items():
            assert file_digest(out / name) == digest

        stats = writer.get_stats()
        assert stats["file_count"] == 3
        assert list(stats["files"]) == ["audit.jsonl", "scoreboard.json", "table6.csv"]

    @pytest.mark.asyncio
    async def test_nested_names(self, tmp_path):
        writer = ReportWriter(str(tmp_path))
        path = await writer.write_text("sub/dir/notes.txt", "hello\n")
        assert path.read_text(encoding="utf-8") == "hello\n"

    @pytest.mark.asyncio
    async def test_concurrent_writes_same_file(self, tmp_path):
        writer = ReportWriter(str(tmp_path))
        contents = [f"version {i}\n" for i in range(10)]
        await asyncio.gather(*(writer.write_text("same.txt", c) for c in contents))
        final = (tmp_path / "same.txt").read_text(encoding="utf-8")
        assert final in contents
        assert writer.digests["same.txt"] == hashlib.sha256(final.encode("utf-8")).hexdigest()

    @pytest.mark.asyncio
    async def test_identical_content_identical_digest(self, tmp_path):
        a = ReportWriter(str(tmp_path / "a"))
        b = ReportWriter(str(tmp_path / "b"))
        frame = pd.DataFrame({"x": [0.1, 0.2]})
        await a.write_csv("t.csv", frame)
        await b.write_csv("t.csv", frame)
        assert a.digests == b.digests
