import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np

import pipeline_log
from pipeline_log import PipelineLogger, set_log_level, ts_print


def read_entries():
    with open(pipeline_log.LOG_FILE, "r", encoding="utf-8") as f:
        text = f.read()
    blocks = re.split(r"\n=+ \w+ =+\n", text)
    return [json.loads(b) for b in blocks if b.strip()]


def test_log_event_truncates_then_appends():
    PipelineLogger.log_event("FIRST", {"a": 1})
    PipelineLogger.log_event("SECOND", {"payload": '{"nested": [1, 2]}', "arr": np.array([1.0, 2.0])})
    entries = read_entries()
    assert [e["type"] for e in entries] == ["FIRST", "SECOND"]
    assert entries[1]["content"]["payload"] == {"nested": [1, 2]}
    assert entries[1]["content"]["arr"] == [1.0, 2.0]


def test_disabled_logger_writes_nothing(monkeypatch):
    monkeypatch.setattr(PipelineLogger, "enabled", False)
    PipelineLogger.log_event("IGNORED", {})
    assert not os.path.exists(pipeline_log.LOG_FILE)


def test_ts_print_respects_level(capsys):
    set_log_level("WARNING")
    try:
        ts_print("hidden detail", level="DEBUG")
        ts_print("✅ kept", level="ERROR")
    finally:
        set_log_level("INFO")
    out = capsys.readouterr().out
    assert "hidden detail" not in out
    assert "✅ kept" in out


def test_concurrent_writers_keep_every_entry_whole():
    def write(worker):
        for i in range(25):
            PipelineLogger.log_event("WORKER", {"worker": worker, "i": i, "values": np.arange(20.0)})

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(write, range(8)))
    entries = read_entries()
    assert len(entries) == 200
    seen = {(e["content"]["worker"], e["content"]["i"]) for e in entries}
    assert seen == {(w, i) for w in range(8) for i in range(25)}
