import json
import os
import threading
from datetime import datetime

import numpy as np

LOG_FILE = os.environ.get("ISAC_LOG_FILE", "pipeline_execution.log")

LEVELS = {"DEBUG": 10, "INFO": 20, "WARNING": 30, "ERROR": 40}
_threshold = LEVELS["INFO"]


def set_log_level(level):
    global _threshold
    _threshold = LEVELS[level.upper()]


def ts_print(msg, level="INFO"):
    if LEVELS.get(level, 20) < _threshold:
        return
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    print(f"[{timestamp}] {msg}", flush=True)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, complex):
        return [value.real, value.imag]
    return str(value)


class PipelineLogger:
    _initialized = False
    _lock = threading.Lock()
    enabled = True

    @staticmethod
    def log_event(event_type, data):
        if not PipelineLogger.enabled:
            return
        processed_content = {}
        for k, v in data.items():
            if isinstance(v, str) and (
                v.strip().startswith("{") or v.strip().startswith("[")
            ):
                try:
                    processed_content[k] = json.loads(v)
                except json.JSONDecodeError:
                    processed_content[k] = v
            else:
                processed_content[k] = v

        log_entry = {
            "timestamp": datetime.now().isoformat(),
            "type": event_type,
            "content": processed_content,
        }
        text = (
            f"\n{'='*30} {event_type} {'='*30}\n"
            + json.dumps(log_entry, indent=4, default=_jsonable, ensure_ascii=False)
            + "\n"
        )
        # sweeps log from worker threads; first-write truncation and appends must not interleave
        try:
            with PipelineLogger._lock:
                mode = "w" if not PipelineLogger._initialized else "a"
                PipelineLogger._initialized = True
                with open(LOG_FILE, mode, encoding="utf-8") as f:
                    f.write(text)
        except OSError as e:
            ts_print(f"⚠️ Could not write event log {LOG_FILE}: {e}", level="WARNING")
