import json
import os
from datetime import datetime

STATUS_ICONS = {
    "info": "📝",
    "progress": "🔄",
    "success": "✅",
    "warning": "⚠️",
    "error": "❌",
}


def status(message, kind="info"):
    print(f"{STATUS_ICONS.get(kind, '📝')} {message}")


def _jsonable(value):
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


class RunLogger:
    """Line-delimited JSON event log with console status lines"""

    def __init__(self, path=None, quiet=False, timestamps=False):
        self.path = path
        self.quiet = quiet
        self.timestamps = timestamps
        if path:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            open(path, "w").close()

    def event(self, name, **fields):
        record = {"event": name}
        if self.timestamps:
            record["time"] = datetime.now().isoformat()
        record.update({key: _jsonable(value) for key, value in fields.items()})
        if self.path:
            with open(self.path, "a") as handle:
                handle.write(json.dumps(record) + "\n")
        return record

    def status(self, message, kind="info"):
        if not self.quiet:
            status(message, kind)


def read_events(path, name=None):
    with open(path) as handle:
        events = [json.loads(line) for line in handle if line.strip()]
    return [e for e in events if name is None or e.get("event") == name]
