from typing import Any, Dict, List, Optional
from datetime import datetime
import json
import logging
import os


class RunHistory:
    """Record of dispatched commands; persisted only when a file is given"""

    def __init__(self, history_file: Optional[str] = None):
        self.logger = logging.getLogger(__name__)
        self.history_file = history_file or None
        self.history: List[Dict[str, Any]] = []
        self.load_history()

    def load_history(self):
        """Load run history from file"""
        if not self.history_file:
            return
        try:
            if os.path.exists(self.history_file):
                with open(self.history_file, 'r') as f:
                    self.history = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            self.logger.warning(f"Error loading history: {e}")
            self.history = []

    def save_history(self):
        """Save run history to file"""
        if not self.history_file:
            return
        try:
            with open(self.history_file, 'w') as f:
                json.dump(self.history, f, indent=2)
        except OSError as e:
            self.logger.error(f"Error saving history: {e}")

    def add_run(self, command: str, args: Dict[str, Any], status: str, summary: str):
        entry = {
            "timestamp": datetime.now().isoformat(),
            "command": command,
            "args": {key: _jsonable(value) for key, value in args.items()},
            "status": status,
            "summary": summary
        }
        self.history.append(entry)
        self.save_history()
        return entry

    def get_last_run(self) -> Optional[Dict[str, Any]]:
        return self.history[-1] if self.history else None

    def get_run_history(self, limit: int = 10) -> List[Dict[str, Any]]:
        return self.history[-limit:]

    def search_history(self, query: str) -> List[Dict[str, Any]]:
        """Runs whose command or argument values mention the query"""
        query = query.lower()
        return [
            entry for entry in self.history
            if query in entry["command"].lower() or
            any(query in str(value).lower() for value in entry["args"].values())
        ]

    def get_failed_runs(self) -> List[Dict[str, Any]]:
        return [entry for entry in self.history if entry["status"] == "error"]

    def clear_history(self):
        self.history = []
        self.save_history()


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)
