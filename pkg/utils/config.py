"""
Configuration Module
Environment settings (.env) and JSON command configs with line-precise validation
"""

import json
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from utils.errors import ConfigError

# Load environment variables
load_dotenv()


@dataclass(frozen=True)
class Settings:
    """Process-wide settings read from the environment"""
    log_level: str = "INFO"
    log_file: Optional[str] = None
    threads: int = 1
    output_dir: str = "runs"
    seed: int = 0

    @classmethod
    def from_env(cls) -> "Settings":
        threads = os.getenv("DYNSPIKE_THREADS")
        return cls(
            log_level=os.getenv("DYNSPIKE_LOG_LEVEL", "INFO"),
            log_file=os.getenv("DYNSPIKE_LOG_FILE"),
            threads=int(threads) if threads else (os.cpu_count() or 1),
            output_dir=os.getenv("DYNSPIKE_OUTPUT_DIR", "runs"),
            seed=int(os.getenv("DYNSPIKE_SEED", "0")),
        )


class ConfigDocument:
    """
    A parsed JSON config that remembers its source text
    so validation errors can point at the offending line
    """

    def __init__(self, data: Dict[str, Any], text: str = "", path: Optional[str] = None):
        if not isinstance(data, dict):
            raise ConfigError("top-level config must be a JSON object", path, 1)
        self.data = data
        self.text = text
        self.path = path

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConfigDocument":
        return cls(data, json.dumps(data, indent=2), None)

    def line_of(self, key: str) -> Optional[int]:
        """1-based line of the first occurrence of "key": in the source text"""
        match = re.search(r'"%s"\s*:' % re.escape(key), self.text)
        if match is None:
            return None
        return self.text.count("\n", 0, match.start()) + 1

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"'{key}' {message}", self.path, self.line_of(key))

    def get(self, key: str, default: Any = None) -> Any:
        return self.data.get(key, default)

    def section(self, key: str) -> Dict[str, Any]:
        """Sub-object of the config, empty when absent"""
        value = self.data.get(key, {})
        if not isinstance(value, dict):
            raise self.error(key, "must be a JSON object")
        return value

    def require(self, key: str) -> Any:
        if key not in self.data:
            raise ConfigError(f"missing required key '{key}'", self.path, None)
        return self.data[key]

    def require_int(self, key: str, default: Optional[int] = None, minimum: Optional[int] = None) -> int:
        value = self.data.get(key, default)
        if value is None:
            raise ConfigError(f"missing required key '{key}'", self.path, None)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"must be an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be >= {minimum}, got {value}")
        return value

    def require_positive(self, key: str, default: Optional[float] = None) -> float:
        value = self.data.get(key, default)
        if value is None:
            raise ConfigError(f"missing required key '{key}'", self.path, None)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"must be a number, got {value!r}")
        if not value > 0:
            raise self.error(key, f"must be > 0, got {value}")
        return float(value)

    def require_nonnegative(self, key: str, default: Optional[float] = None) -> float:
        value = self.data.get(key, default)
        if value is None:
            raise ConfigError(f"missing required key '{key}'", self.path, None)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise self.error(key, f"must be a number >= 0, got {value!r}")
        return float(value)

    def override(self, **values: Any) -> "ConfigDocument":
        """Apply command-line overrides (None values are ignored)"""
        merged = dict(self.data)
        merged.update({k: v for k, v in values.items() if v is not None})
        return ConfigDocument(merged, self.text, self.path)


def load_config(path: str) -> ConfigDocument:
    """Load a JSON config file, reporting syntax errors with line/column"""
    if not os.path.exists(path):
        raise ConfigError("config file not found", path, None)
    with open(path, 'r') as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", path, e.lineno) from e
    return ConfigDocument(data, text, path)
