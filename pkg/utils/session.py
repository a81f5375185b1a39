"""
Session and Manifest Module
Handles per-run state, produced outputs and the run manifest
"""

import json
import os
import time
from datetime import datetime
from typing import Any, Dict, List, Optional

from utils.logger import run_logger

TOOL_NAME = "dynamic-spike"
TOOL_VERSION = "1.0.0"


class RunSession:
    """
    State of one command execution
    Keeps errors, written outputs and stage timings
    """

    def __init__(self, command: str = "", output_dir: str = "runs"):
        """Initialize empty session state"""
        self.command = command
        self.output_dir = output_dir
        self.session_id = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.errors: List[Dict[str, str]] = []
        self.outputs: List[str] = []
        self.timings: Dict[str, float] = {}
        self._started = time.perf_counter()
        run_logger.info(f"🆔 Session initialized: {self.session_id} ({command})")

    def path(self, filename: str) -> str:
        """Absolute-or-relative path of an output file inside the run directory"""
        os.makedirs(self.output_dir, exist_ok=True)
        return os.path.join(self.output_dir, filename)

    def register_output(self, path: str):
        """Record a written file (listed in the manifest)"""
        if path not in self.outputs:
            self.outputs.append(path)
        run_logger.log_output(path)

    def record_timing(self, stage: str, seconds: float):
        self.timings[stage] = round(float(seconds), 6)

    def add_error(self, error: BaseException):
        """Add an error to the session"""
        self.errors.append({
            "timestamp": datetime.now().isoformat(),
            "type": type(error).__name__,
            "message": str(error),
        })
        run_logger.error(f"Session Error: {error}")

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self._started


class RunManifest:
    """
    Record of one command run: config snapshot, seed, outputs, timings, status
    Written even when the command fails
    """

    def __init__(self, session: RunSession, config: Optional[Dict[str, Any]] = None,
                 seed: Optional[int] = None):
        self.session = session
        self.config = dict(config or {})
        self.seed = seed
        self.status = "running"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.session.command,
            "session_id": self.session.session_id,
            "config": self.config,
            "seed": self.seed,
            "output_dir": self.session.output_dir,
            "tool": TOOL_NAME,
            "tool_version": TOOL_VERSION,
            "timings": dict(self.session.timings, total=round(self.session.elapsed, 6)),
            "outputs": list(self.session.outputs),
            "status": self.status,
            "errors": list(self.session.errors),
        }

    def write(self, filename: str = "manifest.json") -> str:
        """Save the manifest into the run directory and return its path"""
        path = self.session.path(filename)
        # The manifest lists itself so every file in the directory is accounted for
        self.session.register_output(path)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path
