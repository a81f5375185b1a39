"""
Logging and Observability Module
Provides structured logging for every pipeline stage and solver run
"""

import logging
import json
import os
from typing import Dict, Any, Optional


LOGGER_NAME = "DynamicSpike"


def _json(data: Any) -> str:
    """Render a log payload, falling back to str() for numpy values"""
    return json.dumps(data, indent=2, default=str)


class RunLogger:
    """
    Thin wrapper around a stdlib logger
    Logs stage starts/ends, tool calls, solver iterations and errors
    """

    def __init__(self, name: str = LOGGER_NAME, log_file: Optional[str] = None):
        """Initialize logger with console output and an optional log file"""
        self.logger = logging.getLogger(name)
        level_name = os.getenv("DYNSPIKE_LOG_LEVEL", "INFO").upper()
        self.logger.setLevel(getattr(logging, level_name, logging.INFO))

        # Handlers live on the package logger only, children propagate to it
        if name == LOGGER_NAME and not self.logger.handlers:
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            )
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

            log_file = log_file or os.getenv("DYNSPIKE_LOG_FILE")
            if log_file:
                file_handler = logging.FileHandler(log_file)
                file_handler.setFormatter(formatter)
                self.logger.addHandler(file_handler)

    def log_stage_start(self, stage_name: str, input_data: Dict[str, Any]):
        """Log when a pipeline stage starts execution"""
        self.logger.info(f"🚀 {stage_name} STARTED")
        self.logger.info(f"Input: {_json(input_data)}")

    def log_stage_end(self, stage_name: str, output_data: Dict[str, Any], duration: float):
        """Log when a pipeline stage completes execution"""
        self.logger.info(f"✅ {stage_name} COMPLETED in {duration:.2f}s")
        self.logger.info(f"Output: {_json(output_data)}")

    def log_tool_call(self, tool_name: str, parameters: Dict[str, Any]):
        """Log when a numerical tool is called"""
        self.logger.info(f"🔧 Tool Call: {tool_name} {_json(parameters)}")

    def log_solver_iteration(self, iteration: int, residual: float, support: int):
        """Log one outer iteration of a solver"""
        self.logger.debug(f"iter {iteration:3d}  residual={residual:.3e}  support={support}")

    def log_error(self, stage_name: str, error: Exception):
        """Log errors during stage execution"""
        self.logger.error(f"❌ ERROR in {stage_name}: {str(error)}")

    def log_output(self, path: str):
        """Log a written artifact"""
        self.logger.info(f"💾 Wrote {path}")

    def debug(self, message: str):
        self.logger.debug(message)

    def info(self, message: str):
        self.logger.info(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def error(self, message: str):
        self.logger.error(message)


# Global logger instance
run_logger = RunLogger()


def setup_logger(name: str) -> RunLogger:
    """Setup a child logger for a module or stage"""
    return RunLogger(f"{LOGGER_NAME}.{name}")


def log_stage_start(stage_name: str, input_data: Dict[str, Any]):
    """Log when a stage starts execution"""
    run_logger.log_stage_start(stage_name, input_data)


def log_stage_complete(stage_name: str, message: str = ""):
    """Log when a stage completes execution"""
    run_logger.info(f"✅ {stage_name} COMPLETED {message}")


def log_stage_error(stage_name: str, error: Exception):
    """Log errors during stage execution"""
    run_logger.log_error(stage_name, error)
