"""
Storage Module
JSON, npz and CSV persistence for every artifact the toolkit reads or writes
"""

import json
import os
from typing import Any, Dict

import numpy as np
import pandas as pd

from utils.errors import ConfigError
from utils.logger import setup_logger

logger = setup_logger('Storage')


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _register(path: str, session):
    if session is not None:
        session.register_output(path)
    else:
        logger.log_output(path)


def save_json(data: Dict[str, Any], path: str, session=None) -> str:
    """Save a JSON document with stable formatting"""
    _ensure_parent(path)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=False)
        f.write("\n")
    _register(path, session)
    return path


def load_json(path: str) -> Dict[str, Any]:
    """Load a JSON document, reporting the failing line on syntax errors"""
    if not os.path.exists(path):
        raise ConfigError("file not found", path, None)
    with open(path, 'r') as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", path, e.lineno) from e


def save_array(array: np.ndarray, path: str, header: Dict[str, Any], session=None) -> str:
    """
    Save a real array as .npz together with a JSON header next to it

    Args:
        array: data, stored row-major
        path: target .npz path
        header: metadata written to <path without .npz>.json

    Returns:
        The .npz path
    """
    _ensure_parent(path)
    np.savez(path, data=np.ascontiguousarray(array, dtype=float))
    header_path = os.path.splitext(path)[0] + ".json"
    with open(header_path, 'w') as f:
        json.dump(header, f, indent=2)
    _register(path, session)
    _register(header_path, session)
    return path


def load_array(path: str):
    """Inverse of save_array: returns (array, header)"""
    if not os.path.exists(path):
        raise ConfigError("file not found", path, None)
    with np.load(path) as archive:
        array = np.array(archive["data"])
    header = load_json(os.path.splitext(path)[0] + ".json")
    return array, header


def save_table(table: pd.DataFrame, path: str, session=None) -> str:
    """Save a table as CSV (no index column)"""
    _ensure_parent(path)
    table.to_csv(path, index=False, float_format="%.10g")
    _register(path, session)
    return path


def load_table(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise ConfigError("file not found", path, None)
    return pd.read_csv(path)
