"""
Shared config readers for the pipelines
"""

from typing import Optional

import numpy as np

from tools.forward_model import FourierOperator, PSFOperator
from tools.phase_space import Configuration, TimeGrid
from utils.config import ConfigDocument
from utils.errors import DomainError


def read_grid(doc: ConfigDocument, d: int = 1, default_K: int = 2, default_tau: float = 0.5) -> TimeGrid:
    K = doc.require_int("K", default_K, minimum=1)
    tau = doc.require_positive("tau", default_tau)
    return TimeGrid(K, tau, d)


def read_fourier(doc: ConfigDocument, grid: TimeGrid, default_f_c: int = 20) -> FourierOperator:
    return FourierOperator(doc.require_int("f_c", default_f_c, minimum=1), grid)


def read_psf(doc: ConfigDocument, grid: TimeGrid) -> PSFOperator:
    section = ConfigDocument(doc.section("psf"), doc.text, doc.path)
    return PSFOperator(
        section.require_positive("sigma", 0.04),
        section.require_int("width", 25, minimum=1),
        section.require_int("height", 25, minimum=1),
        section.require_positive("pitch_mm", 0.04),
        grid,
    )


def read_configuration(doc: ConfigDocument, grid: TimeGrid, key: str = "configuration") -> Optional[Configuration]:
    """Inline particle list on the command grid, None when absent"""
    data = doc.get(key)
    if data is None:
        return None
    if not isinstance(data, dict) or "particles" not in data:
        raise doc.error(key, "must be an object with a 'particles' list")
    payload = dict(data, K=grid.K, tau=grid.tau, d=grid.d)
    try:
        return Configuration.from_dict(payload)
    except (DomainError, KeyError, TypeError, ValueError) as e:
        raise doc.error(key, f"is invalid: {e}") from e


def check_header(doc: ConfigDocument, header: dict, keys=("f_c", "K", "tau")):
    """Values given in the config must agree with the measurement file header"""
    for key in keys:
        if key in doc.data and key in header and not np.isclose(float(doc.data[key]), float(header[key])):
            raise doc.error(key, f"= {doc.data[key]} does not match the measurement header ({header[key]})")


def require_mode(doc: ConfigDocument, key: str, allowed, default: str) -> str:
    value = doc.get(key, default)
    if value not in allowed:
        raise doc.error(key, f"must be one of {list(allowed)}, got {value!r}")
    return value


def section_doc(doc: ConfigDocument, key: str) -> ConfigDocument:
    return ConfigDocument(doc.section(key), doc.text, doc.path)
