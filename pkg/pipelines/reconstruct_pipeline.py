"""
Reconstruct Pipeline - dynamic or single-frame recovery from a measurement file
"""

import os
import time
from typing import Dict

import numpy as np

from pipelines.common import check_header, require_mode
from tools.forward_model import FourierOperator, FrameStack, MeasurementTensor, PSFOperator
from tools.phase_space import TimeGrid
from tools.solver import SolverConfig, solve_dynamic, solve_static
from utils.config import ConfigDocument
from utils.logger import log_stage_complete, log_stage_error, log_stage_start, setup_logger
from utils.session import RunSession
from utils.storage import load_array, load_json, save_json

logger = setup_logger('ReconstructPipeline')


class ReconstructPipeline:
    """Loads measurements, runs the solver and writes the reconstruction"""

    def __init__(self):
        self.name = "Reconstruct Pipeline"
        logger.info(f"✅ {self.name} initialized")

    def execute(self, doc: ConfigDocument, session: RunSession) -> Dict:
        log_stage_start(self.name, {"measurements": doc.get("measurements"), "mode": doc.get("mode", "dynamic")})
        started = time.perf_counter()
        try:
            path = doc.require("measurements")
            if doc.path and not os.path.isabs(path) and not os.path.exists(path):
                path = os.path.join(os.path.dirname(doc.path), path)
            mode = require_mode(doc, "mode", ("dynamic", "static"), "dynamic")

            # Step 1: load measurements and operator
            logger.info(f"Step 1: Loading measurements from {path}")
            data, op = self._load(doc, path)

            # Step 2: solve
            solver_section = doc.section("solver")
            if "tv_bound" not in solver_section:
                raise doc.error("solver", "needs 'tv_bound'")
            cfg = SolverConfig.from_dict(solver_section)
            logger.info(f"Step 2: Running {mode} solver (M={cfg.tv_bound})")
            logger.log_tool_call(f"solve_{mode}", cfg.to_dict())
            if mode == "dynamic":
                recon = solve_dynamic(data, op, cfg)
                payload = recon.to_dict()
                summary = {"n_particles": len(recon), "residual_norm": recon.residual_norm,
                           "converged": recon.converged}
            else:
                k = doc.require_int("frame", 0)
                frame = data.frame(k)
                found = solve_static(frame, op, cfg)
                payload = {"frame": k, "spikes": [{"x": np.atleast_1d(p).tolist(), "w": w} for p, w in found]}
                summary = {"n_particles": len(found)}

            # Step 3: save
            out = save_json(payload, session.path("reconstruction.json"), session)
            session.record_timing("reconstruct", time.perf_counter() - started)
            log_stage_complete(self.name, f"({summary['n_particles']} spikes)")
            return dict(status="success", reconstruction=out, **summary)

        except Exception as e:
            log_stage_error(self.name, e)
            session.add_error(e)
            return {"status": "failed", "error": str(e), "exception": e}

    def _load(self, doc: ConfigDocument, path: str):
        if path.endswith(".npz"):
            frames, header = load_array(path)
            check_header(doc, header, ("K", "tau", "sigma", "width", "height", "pitch_mm"))
            op = PSFOperator.from_header(header)
            return FrameStack(frames, header), op
        tensor = MeasurementTensor.from_dict(load_json(path))
        check_header(doc, tensor.header())
        op = FourierOperator(tensor.f_c, TimeGrid(tensor.K, tensor.tau, 1))
        return tensor, op
