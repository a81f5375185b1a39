"""
Certify Pipeline - certificate construction, grid verification and stability report
"""

import time
from typing import Dict

import numpy as np

from pipelines.common import read_configuration, read_grid, require_mode, section_doc
from tools.certificates import (
    SEPARATION_CONSTANT,
    SignVector,
    StabilityInputs,
    build_perturbed_certificate,
    build_static_average,
    check_stability_conditions,
    tune_perturbation,
    verify_certificate,
)
from tools.phase_space import Configuration, Particle, detect_ghosts
from utils.config import ConfigDocument
from utils.logger import log_stage_complete, log_stage_error, log_stage_start, setup_logger
from utils.session import RunSession
from utils.storage import save_json

logger = setup_logger('CertifyPipeline')


class CertifyPipeline:
    """
    Builds a static-average or perturbed certificate for a d = 1 configuration,
    verifies it on a grid and optionally checks the stability conditions
    """

    def __init__(self):
        self.name = "Certify Pipeline"
        logger.info(f"✅ {self.name} initialized")

    def execute(self, doc: ConfigDocument, session: RunSession) -> Dict:
        log_stage_start(self.name, {"construction": doc.get("construction", "static_average"),
                                    "f_c": doc.get("f_c", 128)})
        started = time.perf_counter()
        try:
            grid = read_grid(doc, 1, default_K=1)
            f_c = doc.require_int("f_c", 128, minimum=1)
            construction = require_mode(doc, "construction", ("static_average", "perturbed"), "static_average")

            # Step 1: configuration
            logger.info("Step 1: Building configuration")
            cfg = read_configuration(doc, grid)
            if cfg is None:
                cfg = self._equispaced(doc, grid, f_c)
            eta = SignVector(tuple(doc.get("eta", [1.0] * len(cfg))))
            ghosts = detect_ghosts(cfg, grid.frames) if len(cfg) >= grid.n_frames else []
            logger.info(f"🔍 {len(ghosts)} ghost particle(s) over all frames")

            # Step 2: certificate
            logger.info(f"Step 2: Building {construction} certificate")
            margin = doc.require_positive("margin", 1e-3)
            resolution = doc.get("grid_resolution")
            epsilon = None
            if construction == "perturbed":
                if doc.get("tune_margin") is not None:
                    epsilon = tune_perturbation(cfg, f_c, doc.require_positive("tune_margin"), resolution)
                else:
                    epsilon = doc.require_nonnegative("epsilon", 0.08)
                cert = build_perturbed_certificate(cfg, eta, epsilon, f_c)
            else:
                cert = build_static_average(cfg, eta, doc.get("frames"), f_c)

            # Step 3: verification
            logger.info("Step 3: Verifying certificate on the phase-space grid")
            report = verify_certificate(cert, cfg, eta, resolution, margin)
            outputs = {
                "certificate": save_json(cert.to_dict(), session.path("certificate.json"), session),
                "verification": save_json(dict(report.to_dict(), epsilon=epsilon),
                                          session.path("verification.json"), session),
            }

            # Step 4: stability (optional)
            stability = None
            if doc.get("stability") is not None:
                logger.info("Step 4: Checking stability conditions")
                section = section_doc(doc, "stability")
                inputs = StabilityInputs(section.require_positive("delta_x"), section.require_positive("delta_v"),
                                         f_c, cfg)
                stability = check_stability_conditions(inputs, section.get("grid_resolution"))
                outputs["stability"] = save_json(stability.to_dict(), session.path("stability.json"), session)

            session.record_timing("certify", time.perf_counter() - started)
            log_stage_complete(self.name, f"(passed={report.passed}, violations={report.n_violations})")
            return dict(status="success", passed=report.passed, n_violations=report.n_violations,
                        n_ghosts=len(ghosts), **outputs)

        except Exception as e:
            log_stage_error(self.name, e)
            session.add_error(e)
            return {"status": "failed", "error": str(e), "exception": e}

    def _equispaced(self, doc: ConfigDocument, grid, f_c: int) -> Configuration:
        """Three static particles around 0.5, spacing defaulting to 1.87/f_c"""
        spacing = doc.require_positive("spacing", SEPARATION_CONSTANT / f_c)
        xs = 0.5 + spacing * np.array([-1.0, 0.0, 1.0])
        return Configuration(tuple(Particle((float(x),), (0.0,), 1.0) for x in xs), grid)
