"""
Simulate Pipeline - forward synthesis of Fourier or PSF measurements
"""

import time
from typing import Dict

import numpy as np

from pipelines.common import read_configuration, read_fourier, read_grid, read_psf, require_mode, section_doc
from tools.experiments import TrialSpec, random_configuration
from tools.forward_model import (
    CurvedTrajectorySpec,
    NoiseSpec,
    add_noise,
    apply_fourier,
    apply_fourier_curved,
    apply_psf,
)
from tools.phase_space import Configuration, Particle
from utils.config import ConfigDocument
from utils.logger import log_stage_complete, log_stage_error, log_stage_start, setup_logger
from utils.session import RunSession
from utils.storage import save_array, save_json

logger = setup_logger('SimulatePipeline')


class SimulatePipeline:
    """
    Builds a ground-truth configuration (inline or random), measures it and
    writes the measurements next to the truth
    """

    def __init__(self):
        self.name = "Simulate Pipeline"
        logger.info(f"✅ {self.name} initialized")

    def execute(self, doc: ConfigDocument, session: RunSession) -> Dict:
        seed = doc.require_int("seed", 0)
        log_stage_start(self.name, {"mode": doc.get("mode", "fourier"), "seed": seed})
        started = time.perf_counter()
        try:
            mode = require_mode(doc, "mode", ("fourier", "psf"), "fourier")
            d = 1 if mode == "fourier" else 2
            grid = read_grid(doc, d)
            rng = np.random.default_rng(seed)

            # Step 1: ground truth
            logger.info("Step 1: Building ground-truth configuration")
            cfg = read_configuration(doc, grid)
            if cfg is None:
                cfg = self._random(doc, grid, rng)

            # Step 2: forward model
            logger.info(f"Step 2: Applying {mode} forward model to {len(cfg)} particles")
            noise = NoiseSpec(section_doc(doc, "noise").require_nonnegative("alpha", 0.0), seed)
            if mode == "fourier":
                op = read_fourier(doc, grid)
                curvature = self._curvature(doc)
                y = apply_fourier(op, cfg) if curvature is None else apply_fourier_curved(op, cfg, curvature)
                y = add_noise(y, noise)
                measurement_path = save_json(y.to_dict(), session.path("measurements.json"), session)
            else:
                op = read_psf(doc, grid)
                stack = add_noise(apply_psf(op, cfg), noise)
                measurement_path = save_array(stack.frames, session.path("frames.npz"), op.header(), session)

            # Step 3: truth
            truth_path = save_json(cfg.to_dict(), session.path("truth.json"), session)
            session.record_timing("simulate", time.perf_counter() - started)
            log_stage_complete(self.name, f"({len(cfg)} particles)")
            return {
                "status": "success",
                "measurements": measurement_path,
                "truth": truth_path,
                "n_particles": len(cfg),
            }

        except Exception as e:
            log_stage_error(self.name, e)
            session.add_error(e)
            return {"status": "failed", "error": str(e), "exception": e}

    def _random(self, doc: ConfigDocument, grid, rng) -> Configuration:
        random_section = doc.section("random")
        spec_keys = {k: v for k, v in random_section.items() if k != "v_max"}
        spec = TrialSpec.from_dict(dict(spec_keys, K=grid.K, tau=grid.tau,
                                        f_c=int(doc.get("f_c", 20))))
        if grid.d == 1:
            return random_configuration(spec, rng)
        # PSF truth: speeds bounded by v_max, positions kept inside the field at every frame
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        v_max = float(random_section.get("v_max", 0.1))
        margin = grid.delta * v_max
        particles = []
        for _ in range(n):
            x = rng.uniform(margin, 1 - margin, size=2)
            v = rng.uniform(-v_max, v_max, size=2)
            particles.append(Particle(tuple(x), tuple(v), float(rng.uniform(spec.w_min, spec.w_max))))
        return Configuration(tuple(particles), grid)

    def _curvature(self, doc: ConfigDocument):
        section = doc.section("curvature")
        if not section:
            return None
        if "accelerations" in section:
            return CurvedTrajectorySpec(accelerations=tuple(float(a) for a in section["accelerations"]))
        beta = float(section.get("beta", 0.0))
        return CurvedTrajectorySpec(beta=beta) if beta != 0 else None
