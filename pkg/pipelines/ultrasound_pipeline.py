"""
Ultrasound Pipeline - phantom synthesis, interval selection, window
reconstruction, aggregation and B-mode
"""

import time
from typing import Dict

from pipelines.common import section_doc
from tools.forward_model import NoiseSpec
from tools.ultrasound import (
    BubbleProcess,
    VesselPhantom,
    WindowSettings,
    bmode_cross_profile,
    default_phantom,
    run_ultrasound,
    score_reconstruction,
)
from utils.config import ConfigDocument
from utils.logger import log_stage_complete, log_stage_error, log_stage_start, setup_logger
from utils.session import RunSession
from utils.storage import save_array, save_json, save_table

logger = setup_logger('UltrasoundPipeline')


class UltrasoundPipeline:
    """Runs the full localization protocol on a simulated vessel phantom"""

    def __init__(self):
        self.name = "Ultrasound Pipeline"
        logger.info(f"✅ {self.name} initialized")

    def execute(self, doc: ConfigDocument, session: RunSession, threads: int = 1) -> Dict:
        log_stage_start(self.name, {"duration": doc.get("duration", 2.0), "threads": threads})
        started = time.perf_counter()
        try:
            seed = doc.require_int("seed", 0)
            phantom = VesselPhantom.from_dict(doc.get("phantom")) if doc.get("phantom") else default_phantom()
            process = BubbleProcess.from_dict(dict(doc.section("process"), seed=seed))
            noise = NoiseSpec(section_doc(doc, "noise").require_nonnegative("alpha", 0.01), seed + 1)
            psf = phantom.psf_operator(section_doc(doc, "psf").require_positive("sigma", 0.04),
                                       doc.require_int("K", 2, minimum=1), doc.require_positive("tau", 0.002))
            window = dict(doc.section("window"))
            window.setdefault("noise_alpha", noise.alpha)
            settings = WindowSettings.from_dict(window)

            # Step 1-3: synthesis, selection, reconstruction
            logger.info("Step 1: Simulating acquisition and reconstructing windows")
            result = run_ultrasound(
                phantom, process, psf, noise, settings,
                duration=doc.require_positive("duration", 2.0),
                rel_tol=doc.require_positive("rel_tol", 0.02),
                min_weight=doc.require_nonnegative("min_weight", 0.5),
                threads=threads,
            )

            # Step 4: outputs
            logger.info("Step 2: Writing point cloud, B-mode and scores")
            score = score_reconstruction(result.points, phantom)
            profile = bmode_cross_profile(result.bmode, phantom, doc.require_positive("profile_x_mm", 0.5))
            outputs = {
                "points": save_table(result.points, session.path("points.csv"), session),
                "bmode": save_array(result.bmode, session.path("bmode.npz"),
                                    {"width": psf.width, "height": psf.height, "pitch_mm": psf.pitch_mm,
                                     "sigma": psf.sigma, "K": 0, "tau": psf.grid.tau}, session),
                "phantom": save_json(phantom.to_dict(), session.path("phantom.json"), session),
            }
            summary = {
                "n_frames": int(len(result.sequence.frames)),
                "n_bubbles": len(result.tracks),
                "n_intervals": len(result.intervals),
                "n_windows": len(result.windows),
                "skipped_windows": result.skipped_windows,
                "score": score,
                "bmode_profile": profile,
            }
            outputs["summary"] = save_json(summary, session.path("summary.json"), session)
            session.record_timing("ultrasound", time.perf_counter() - started)
            log_stage_complete(self.name, f"({len(result.points)} points from {len(result.windows)} windows)")
            return dict(status="success", n_points=int(len(result.points)), **summary, **outputs)

        except Exception as e:
            log_stage_error(self.name, e)
            session.add_error(e)
            return {"status": "failed", "error": str(e), "exception": e}
