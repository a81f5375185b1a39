"""
Experiment Pipeline - Monte Carlo campaigns and noise / curvature sweeps
"""

import time
from typing import Dict

from tools.experiments import DEFAULT_BINS, TrialSpec, overall_rates, run_campaign, sweep_curvature, sweep_noise
from utils.config import ConfigDocument
from utils.errors import ConfigError
from utils.logger import log_stage_complete, log_stage_error, log_stage_start, setup_logger
from utils.session import RunSession
from utils.storage import save_json, save_table

logger = setup_logger('ExperimentPipeline')


def _label(value: float) -> str:
    return f"{value:g}".replace(".", "p").replace("-", "m")


class ExperimentPipeline:
    """Runs the base campaign, then any requested sweeps, and writes one CSV per table"""

    def __init__(self):
        self.name = "Experiment Pipeline"
        logger.info(f"✅ {self.name} initialized")

    def execute(self, doc: ConfigDocument, session: RunSession, threads: int = 1) -> Dict:
        log_stage_start(self.name, {"n_trials": doc.get("n_trials"), "threads": threads})
        started = time.perf_counter()
        try:
            trial = dict(doc.section("trial"))
            for key in ("seed", "alpha", "beta"):
                if doc.get(key) is not None:
                    trial[key] = doc.get(key)
            try:
                spec = TrialSpec.from_dict(trial)
            except (ConfigError, TypeError) as e:
                raise doc.error("trial", f"is invalid: {e}") from e
            n_trials = doc.require_int("n_trials", 100, minimum=1)
            bins = tuple(doc.get("bins", list(DEFAULT_BINS)))
            if len(bins) != 3 or int(bins[0]) < 1 or not bins[1] < bins[2]:
                raise doc.error("bins", f"must be [count, low, high] with low < high, got {list(bins)}")
            solver = doc.section("solver")

            # Step 1: base campaign
            logger.info(f"Step 1: Running {n_trials} trials")
            records, table = run_campaign(spec, n_trials, bins, threads, solver)
            outputs = {"campaign": save_table(table, session.path("campaign.csv"), session)}
            save_json({"records": [r.to_dict() for r in records]}, session.path("records.json"), session)
            outputs["records"] = session.path("records.json")
            violations = sum(1 for r in records if r.static_3 and not r.static_any)
            if violations:
                logger.error(f"❌ {violations} record(s) with static_3 but not static_any")

            # Step 2: sweeps
            for alpha, sweep_table in sweep_noise(spec, doc.get("alphas", []), n_trials, threads,
                                                  bins, solver).items():
                outputs[f"noise_{alpha:g}"] = save_table(
                    sweep_table, session.path(f"noise_{_label(alpha)}.csv"), session)
            for beta, sweep_table in sweep_curvature(spec, doc.get("betas", []), n_trials, threads,
                                                     bins, solver).items():
                outputs[f"curvature_{beta:g}"] = save_table(
                    sweep_table, session.path(f"curvature_{_label(beta)}.csv"), session)

            rates = overall_rates(records)
            save_json(dict(rates, n_trials=n_trials, trial=spec.to_dict()), session.path("summary.json"), session)
            session.record_timing("experiment", time.perf_counter() - started)
            log_stage_complete(self.name, f"(dynamic={rates['rate_dynamic']:.3f})")
            return dict(status="success", n_trials=n_trials, **rates, **outputs)

        except Exception as e:
            log_stage_error(self.name, e)
            session.add_error(e)
            return {"status": "failed", "error": str(e), "exception": e}
