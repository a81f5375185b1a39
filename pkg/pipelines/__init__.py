from pipelines.certify_pipeline import CertifyPipeline
from pipelines.experiment_pipeline import ExperimentPipeline
from pipelines.reconstruct_pipeline import ReconstructPipeline
from pipelines.simulate_pipeline import SimulatePipeline
from pipelines.ultrasound_pipeline import UltrasoundPipeline

__all__ = [
    "CertifyPipeline",
    "ExperimentPipeline",
    "ReconstructPipeline",
    "SimulatePipeline",
    "UltrasoundPipeline",
]
