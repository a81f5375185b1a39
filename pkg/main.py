"""
Dynamic Spike Toolkit - Main Orchestrator

Binds JSON configs to the numerical tools through one pipeline per command:
1. simulate    → Fourier or PSF measurements of a moving particle configuration
2. reconstruct → dynamic (or single-frame) recovery from a measurement file
3. certify     → dual certificate construction, verification, stability check
4. experiment  → Monte Carlo success-rate campaigns and sweeps
5. ultrasound  → microbubble localization on a simulated vessel phantom

Every run writes its artifacts plus a manifest.json into the output directory.
"""

import sys
import os

# Fix import paths
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import argparse
import json
from typing import Dict, List, Optional

from dotenv import load_dotenv

from pipelines import (
    CertifyPipeline,
    ExperimentPipeline,
    ReconstructPipeline,
    SimulatePipeline,
    UltrasoundPipeline,
)
from utils.config import ConfigDocument, Settings, load_config
from utils.errors import EXIT_OK, exit_code_for
from utils.logger import setup_logger
from utils.session import TOOL_VERSION, RunManifest, RunSession

__version__ = TOOL_VERSION

# Load environment variables
load_dotenv()

# Setup logger
logger = setup_logger('Orchestrator')

COMMANDS = ("simulate", "reconstruct", "certify", "experiment", "ultrasound")


class DynamicSpikeOrchestrator:
    """
    Main orchestrator: resolves the config, runs one pipeline and always
    leaves a manifest behind
    """

    def __init__(self, settings: Optional[Settings] = None):
        logger.info("🚀 Initializing Dynamic Spike Toolkit")
        self.settings = settings or Settings.from_env()
        self.pipelines = {
            "simulate": SimulatePipeline(),
            "reconstruct": ReconstructPipeline(),
            "certify": CertifyPipeline(),
            "experiment": ExperimentPipeline(),
            "ultrasound": UltrasoundPipeline(),
        }

    def resolve_config(self, command: str, args: argparse.Namespace) -> ConfigDocument:
        """Load the config file (or start empty) and apply flag overrides"""
        doc = load_config(args.config) if args.config else ConfigDocument.from_dict({})
        seed = args.seed if args.seed is not None else doc.get("seed", self.settings.seed)
        doc = doc.override(seed=seed)

        if command == "experiment":
            return doc.override(n_trials=args.trials, alpha=args.alpha, beta=args.beta)
        if command in ("simulate", "ultrasound") and args.alpha is not None:
            doc = doc.override(noise=dict(doc.section("noise"), alpha=args.alpha))
        if command == "simulate" and args.beta is not None:
            doc = doc.override(curvature=dict(doc.section("curvature"), beta=args.beta))
        return doc

    def run(self, command: str, args: argparse.Namespace) -> Dict:
        """
        Run one command end to end

        Args:
            command: one of COMMANDS
            args: parsed command-line flags

        Returns:
            Status dictionary with 'exit_code' and, on failure, 'error' / 'type'
        """
        output_dir = args.out or os.path.join(self.settings.output_dir, command)
        session = RunSession(command, output_dir)
        manifest = RunManifest(session)
        threads = args.threads or self.settings.threads
        result: Dict = {"status": "failed"}

        logger.info(f"\n{'='*60}")
        logger.info(f"🎯 Running '{command}' → {output_dir}")
        logger.info(f"{'='*60}\n")

        try:
            doc = self.resolve_config(command, args)
            manifest.config = dict(doc.data)
            manifest.seed = doc.get("seed")
            pipeline = self.pipelines[command]
            if command in ("experiment", "ultrasound"):
                result = pipeline.execute(doc, session, threads=threads)
            else:
                result = pipeline.execute(doc, session)
            if result.get("status") == "failed":
                raise result["exception"]
            manifest.status = "success"
            result["exit_code"] = EXIT_OK
            summary = {k: v for k, v in result.items() if isinstance(v, (int, float, str, bool))}
            logger.log_stage_end(command, summary, session.elapsed)

        except Exception as e:
            if not session.errors:
                session.add_error(e)
            manifest.status = "failed"
            result = {
                "status": "failed",
                "error": str(e),
                "type": type(e).__name__,
                "exit_code": exit_code_for(e),
            }
            logger.error(f"❌ '{command}' failed: {e}")

        finally:
            result["manifest"] = manifest.write()

        return result

    def display_summary(self, command: str, result: Dict):
        """Print the non-path scalar results of a successful run"""
        print("\n" + "="*60)
        print(f"📊 {command.upper()} SUMMARY")
        print("="*60)
        for key, value in result.items():
            if key in ("exception",) or isinstance(value, (dict, list)):
                continue
            print(f"   {key}: {value}")
        print("="*60 + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynamic-spike",
        description="Super-resolution of moving point sources from multi-frame measurements",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", help="JSON config file")
        sub.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        sub.add_argument("--alpha", type=float, help="noise level")
        sub.add_argument("--beta", type=float, help="trajectory curvature")
        if name == "experiment":
            sub.add_argument("--trials", type=int, help="number of Monte Carlo trials")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application"""
    args = build_parser().parse_args(argv)
    if not hasattr(args, "trials"):
        args.trials = None

    orchestrator = DynamicSpikeOrchestrator()
    result = orchestrator.run(args.command, args)

    if result["exit_code"] != EXIT_OK:
        error = {"error": result["error"], "type": result["type"], "exit_code": result["exit_code"]}
        print(json.dumps(error), file=sys.stderr)
        return result["exit_code"]

    orchestrator.display_summary(args.command, result)
    print(f"✅ Manifest saved to: {result['manifest']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
