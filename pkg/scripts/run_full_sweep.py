#!/usr/bin/env python3
"""
Full-tier sweep for wbcbench.

Scans the dataset roots, trains every variant over ten seeds, writes the
comparison report and renders the t-SNE figures for the BN and GN
baselines. Completed seeds are skipped, so the script can be re-run after
an interruption (or from a cron job) until the sweep is done.

Usage:
    python scripts/run_full_sweep.py [--out DIR] [--variants a,a',i] [--seeds 0..9]

Exit Codes:
    0   Success
    1   General error (at least one variant failed)
    2   Already running (lockfile exists)
    3   Configuration or validation error
"""

import argparse
import fcntl
import logging
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from wbcbench.cli import EXIT_OK, EXIT_USAGE, main as wbcbench_main
from wbcbench.modelzoo import VARIANT_ORDER

BASE_DIR = Path(__file__).parent.parent
DEFAULT_OUT = BASE_DIR / "runs" / "full"
LOCK_PATH = BASE_DIR / "state" / "run_full_sweep.lock"
TSNE_VARIANTS = ("a", "i")

LOG_DIR = BASE_DIR / "logs"
LOG_DIR.mkdir(parents=True, exist_ok=True)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[
        logging.FileHandler(LOG_DIR / "run_full_sweep.log"),
        logging.StreamHandler(sys.stdout),
    ],
)
logger = logging.getLogger(__name__)


class AlreadyRunningError(RuntimeError):
    pass


class LockFile:
    """Context manager for file-based locking to prevent concurrent sweeps."""

    def __init__(self, lock_path: Path):
        self.lock_path = lock_path
        self.lock_file = None

    def __enter__(self):
        self.lock_path.parent.mkdir(parents=True, exist_ok=True)
        self.lock_file = open(self.lock_path, "w")
        try:
            fcntl.flock(self.lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self.lock_file.close()
            raise AlreadyRunningError(f"another sweep holds {self.lock_path}")
        self.lock_file.write(str(sys.argv))
        self.lock_file.flush()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.lock_file:
            fcntl.flock(self.lock_file.fileno(), fcntl.LOCK_UN)
            self.lock_file.close()
            try:
                self.lock_path.unlink()
            except FileNotFoundError:
                pass


def run_stage(name: str, argv: list) -> int:
    logger.info(f"=== {name} ===")
    logger.info(f"wbcbench {' '.join(argv)}")
    code = wbcbench_main(argv)
    if code != EXIT_OK:
        logger.error(f"{name} exited with {code}")
    return code


def main() -> int:
    """Main entry point. Returns exit code."""
    parser = argparse.ArgumentParser(description="Run the full-tier wbcbench sweep")
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT, help="results directory")
    parser.add_argument("--variants", default=",".join(VARIANT_ORDER), help="comma separated variant ids")
    parser.add_argument("--seeds", default="0..9", help="e.g. 0..9 or 0,3,5")
    parser.add_argument("--jobs", type=int, default=1, help="parallel seeds per variant")
    parser.add_argument("--skip-prepare", action="store_true", help="reuse manifests already under --out")
    parser.add_argument("--skip-tsne", action="store_true", help="skip the t-SNE figures")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    args = parser.parse_args()

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    common = ["--tier", "full", "--out", str(args.out)] + (["--verbose"] if args.verbose else [])
    try:
        with LockFile(LOCK_PATH):
            logger.info("=" * 50)
            logger.info(f"Full sweep started: variants {args.variants}, seeds {args.seeds}")
            logger.info("=" * 50)

            if not args.skip_prepare:
                code = run_stage("1. Scanning datasets", ["prepare", *common])
                if code != EXIT_OK:
                    return code

            sweep_code = run_stage(
                "2. Training variants",
                ["ablate", *common, "--variants", args.variants, "--seeds", args.seeds, "--jobs", str(args.jobs)],
            )
            if sweep_code not in (EXIT_OK, 1):
                return sweep_code

            if not args.skip_tsne:
                requested = {v.strip() for v in args.variants.split(",")}
                for variant in TSNE_VARIANTS:
                    if variant not in requested:
                        continue
                    code = run_stage(
                        f"3. t-SNE for variant {variant}",
                        ["analyze", *common, "--figure", "tsne", "--variant", variant],
                    )
                    if code != EXIT_OK:
                        sweep_code = code

            logger.info("=" * 50)
            logger.info("Sweep complete!" if sweep_code == EXIT_OK else "Sweep finished with failures")
            return sweep_code

    except AlreadyRunningError as e:
        logger.error(f"Cannot start: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
