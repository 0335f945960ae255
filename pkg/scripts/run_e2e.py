"""Build the synthetic world, run every stage and validate the outputs.

Usage: python3 scripts/run_e2e.py [WORKDIR] [--seed N] [--workers N]
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

from orthoforge.cli import main


def run(workdir: Path, seed: int, workers: int) -> int:
    t0 = time.perf_counter()
    if main(["make-fixture", str(workdir), "--seed", str(seed)]) != 0:
        return 2
    manifest = str(workdir / "manifest.ini")
    code = main(["all", "--manifest", manifest, "--workers", str(workers)])
    if code == 0:
        code = main(["validate", "--manifest", manifest])
    print(f"elapsed {time.perf_counter() - t0:.1f} s, outputs in {workdir / 'out'}")
    return code


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir", nargs="?")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="orthoforge-"))
    sys.exit(run(work, args.seed, args.workers))
