import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from orthoforge.cli import main
from orthoforge.grid import Extent, LocalFrame
from orthoforge.synthetic import view_over
from orthoforge.world import WorldConfig, generate_world

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FRAME = LocalFrame(40.0, -86.0)


@pytest.fixture
def frame():
    return FRAME


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def stereo_views(off_nadir=(20.0, 25.0), azimuth=(0.0, 130.0), extent=Extent(0, 0, 500, 500),
                 gsd=0.5, max_height=40.0):
    return [view_over(f"v{i}", FRAME, extent, gsd, off_nadir[i], azimuth[i],
                      max_height=max_height) for i in range(len(off_nadir))]


@dataclass
class WorldRun:
    manifest: Path
    exit_code: int
    seconds: float          # fixture generation plus every pipeline stage
    out: Path


def _run_world(root: Path, workers: int) -> WorldRun:
    t0 = time.perf_counter()
    manifest = generate_world(root, WorldConfig())
    code = main(["all", "--manifest", str(manifest), "--workers", str(workers)])
    return WorldRun(manifest, code, time.perf_counter() - t0, root / "out")


@pytest.fixture(scope="session")
def world(tmp_path_factory) -> WorldRun:
    """The 3x3-tile synthetic world, run through every stage once."""
    return _run_world(tmp_path_factory.mktemp("world"), workers=1)


@pytest.fixture(scope="session")
def world_rerun(tmp_path_factory, world) -> WorldRun:
    """An independent regeneration and run of the same world with several workers."""
    return _run_world(tmp_path_factory.mktemp("world_rerun"), workers=3)


@pytest.fixture
def world_copy(tmp_path, world) -> Path:
    """A scratch copy of the finished world; returns its manifest path."""
    dst = tmp_path / "world"
    shutil.copytree(world.manifest.parent, dst)
    return dst / world.manifest.name


# --- acceptance criteria report -------------------------------------------------------------

CRITERIA: list[str] = []


def record_criterion(number: int, title: str, checks: dict, seconds: float,
                     limit: float | None = None) -> bool:
    """Log one PASS/FAIL line for an acceptance criterion; returns overall success."""
    checks = dict(checks)
    if limit is not None:
        checks[f"runtime {seconds:.1f} s < {limit:g} s"] = seconds < limit
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = "; ".join(failed) if failed else "; ".join(checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} {title}: {detail}"
    CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
