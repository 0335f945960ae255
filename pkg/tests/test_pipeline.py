import configparser

import numpy as np
import pytest

from orthoforge.cli import main
from orthoforge.errors import DependencyError, ValidationError
from orthoforge.io import read_ascii_grid, read_kv, write_ascii_grid
from orthoforge.pipeline import (STAGES, Manifest, Params, check_dependencies, run_stage,
                                 validate_report)
from orthoforge.schedsim import WorkPlan, fleet, write_plan

# --- parameters and manifests -------------------------------------------------------------


@pytest.mark.parametrize("section, message", [
    ({"h_step": "0"}, "parameter h_step = 0.0 is below the minimum 0.01"),
    ({"gamma": "1000"}, "parameter gamma = 1000.0 exceeds the maximum 100.0"),
    ({"y_top": "three"}, "parameter y_top = 'three' is not int"),
    ({"interp": "cubic"}, "parameter interp = 'cubic' must be nearest or bilinear"),
    ({"median_window": "4"}, "parameter median_window = 4 must be odd"),
    ({"min_pairs": "50", "max_pairs": "45"}, "parameter max_pairs = 45 is below the minimum"),
    ({"colour": "red"}, "unknown parameter(s): colour"),
])
def test_parameter_errors_name_the_bound(section, message):
    with pytest.raises(ValidationError) as err:
        Params.from_section(section)
    assert message in str(err.value)


def test_defaults_and_overrides():
    p = Params.from_section({})
    assert (p.resolution, p.h_step, p.gamma, p.y_top, p.window_size) == (0.5, 0.5, 1.0, 3, 572)
    p = Params.from_section({"gamma": "2.5", "interp": "bilinear"})
    assert p.gamma == 2.5 and p.interp == "bilinear"


def test_manifest_must_exist_and_be_complete(tmp_path):
    with pytest.raises(ValidationError):
        Manifest.load(tmp_path / "nope.ini")
    (tmp_path / "m.ini").write_text("[frame]\nlat0 = 1\nlon0 = 2\n")
    with pytest.raises(ValidationError, match=r"\[aoi\]"):
        Manifest.load(tmp_path / "m.ini")


# --- the synthetic world ------------------------------------------------------------------

EXPECTED = {
    "partition": ["tiles.csv"], "align": ["biases.csv"],
    "dsm": ["dsm.asc", "pairs.txt"] + [f"tiles/r{r}c{c}.asc" for r in range(3) for c in range(3)],
    "ortho": ["mosaic.txt"] + [f"img{i:02d}_{k}.asc" for i in range(5)
                               for k in ("b0", "b1", "b2", "mask")],
    "labels": ["labels.asc"], "windows": ["windows.csv"],
    "fuse-train": ["model.txt", "history.csv"], "vote": ["vote.asc", "fused.asc"],
}


def test_all_stages_write_their_artifacts(world):
    assert world.exit_code == 0
    for stage, names in EXPECTED.items():
        d = world.out / stage
        for n in names + ["report.txt"]:
            assert (d / n).is_file(), f"{stage}/{n}"
        assert read_kv(d / "report.txt")["stage"] == stage
    assert (world.out / "manifest.resolved.ini").is_file()


def test_world_validates(world_copy, capsys):
    assert main(["validate", "--manifest", str(world_copy)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS boundary_median_abs_m" in out
    summary = read_kv(world_copy.parent / "out" / "validate" / "summary.txt")
    assert summary["all_passed"] == "true"


def test_missing_dsm_blocks_ortho(world_copy, capsys):
    (world_copy.parent / "out" / "dsm" / "dsm.asc").unlink()
    m = Manifest.load(world_copy)
    with pytest.raises(DependencyError) as err:
        check_dependencies(m, "ortho")
    assert err.value.stage == "dsm" and err.value.missing.endswith("dsm.asc")
    assert main(["ortho", "--manifest", str(world_copy)]) == 2
    assert "run stage 'dsm' first" in capsys.readouterr().err


def test_offset_tiles_fail_validation(world_copy):
    tiles = world_copy.parent / "out" / "dsm" / "tiles"
    for r, c in [(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)]:
        p = tiles / f"r{r}c{c}.asc"
        g = read_ascii_grid(p)
        write_ascii_grid(p, g.with_data(g.data + 1.0))
    checks, ok = validate_report(Manifest.load(world_copy))
    assert not ok
    bad = {c.name: c for c in checks if not c.passed}
    assert set(bad) == {"boundary_median_abs_m"}
    assert bad["boundary_median_abs_m"].value == pytest.approx(1.0, abs=0.05)
    assert main(["validate", "--manifest", str(world_copy)]) == 1


def test_shuffled_view_slots_still_validate(world_copy):
    cp = configparser.ConfigParser()
    cp.read(world_copy)
    ids = [s.strip() for s in cp["inputs"]["images"].split(",")]
    cp["inputs"]["images"] = ",".join(ids[i] for i in (3, 0, 4, 2, 1))
    with open(world_copy, "w") as fh:
        cp.write(fh)
    m = Manifest.load(world_copy)
    for stage in ("ortho", "labels", "windows", "fuse-train", "vote"):
        run_stage(m, stage)
    checks, ok = validate_report(m)
    assert ok, [c for c in checks if not c.passed]


def test_overrides_are_recorded(world_copy):
    assert main(["partition", "--manifest", str(world_copy), "--gamma", "2.5",
                 "--seed", "11"]) == 0
    cp = configparser.ConfigParser()
    cp.read(world_copy.parent / "out" / "manifest.resolved.ini")
    assert cp["params"]["gamma"] == "2.5" and cp["params"]["seed"] == "11"
    assert dict(cp["overrides"]) == {"gamma": "2.5", "seed": "11"}


def test_bad_override_exits_with_message(world_copy, capsys):
    assert main(["partition", "--manifest", str(world_copy), "--h-step", "0"]) == 2
    assert "h_step = 0.0 is below the minimum 0.01" in capsys.readouterr().err
    assert main(["partition", "--manifest", str(world_copy), "--workers", "0"]) == 2


def test_stage_list():
    assert STAGES[:8] == ("partition", "align", "dsm", "ortho", "labels", "windows",
                          "fuse-train", "vote")
    with pytest.raises(ValidationError):
        run_stage(None, "sharpen")


# --- other commands -----------------------------------------------------------------------

def test_schedule_sim_from_plan(tmp_path, capsys):
    write_plan(tmp_path / "plan.ini", WorkPlan(4, 10, 20.0, 60.0), fleet(1, 3))
    code = main(["schedule-sim", "--plan", str(tmp_path / "plan.ini"), "--out",
                 str(tmp_path / "tl")])
    assert code == 0
    out = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    assert float(out["saving"]) == float(out["makespan.barrier"]) - float(
        out["makespan.pipelined"])
    assert (tmp_path / "tl" / "timeline_pipelined.csv").is_file()
    assert (tmp_path / "tl" / "timeline_barrier.csv").is_file()
    assert main(["schedule-sim", "--plan", str(tmp_path / "plan.ini"), "--mode", "barrier",
                 "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "b.csv").is_file()
    assert main(["schedule-sim"]) == 2


def test_schedule_stage_uses_the_manifest_fleet(world_copy):
    rep = run_stage(Manifest.load(world_copy), "schedule-sim")
    assert rep["makespan.barrier"] == 22_000


def test_make_fixture(tmp_path, capsys):
    assert main(["make-fixture", str(tmp_path / "w"), "--seed", "3"]) == 0
    manifest = tmp_path / "w" / "manifest.ini"
    assert capsys.readouterr().out.strip() == str(manifest)
    m = Manifest.load(manifest)
    assert m.params.seed == 3
    for key in ("views", "tiepoints", "dem", "osm", "truth"):
        assert m.require_input(key).is_file()
    truth = read_ascii_grid(m.input("truth")).data
    assert set(np.unique(truth)) == {0, 1, 2}
