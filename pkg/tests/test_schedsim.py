from collections import Counter, defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from orthoforge.schedsim import (APPENDIX_PLAN, Action, Mode, Role, VmProfile, WorkPlan,
                                 appendix_fleet, compare_modes, figure_fixture, fleet, read_plan,
                                 replay_figure_fixture, simulate, write_plan, write_timeline)

STARTS = (Action.PULL, Action.RETRY)


def attempts(tl):
    """(tile, pair) -> list of (start, end, vm) processing intervals."""
    open_, out = {}, defaultdict(list)
    for e in tl.events:
        key = (e.tile, e.pair)
        if e.action in STARTS:
            open_[(e.vm, key)] = e.time
        elif e.action in (Action.DONE, Action.FAIL) and (e.vm, key) in open_:
            out[key].append((open_.pop((e.vm, key)), e.time, e.vm))
    return out


# --- appendix arithmetic ------------------------------------------------------------------

def test_barrier_appendix_makespan_is_exact():
    tl = simulate(appendix_fleet(), APPENDIX_PLAN, Mode.BARRIER)
    assert tl.makespan == 100 * (80 * 20 / 10 + 60) == 22_000


def test_pipelined_appendix_obeys_work_conservation():
    tl = simulate(appendix_fleet(), APPENDIX_PLAN, Mode.PIPELINED)
    # the captain fuses each tile itself, so 100 fusions load the fleet as well as the pairs
    lower = (100 * 80 * 20 + 99 * 60) / 10 + 60
    assert lower <= tl.makespan <= lower + 20
    assert tl.makespan < 22_000


def test_dedicated_captain_reaches_the_ideal_pipeline():
    vms = fleet(n_large=0, n_small=10)
    tl = simulate(vms, APPENDIX_PLAN, Mode.PIPELINED, captain_works=False)
    assert tl.makespan == 100 * 80 * 20 / 10 + 60
    assert simulate(vms, APPENDIX_PLAN, Mode.BARRIER, captain_works=False).makespan == 22_000


def test_lone_captain_single_pair():
    plan = WorkPlan(1, 1, 20.0, 60.0)
    for mode in Mode:
        assert simulate(fleet(), plan, mode).makespan == 80.0


def test_single_tile_saves_nothing():
    for n_small in (0, 3, 9):
        r = compare_modes(fleet(1, n_small), WorkPlan(1, 40, 20.0, 60.0))
        assert r["saving"] == 0.0


@settings(max_examples=40)
@given(n_large=st.integers(0, 3), n_small=st.integers(0, 6), tiles=st.integers(1, 6),
       pairs=st.integers(1, 12), pair_min=st.sampled_from([1.0, 5.0, 20.0]),
       fusion=st.sampled_from([0.0, 10.0, 60.0]))
def test_pipelined_never_slower(n_large, n_small, tiles, pairs, pair_min, fusion):
    r = compare_modes(fleet(n_large, n_small), WorkPlan(tiles, pairs, pair_min, fusion))
    assert r["pipelined"] <= r["barrier"]
    assert r["saving"] >= 0


@settings(max_examples=30)
@given(n_large=st.integers(0, 3), n_small=st.integers(0, 5), tiles=st.integers(1, 5),
       pairs=st.integers(1, 10), seed=st.integers(0, 1000), mode=st.sampled_from(list(Mode)),
       offset=st.integers(1, 50))
def test_makespan_invariant_under_relabelling(n_large, n_small, tiles, pairs, seed, mode,
                                               offset):
    vms = fleet(n_large, n_small)
    plan = WorkPlan(tiles, pairs, 7.0, 13.0)
    n = len(vms)
    # reverse the id order while keeping roles
    relabelled = [VmProfile(offset + n - 1 - v.id, v.role) for v in vms]
    assert simulate(vms, plan, mode).makespan == simulate(relabelled, plan, mode).makespan


# --- failure semantics and safety ---------------------------------------------------------

@settings(max_examples=30)
@given(n_large=st.integers(1, 3), n_small=st.integers(0, 5), tiles=st.integers(1, 5),
       pairs=st.integers(1, 10), p=st.floats(0.0, 0.6), seed=st.integers(0, 10**6),
       mode=st.sampled_from(list(Mode)))
def test_retry_once_and_unique_processing(n_large, n_small, tiles, pairs, p, seed, mode):
    plan = WorkPlan(tiles, pairs, 5.0, 8.0, failure_prob=p, seed=seed)
    tl = simulate(fleet(n_large, n_small), plan, mode)
    times = [e.time for e in tl.events]
    assert times == sorted(times)
    done = Counter((e.tile, e.pair) for e in tl.of(action=Action.DONE))
    assert set(done) == {(t, k) for t in range(tiles) for k in range(pairs)}
    assert set(done.values()) == {1}
    fails = Counter((e.tile, e.pair) for e in tl.of(action=Action.FAIL))
    runs = attempts(tl)
    for key, spans in runs.items():
        assert len(spans) == (2 if fails[key] else 1)
        spans = sorted(spans)
        # never two VMs on the same pair at once
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert all(v <= 2 for v in fails.values())
    # pipelined retries stay with the captain and large VMs (barrier holds everyone)
    roles = {v.id: v.role for v in fleet(n_large, n_small)}
    retriers = {roles[e.vm] for e in tl.of(action=Action.RETRY)}
    assert mode is Mode.BARRIER or Role.SMALL not in retriers


def test_small_vms_idle_only_when_nothing_is_left():
    tl = simulate(fleet(1, 6), WorkPlan(8, 30, 3.0, 11.0), Mode.PIPELINED)
    last_pull = max(e.time for e in tl.of(action=Action.PULL))
    runs = [s for spans in attempts(tl).values() for s in spans]
    for vm in range(2, 8):
        spans = sorted(s for s in runs if s[2] == vm)
        assert spans[0][0] == 0.0
        for a, b in zip(spans, spans[1:]):
            if b[0] > a[1]:
                assert a[1] >= last_pull


def test_failures_are_deterministic_under_seed():
    plan = WorkPlan(4, 10, 5.0, 8.0, failure_prob=0.3, seed=7)
    a = simulate(fleet(2, 3), plan)
    b = simulate(fleet(2, 3), plan)
    assert a.events == b.events and a.makespan == b.makespan


# --- figure fixture -----------------------------------------------------------------------

def test_captain_stays_back_to_fuse():
    tl = replay_figure_fixture()
    fuse_start = tl.of(vm=0, action=Action.FUSE_START, tile=0)[0]
    fuse_end = tl.of(vm=0, action=Action.FUSE_END, tile=0)[0]
    captain_tile2 = [e for e in tl.of(vm=0, tile=1) if e.action in STARTS]
    assert fuse_start.time < captain_tile2[0].time
    for vm in (1, 2):
        pulls = [e.time for e in tl.of(vm=vm, action=Action.PULL, tile=1)]
        assert pulls and fuse_start.time <= pulls[0] < fuse_end.time


def test_zero_duration_fusion_moves_everyone_together():
    tl = replay_figure_fixture(fusion_minutes=0.0)
    firsts = {vm: min(e.time for e in tl.of(vm=vm, tile=1) if e.action in STARTS)
              for vm in (0, 1, 2)}
    assert len(set(firsts.values())) == 1
    vms, plan = figure_fixture()
    assert [v.role for v in vms] == [Role.CAPTAIN, Role.SMALL, Role.LARGE]
    assert (plan.tiles, plan.pairs_per_tile) == (2, 3)


# --- validation and files -----------------------------------------------------------------

def test_invalid_configurations():
    with pytest.raises(ValueError):
        WorkPlan(0, 5, 1.0, 1.0)
    with pytest.raises(ValueError):
        WorkPlan(1, 5, 1.0, 1.0, failure_prob=1.0)
    with pytest.raises(ValueError):
        simulate([VmProfile(0, Role.SMALL)], WorkPlan(1, 1, 1.0, 1.0))
    with pytest.raises(ValueError):
        simulate([VmProfile(0, Role.CAPTAIN), VmProfile(1, Role.CAPTAIN)], WorkPlan(1, 1, 1, 1))
    with pytest.raises(ValueError):
        simulate([], WorkPlan(1, 1, 1.0, 1.0))
    with pytest.raises(ValueError):
        VmProfile(3, Role.SMALL, pair_minutes=-1.0)


def test_plan_and_timeline_files(tmp_path):
    plan = WorkPlan(3, 4, 20.0, 60.0, failure_prob=0.1, seed=5)
    vms = fleet(2, 4)
    write_plan(tmp_path / "plan.ini", plan, vms)
    back, vms2 = read_plan(tmp_path / "plan.ini")
    assert back == plan and vms2 == vms
    assert read_plan(tmp_path / "plan.ini", seed=9)[0].seed == 9
    tl = simulate(vms, plan)
    write_timeline(tmp_path / "t.csv", tl)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "time_min,vm_id,action,tile,pair"
    assert len(lines) == len(tl.events) + 1
