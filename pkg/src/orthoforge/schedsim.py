"""Discrete-event simulation of the captain/worker stereo and DSM-fusion workflow.

Workers pull unique stereo-pair tasks tile by tile. A pair that fails is
retried once by the captain or a large VM; small VMs move on to the next tile
as soon as the current one has nothing left to pull. When every pair of a tile
is done the captain fuses it while everyone else carries on (PIPELINED), or
everyone waits for the fusion (BARRIER).
"""

from __future__ import annotations

import csv
import enum
import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .io import read_kv, write_kv


class Role(enum.Enum):
    CAPTAIN = "captain"
    LARGE = "large"
    SMALL = "small"


class Mode(enum.Enum):
    PIPELINED = "pipelined"
    BARRIER = "barrier"


class Action(enum.Enum):
    PULL = "PULL"
    DONE = "DONE"
    FAIL = "FAIL"
    RETRY = "RETRY"
    FUSE_START = "FUSE_START"
    FUSE_END = "FUSE_END"
    ADVANCE_TILE = "ADVANCE_TILE"


@dataclass(frozen=True)
class VmProfile:
    id: int
    role: Role
    pair_minutes: float | None = None      # None: use the plan's duration
    fusion_minutes: float | None = None

    def __post_init__(self):
        for v in (self.pair_minutes, self.fusion_minutes):
            if v is not None and v < 0:
                raise ValueError("durations must be non-negative")


@dataclass(frozen=True)
class WorkPlan:
    tiles: int
    pairs_per_tile: int
    pair_minutes: float
    fusion_minutes: float
    failure_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.tiles < 1 or self.pairs_per_tile < 1:
            raise ValueError("plan needs at least one tile and one pair per tile")
        if not 0 <= self.failure_prob < 1:
            raise ValueError("failure_prob must lie in [0, 1)")
        if self.pair_minutes <= 0 or self.fusion_minutes < 0:
            raise ValueError("pair duration must be positive, fusion non-negative")


@dataclass(frozen=True)
class Event:
    time: float
    vm: int
    action: Action
    tile: int
    pair: int          # -1 for tile-level actions


@dataclass
class SimTimeline:
    events: list[Event]
    makespan: float
    idle: dict[int, float]
    mode: Mode

    def of(self, vm=None, action=None, tile=None) -> list[Event]:
        return [e for e in self.events if (vm is None or e.vm == vm)
                and (action is None or e.action is action)
                and (tile is None or e.tile == tile)]


# idle VMs are offered work role by role, so relabelling within a role is a symmetry
DISPATCH_PRIORITY = {Role.CAPTAIN: 0, Role.LARGE: 1, Role.SMALL: 2}


def fleet(n_large: int = 0, n_small: int = 0) -> list[VmProfile]:
    """Captain (id 0), then large VMs, then small VMs."""
    vms = [VmProfile(0, Role.CAPTAIN)]
    vms += [VmProfile(1 + i, Role.LARGE) for i in range(n_large)]
    vms += [VmProfile(1 + n_large + i, Role.SMALL) for i in range(n_small)]
    return vms


def _draw_failures(plan: WorkPlan) -> np.ndarray:
    rng = np.random.default_rng(plan.seed)
    return rng.random((plan.tiles, plan.pairs_per_tile, 2)) < plan.failure_prob


@dataclass
class _Tile:
    unpulled: deque
    retry: deque = field(default_factory=deque)
    in_flight: int = 0
    done: int = 0
    fused: bool = False


def simulate(vms, plan: WorkPlan, mode: Mode = Mode.PIPELINED,
             captain_works: bool = True) -> SimTimeline:
    """Run the workflow; ``captain_works=False`` keeps the captain off pair tasks."""
    vms = sorted(vms, key=lambda v: v.id)
    if not vms:
        raise ValueError("need at least one VM")
    captains = [v for v in vms if v.role is Role.CAPTAIN]
    if len(captains) != 1:
        raise ValueError("exactly one captain is required")
    captain = captains[0].id
    if not captain_works and plan.failure_prob > 0 and not any(
            v.role is Role.LARGE for v in vms) and mode is Mode.PIPELINED:
        raise ValueError("retries need a large VM when the captain does not process pairs")
    if not captain_works and len(vms) == 1:
        raise ValueError("no VM processes pairs")
    fails = _draw_failures(plan)
    P = plan.pairs_per_tile
    tiles = [_Tile(deque(range(P))) for _ in range(plan.tiles)]
    prof = {v.id: v for v in vms}
    pair_dur = {v.id: v.pair_minutes if v.pair_minutes is not None else plan.pair_minutes
                for v in vms}
    fuse_dur = prof[captain].fusion_minutes
    fuse_dur = plan.fusion_minutes if fuse_dur is None else fuse_dur

    events: list[Event] = []
    busy = {v.id: 0.0 for v in vms}
    current = {v.id: 0 for v in vms}        # tile each VM is working on
    idle_vm = {v.id: True for v in vms}
    heap: list = []
    seq = 0
    barrier_open = 0                        # BARRIER: tile everyone may work on

    def log(t, vm, action, tile, pair=-1):
        events.append(Event(t, vm, action, tile, pair))

    def push(t, vm, kind, tile, pair, attempt):
        nonlocal seq
        heapq.heappush(heap, (t, vm, tile, pair, seq, kind, attempt))
        seq += 1

    def start_pair(t, vm, tile, pair, attempt):
        log(t, vm, Action.PULL if attempt == 0 else Action.RETRY, tile, pair)
        tiles[tile].in_flight += 1
        idle_vm[vm] = False
        busy[vm] += pair_dur[vm]
        push(t + pair_dur[vm], vm, "pair", tile, pair, attempt)

    def complete(tile):
        tl = tiles[tile]
        return tl.done == P

    def try_dispatch(t, vm) -> bool:
        """Give an idle VM work if its role permits any; returns True on success."""
        role = prof[vm].role
        if mode is Mode.BARRIER:
            k = current[vm]
            if k >= plan.tiles:
                return False
            if k < barrier_open:
                current[vm] = barrier_open
                log(t, vm, Action.ADVANCE_TILE, barrier_open)
                k = barrier_open
                if k >= plan.tiles:
                    return False
            tl = tiles[k]
            works = vm != captain or captain_works
            if works and tl.unpulled:
                start_pair(t, vm, k, tl.unpulled.popleft(), 0)
                return True
            if works and tl.retry:
                start_pair(t, vm, k, tl.retry.popleft(), 1)
                return True
            if vm == captain and complete(k) and not tl.fused:
                tl.fused = True
                log(t, vm, Action.FUSE_START, k)
                idle_vm[vm] = False
                busy[vm] += fuse_dur
                push(t + fuse_dur, vm, "fuse", k, -1, 0)
                return True
            return False

        if role is Role.SMALL:
            k = current[vm]
            while k < plan.tiles and not tiles[k].unpulled:
                k += 1
            if k >= plan.tiles:
                return False
            if k != current[vm]:
                current[vm] = k
                log(t, vm, Action.ADVANCE_TILE, k)
            start_pair(t, vm, k, tiles[k].unpulled.popleft(), 0)
            return True

        # captain and large VMs stay on their tile until every pair is done
        while True:
            k = current[vm]
            if k >= plan.tiles:
                return False
            tl = tiles[k]
            works = vm != captain or captain_works
            if works and tl.unpulled:
                start_pair(t, vm, k, tl.unpulled.popleft(), 0)
                return True
            if works and tl.retry:
                start_pair(t, vm, k, tl.retry.popleft(), 1)
                return True
            if not complete(k):
                return False
            if vm == captain:
                if not tl.fused:
                    tl.fused = True
                    log(t, vm, Action.FUSE_START, k)
                    idle_vm[vm] = False
                    busy[vm] += fuse_dur
                    push(t + fuse_dur, vm, "fuse", k, -1, 0)
                    return True
            current[vm] = k + 1
            if k + 1 < plan.tiles:
                log(t, vm, Action.ADVANCE_TILE, k + 1)

    dispatch_order = sorted(vms, key=lambda v: (DISPATCH_PRIORITY[v.role], v.id))

    def dispatch_all(t):
        progress = True
        while progress:
            progress = False
            for v in dispatch_order:
                if idle_vm[v.id] and try_dispatch(t, v.id):
                    progress = True

    dispatch_all(0.0)
    t = 0.0
    while heap:
        t = heap[0][0]
        while heap and heap[0][0] == t:
            _, vm, tile, pair, _, kind, attempt = heapq.heappop(heap)
            idle_vm[vm] = True
            tl = tiles[tile]
            if kind == "pair":
                tl.in_flight -= 1
                if fails[tile, pair, attempt]:
                    log(t, vm, Action.FAIL, tile, pair)
                    if attempt == 0:
                        tl.retry.append(pair)
                        continue
                log(t, vm, Action.DONE, tile, pair)
                tl.done += 1
            else:
                log(t, vm, Action.FUSE_END, tile)
                if mode is Mode.BARRIER:
                    barrier_open = tile + 1
                current[vm] = tile + 1
                if tile + 1 < plan.tiles:
                    log(t, vm, Action.ADVANCE_TILE, tile + 1)
        dispatch_all(t)

    if not all(tl.fused for tl in tiles):
        raise RuntimeError("simulation stalled before every tile was fused")
    makespan = t
    return SimTimeline(events, makespan, {v: makespan - b for v, b in busy.items()}, mode)


def compare_modes(vms, plan: WorkPlan, captain_works: bool = True) -> dict[str, float]:
    b = simulate(vms, plan, Mode.BARRIER, captain_works).makespan
    p = simulate(vms, plan, Mode.PIPELINED, captain_works).makespan
    return {"barrier": b, "pipelined": p, "saving": b - p}


# --- fixtures and formats ------------------------------------------------------------

APPENDIX_PLAN = WorkPlan(tiles=100, pairs_per_tile=80, pair_minutes=20.0, fusion_minutes=60.0)


def appendix_fleet() -> list[VmProfile]:
    """Ten identical VMs: the captain plus nine small workers."""
    return fleet(n_large=0, n_small=9)


def figure_fixture(fusion_minutes: float = 1.0):
    vms = [VmProfile(0, Role.CAPTAIN), VmProfile(1, Role.SMALL), VmProfile(2, Role.LARGE)]
    plan = WorkPlan(tiles=2, pairs_per_tile=3, pair_minutes=1.0, fusion_minutes=fusion_minutes)
    return vms, plan


def replay_figure_fixture(fusion_minutes: float = 1.0) -> SimTimeline:
    """Three VMs, two tiles, three pairs per tile."""
    vms, plan = figure_fixture(fusion_minutes)
    return simulate(vms, plan, Mode.PIPELINED)


def write_timeline(path, tl: SimTimeline) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_min", "vm_id", "action", "tile", "pair"])
        for e in tl.events:
            w.writerow([repr(float(e.time)), e.vm, e.action.value, e.tile, e.pair])


def write_plan(path, plan: WorkPlan, vms) -> None:
    n_large = sum(v.role is Role.LARGE for v in vms)
    n_small = sum(v.role is Role.SMALL for v in vms)
    write_kv(path, {"tiles": plan.tiles, "pairs_per_tile": plan.pairs_per_tile,
                    "pair_minutes": float(plan.pair_minutes),
                    "fusion_minutes": float(plan.fusion_minutes),
                    "failure_prob": float(plan.failure_prob), "seed": plan.seed,
                    "n_large": n_large, "n_small": n_small})


def read_plan(path, seed: int | None = None):
    kv = read_kv(path)
    plan = WorkPlan(int(kv["tiles"]), int(kv["pairs_per_tile"]), float(kv["pair_minutes"]),
                    float(kv["fusion_minutes"]), float(kv.get("failure_prob", 0.0)),
                    int(kv.get("seed", 0)) if seed is None else seed)
    return plan, fleet(int(kv.get("n_large", 0)), int(kv.get("n_small", 0)))
