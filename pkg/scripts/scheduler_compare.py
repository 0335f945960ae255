"""Barrier vs pipelined makespan for the 100-tile workload over a range of fleets."""

import argparse

from orthoforge.schedsim import APPENDIX_PLAN, compare_modes, fleet


def table(smalls, captain_works: bool) -> None:
    print(f"{'fleet':>14} {'barrier_min':>12} {'pipelined_min':>14} {'saving_h':>9}")
    for n in smalls:
        r = compare_modes(fleet(0, n), APPENDIX_PLAN, captain_works=captain_works)
        print(f"{'1+' + str(n) + ' small':>14} {r['barrier']:12.0f} {r['pipelined']:14.0f} "
              f"{r['saving'] / 60:9.1f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--small", type=int, nargs="+", default=[4, 9, 19])
    ap.add_argument("--dedicated-captain", action="store_true",
                    help="the captain only fuses and never processes pairs")
    args = ap.parse_args()
    table(args.small, captain_works=not args.dedicated_captain)
