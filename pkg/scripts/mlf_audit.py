"""Per-start audit of switch-on energy traces on the 10x10 start grid.

Prints one row per (start, trace) with the sample count and the index of the
first non-decreasing sample, then a pass tally per trace id.
"""
from collections import Counter

import numpy as np

from swdpll import LoopConfig, PllState, SwitchThresholds, simulate
from swdpll.lyapunov import mlf_check


def main():
    cfg, th = LoopConfig(), SwitchThresholds()
    passed, seen = Counter(), Counter()
    print("phi0,dphi0,trace,samples,first_violation")
    for p in np.linspace(-3, 3, 10):
        for d in np.linspace(-0.06, 0.06, 10):
            _, rep = simulate(cfg, th, PllState(p, d), 2000)
            for sid, tr in sorted(rep.switch_on_traces.items()):
                res = mlf_check(tr)
                seen[sid] += 1
                passed[sid] += res.passed
                fv = "" if res.first_violation is None else res.first_violation
                print(f"{p:.4g},{d:.4g},{sid},{len(tr.values)},{fv}")
    for sid in sorted(seen):
        print(f"# {sid}: {passed[sid]}/{seen[sid]} strictly decreasing")


if __name__ == "__main__":
    main()
