"""BBPD-only settling time and residual jitter against the proportional gain.

Larger kp3n settles faster but leaves a wider limit cycle.
"""
import argparse
from dataclasses import replace

import numpy as np

from swdpll import LoopConfig, LoopGains, PllState, SwitchThresholds, simulate
from swdpll.sim import SimOptions


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--phi0", type=float, default=0.005)
    ap.add_argument("--dphi0", type=float, default=0.002)
    ap.add_argument("--n", type=int, default=8)
    args = ap.parse_args()
    opts = SimOptions(force="bbpd", stop_on_settle=False)
    print("kp3n,settled_at,rms_phi_tail")
    for kp in np.geomspace(6e-5, 1e-3, args.n):
        cfg = LoopConfig(gains=replace(LoopGains(), kp3n=float(kp)))
        traj, rep = simulate(cfg, SwitchThresholds(), PllState(args.phi0, args.dphi0), 4000, options=opts)
        tail = np.asarray(traj.phi[-500:])
        print(f"{kp:.3e},{rep.settled_at},{np.sqrt(np.mean(tail ** 2)):.3e}")


if __name__ == "__main__":
    main()
