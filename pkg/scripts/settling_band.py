"""Settle counts on the 10x10 start grid for several lock-band widths.

Usage: python3 scripts/settling_band.py [--scales 1 1.5 2] [--cycles 2000]
"""
import argparse

import numpy as np

from swdpll import LoopConfig, PllState, SwitchThresholds, simulate
from swdpll.sim import SimOptions, detect_settling


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scales", type=float, nargs="+", default=[1.0, 1.5, 2.0])
    ap.add_argument("--cycles", type=int, default=2000)
    args = ap.parse_args()
    cfg, th = LoopConfig(), SwitchThresholds()
    opts = SimOptions(stop_on_settle=False)
    starts = [PllState(p, d) for p in np.linspace(-3, 3, 10) for d in np.linspace(-0.06, 0.06, 10)]
    trajs = [simulate(cfg, th, x0, args.cycles, options=opts)[0] for x0 in starts]
    print("band_scale,settled,median_settled_at")
    for s in args.scales:
        hits = [detect_settling(t, cfg.gains, band_scale=s) for t in trajs]
        ok = [h for h in hits if h is not None]
        med = int(np.median(ok)) if ok else -1
        print(f"{s:g},{len(ok)},{med}")


if __name__ == "__main__":
    main()
