#!/usr/bin/env python3
"""Shrink the co-simulation timestep and plot RMS(P-Dx cosim vs monolithic):
the coupling error must vanish as the exchange rate approaches dt_tx."""

import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tdcosim.metrics import rms_difference
from tdcosim.runner import run_cosim, run_monolithic
from tdcosim.scenarios import builtin_scenario, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/timestep_convergence")
    ap.add_argument(
        "--steps", type=float, nargs="+", default=[1.0, 0.5, 0.2, 0.1, 0.05, 0.01]
    )
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    base = builtin_scenario("s3")
    mono = run_monolithic(base)
    rms = []
    for dt1 in args.steps:
        cosim = run_cosim(with_overrides(base, dt_cosim=dt1, name=f"s3-dt{dt1}"))
        value = rms_difference(cosim, mono, "p_dx_mw")
        rms.append(value)
        print(f"dt_cosim={dt1:>5} s  rms={value:.6f} MW")

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.loglog(args.steps, rms, "o-")
    ax.set_xlabel("co-simulation timestep (s)")
    ax.set_ylabel("RMS(P-Dx cosim - monolithic) (MW)")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = os.path.join(args.out, "timestep_convergence.svg")
    fig.savefig(path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
