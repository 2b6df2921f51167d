#!/usr/bin/env python3
"""Sweep the modulation frequency across the coupling's Nyquist limit and plot
the surviving amplitude ratio against the ideal zero-order-hold response."""

import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tdcosim.metrics import spectral_ratio
from tdcosim.runner import run_cosim, run_monolithic
from tdcosim.scenarios import builtin_scenario, scenario_from_dict, scenario_to_dict


def tone_spec(base, f_hz, duration_s, name):
    d = scenario_to_dict(base)
    d["name"] = name
    d["duration_s"] = duration_s
    d["network"]["reference"]["voltage"] = {
        "kind": "sine", "base": 1.0, "amplitude": 0.1, "freq_hz": f_hz,
    }
    return scenario_from_dict(d)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/nyquist_sweep")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    base = builtin_scenario("s3")
    dt1 = base.config.dt_cosim
    freqs = [0.05, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5, 0.75, 1.0]
    ratios = []
    for f in freqs:
        duration = max(12.0, round(6.0 / f / base.config.dt_tx) * base.config.dt_tx)
        spec = tone_spec(base, f, duration, f"nyq-{f}")
        res = spectral_ratio(run_cosim(spec), run_monolithic(spec), "p_dx_mw", f)
        ratios.append(res.amplitude_ratio)
        print(f"f={f:>5} Hz  ratio={res.amplitude_ratio:.4f}  peak={res.detected_peak_hz:.4f} Hz")

    f_grid = np.linspace(0.01, 1.0, 200)
    zoh = np.abs(np.sinc(f_grid * dt1))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(f_grid, zoh, "-", alpha=0.6, label="ideal ZOH |sinc(f dt_cosim)|")
    ax.plot(freqs, ratios, "o", label="measured ratio")
    ax.axvline(0.5 / dt1, color="red", linestyle="--", label="0.5 / dt_cosim")
    ax.set_xlabel("modulation frequency (Hz)")
    ax.set_ylabel("amplitude ratio cosim / monolithic")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(args.out, "nyquist_sweep.svg")
    fig.savefig(path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
