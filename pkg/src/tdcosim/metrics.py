"""Post-processing metrics: edge propagation delay, single-bin spectra, DER events.

All metrics are pure functions over RunReports.  Edge detection uses a 50%
threshold crossing between the series' settled head and tail levels, which
turns an eyeball-the-plots delay comparison into a crisp, assertable
number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from .core import MetricError
from .runner import RunReport


def edge_time(times_s: np.ndarray, series: np.ndarray, threshold_frac: float = 0.5) -> float:
    """Time of the first crossing of threshold_frac of the step amplitude.

    Baseline and final levels are medians of the head and tail fifths of the
    series; a negligible amplitude means there is no step to detect.
    """
    n = len(series)
    if n < 5:
        raise MetricError("series too short for edge detection")
    head = float(np.median(series[: max(3, n // 5)]))
    tail = float(np.median(series[-max(3, n // 5) :]))
    amplitude = tail - head
    scale = max(abs(head), abs(tail), 1e-12)
    if abs(amplitude) <= 1e-9 * scale:
        raise MetricError("no detectable step edge in series")
    threshold = head + threshold_frac * amplitude
    if amplitude > 0:
        crossed = np.flatnonzero(series >= threshold)
    else:
        crossed = np.flatnonzero(series <= threshold)
    if len(crossed) == 0:
        raise MetricError("series never crosses the edge threshold")
    return float(times_s[crossed[0]])


def propagation_delay(
    cosim: RunReport,
    mono: RunReport,
    signal: str = "p_dx_mw",
    threshold_frac: float = 0.5,
) -> float:
    """Edge time of the coupled run minus the monolithic oracle's, in seconds."""
    try:
        t_cosim = edge_time(cosim.times_s, cosim.signal(signal), threshold_frac)
        t_mono = edge_time(mono.times_s, mono.signal(signal), threshold_frac)
    except MetricError as exc:
        raise MetricError(f"{signal}: {exc}") from exc
    return t_cosim - t_mono


def _analysis_window(times_s: np.ndarray, series: np.ndarray, f_hz: float):
    """Drop one period of transient, then keep an integer number of periods."""
    dt = float(times_s[1] - times_s[0])
    period = 1.0 / f_hz
    if (len(series) - 1) * dt < 4.0 * period:
        raise MetricError(f"series shorter than 4 periods of {f_hz} Hz")
    i0 = int(round(period / dt))
    samples_per_period = period / dt
    n_cycles = int(math.floor((len(series) - i0) * dt / period + 1e-9))
    window = int(round(n_cycles * samples_per_period))
    if n_cycles < 1 or window < 2:
        raise MetricError("analysis window is empty after transient discard")
    return i0, window, dt


def single_bin_amplitude(times_s: np.ndarray, series: np.ndarray, f_hz: float) -> float:
    """Amplitude of the f_hz component by single-bin discrete Fourier sum."""
    i0, window, dt = _analysis_window(times_s, series, f_hz)
    x = np.asarray(series[i0 : i0 + window], dtype=float)
    x = x - x.mean()
    t = times_s[i0 : i0 + window]
    phasor = np.exp(-2j * np.pi * f_hz * t)
    return float(2.0 * abs(np.sum(x * phasor)) / window)


@dataclass(frozen=True)
class SpectralResult:
    amplitude_ratio: float
    detected_peak_hz: float
    cosim_amplitude: float
    mono_amplitude: float


def spectral_ratio(
    cosim: RunReport, mono: RunReport, signal: str, f_hz: float
) -> SpectralResult:
    """How much of the f_hz excitation survived the coupling, against the oracle.

    The ratio is the coupled run's single-bin amplitude at f_hz normalized by
    the monolithic run's; detected_peak_hz is the dominant spectral bin of the
    coupled signal below the excitation's second harmonic (aliasing can park
    energy at a lower frequency, which is exactly what this catches).
    """
    amp_cosim = single_bin_amplitude(cosim.times_s, cosim.signal(signal), f_hz)
    amp_mono = single_bin_amplitude(mono.times_s, mono.signal(signal), f_hz)
    if amp_mono <= 1e-12:
        raise MetricError(f"oracle has no {f_hz} Hz content in {signal!r}")

    i0, window, dt = _analysis_window(cosim.times_s, cosim.signal(signal), f_hz)
    x = np.asarray(cosim.signal(signal)[i0 : i0 + window], dtype=float)
    x = x - x.mean()
    spectrum = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(window, dt)
    mask = (freqs > 0) & (freqs < 2.0 * f_hz)
    if not mask.any():
        raise MetricError("no spectral bins below the second harmonic")
    masked = np.where(mask, spectrum, -1.0)
    peak = float(freqs[int(np.argmax(masked))])
    return SpectralResult(
        amplitude_ratio=amp_cosim / amp_mono,
        detected_peak_hz=peak,
        cosim_amplitude=amp_cosim,
        mono_amplitude=amp_mono,
    )


def rms_difference(a: RunReport, b: RunReport, signal: str = "p_dx_mw") -> float:
    """Root-mean-square difference of a shared signal over the full run."""
    xa = a.signal(signal)
    xb = b.signal(signal)
    if len(xa) != len(xb):
        raise MetricError(
            f"series lengths differ ({len(xa)} vs {len(xb)}); same dt_tx and duration required"
        )
    return float(np.sqrt(np.mean((xa - xb) ** 2)))


@dataclass(frozen=True)
class DerEventMetrics:
    head_p_jump_mw: float
    v_pcc_drop_pu: float
    recovery_error_pu: float
    disconnect_s: float
    reconnect_s: float


def der_event_metrics(report: RunReport) -> DerEventMetrics:
    """Disconnect/reconnect transient sizes from a run with one of each event."""
    events = report.scenario.get("der_events", [])
    disconnects = [ev["at_s"] for ev in events if not ev["connected"]]
    reconnects = [ev["at_s"] for ev in events if ev["connected"]]
    if len(disconnects) != 1 or len(reconnects) != 1:
        raise MetricError("need exactly one disconnect and one reconnect event")
    t_disc, t_rec = disconnects[0], reconnects[0]
    dt_cosim = report.config.dt_cosim
    times = report.times_s
    p = report.signal("p_dx_mw")
    v = report.signal("v_pcc")

    def at(t: float) -> int:
        i = int(round(t / (times[1] - times[0])))
        return min(max(i, 0), len(times) - 1)

    before = at(t_disc - 0.5 * dt_cosim)
    after_p = at(t_disc + 0.5 * dt_cosim)
    settle = at(min(t_disc + 3.5 * dt_cosim, t_rec - 0.5 * dt_cosim))
    return DerEventMetrics(
        head_p_jump_mw=float(p[after_p] - p[before]),
        v_pcc_drop_pu=float(v[before] - v[settle]),
        recovery_error_pu=float(abs(v[-1] - v[before])),
        disconnect_s=t_disc,
        reconnect_s=t_rec,
    )
