"""Per-frame instability measure, trace smoothing, and event detection.

The measure is a correlation ratio between a frame's 8-bit input
intensities (used as bins) and the network's reconstruction: with
per-bin population variances s_i over bin counts Z_i and total variance
s over Z output pixels, the within-bin ratio is
``(1/(Z*s)) * sum_i Z_i * s_i`` and the reported measure is
``eta = 1 - within_ratio``, so eta is 1 when the output is a function of
the input bins and 0 when the output carries no bin information (for
example a fully masked, constant black reconstruction).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataflow import Frame, normalize
from .errors import ConfigError, ShapeError
from .network import forward

log = logging.getLogger(__name__)

VARIANCE_EPS = 1e-12

DEFAULT_THRESHOLD = 0.5
DEFAULT_SUSTAIN = 30
DEFAULT_WINDOW_FRACTION = 0.05


@dataclass
class CorrelationRatioResult:
    """Full audit trail of one correlation-ratio evaluation.

    ``within_ratio`` is the raw within-bin variance ratio; ``eta`` is the
    reported measure ``1 - within_ratio`` (or 0 when the total variance is
    degenerate).  ``conditional_variances`` holds 0.0 for empty bins.
    """

    eta: float
    within_ratio: float
    bin_counts: np.ndarray
    total_count: int
    conditional_variances: np.ndarray
    total_variance: float


def correlation_ratio(input_frame, output):
    """Correlation ratio of a reconstruction against its input frame.

    Pixels are binned by the full 8-bit input intensity (0..255, bin 0
    included: masked black pixels carry the strongest signal here).  Empty
    bins contribute nothing.  A total output variance <= 1e-12 short-
    circuits to eta = 0.
    """
    px = input_frame.pixels if isinstance(input_frame, Frame) else np.asarray(input_frame)
    if px.ndim != 2:
        raise ShapeError(f"input frame must be 2-D, got shape {px.shape}")
    y = np.asarray(output, dtype=np.float64)
    if y.ndim == 3 and y.shape[0] == 1:
        y = y[0]
    if y.shape != px.shape:
        raise ShapeError(
            f"output shape {np.asarray(output).shape} does not match "
            f"input frame shape {px.shape}"
        )

    bins = px.astype(np.int64).ravel()
    values = y.ravel()
    total = values.size
    counts = np.bincount(bins, minlength=256)
    sums = np.bincount(bins, weights=values, minlength=256)
    sq_sums = np.bincount(bins, weights=values * values, minlength=256)

    cond_var = np.zeros(256)
    nonzero = counts > 0
    means = np.zeros(256)
    means[nonzero] = sums[nonzero] / counts[nonzero]
    cond_var[nonzero] = np.maximum(
        sq_sums[nonzero] / counts[nonzero] - means[nonzero] ** 2, 0.0
    )

    mean = values.mean()
    total_var = float(np.maximum(values @ values / total - mean * mean, 0.0))

    if total_var <= VARIANCE_EPS:
        return CorrelationRatioResult(
            eta=0.0,
            within_ratio=1.0,
            bin_counts=counts,
            total_count=total,
            conditional_variances=cond_var,
            total_variance=total_var,
        )
    within = float(np.sum(counts * cond_var) / (total * total_var))
    return CorrelationRatioResult(
        eta=1.0 - within,
        within_ratio=within,
        bin_counts=counts,
        total_count=total,
        conditional_variances=cond_var,
        total_variance=total_var,
    )


def smooth_trace(raw, window_fraction=DEFAULT_WINDOW_FRACTION):
    """Local linear regression smoothing with tricube weights.

    Each point is refit over a centered window of
    ``ceil(window_fraction * length)`` points (shifted to stay inside the
    series at the boundaries).  A window of 2 points or fewer cannot
    support a local line; the series is returned unchanged with a logged
    warning.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"series must be 1-D with length >= 2, got shape {x.shape}")
    if not 0 < window_fraction <= 1:
        raise ConfigError(f"window_fraction must be in (0, 1], got {window_fraction}")
    n = x.size
    k = min(n, math.ceil(window_fraction * n))
    if k <= 2:
        log.warning(
            "smoothing window of %d points is degenerate; returning series unchanged", k
        )
        return x.copy()

    out = np.empty(n)
    half = (k - 1) // 2
    for i in range(n):
        lo = min(max(i - half, 0), n - k)
        t = np.arange(lo, lo + k, dtype=np.float64) - i
        yw = x[lo : lo + k]
        dmax = np.abs(t).max()
        u = np.abs(t) / dmax
        wts = (1.0 - u**3) ** 3
        sw = wts.sum()
        swt = wts @ t
        swy = wts @ yw
        swtt = wts @ (t * t)
        swty = wts @ (t * yw)
        denom = sw * swtt - swt * swt
        if abs(denom) < 1e-300:
            out[i] = swy / sw
        else:
            out[i] = (swtt * swy - swt * swty) / denom
    return out


@dataclass
class Event:
    """A detected burst or onset; start/end are inclusive frame indices."""

    kind: str
    start: int
    end: int

    @property
    def length(self):
        return self.end - self.start + 1


def _runs_at_or_above(series, threshold):
    """Maximal runs of series >= threshold as (start, end) inclusive pairs."""
    above = np.asarray(series) >= threshold
    runs = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(above) - 1))
    return runs


def detect_events(smoothed, raw, threshold=DEFAULT_THRESHOLD, sustain=DEFAULT_SUSTAIN):
    """Find intermittency bursts and the sustained onset, if any.

    Onset is the first index where the smoothed series stays at or above
    the threshold for at least ``sustain`` consecutive frames.
    Intermittency events are maximal raw-series runs at or above the
    threshold that end before the onset and are shorter than ``sustain``.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    r = np.asarray(raw, dtype=np.float64)
    if s.shape != r.shape:
        raise ShapeError(f"smoothed shape {s.shape} != raw shape {r.shape}")
    if sustain < 1:
        raise ConfigError(f"sustain must be >= 1, got {sustain}")

    onset = None
    for start, end in _runs_at_or_above(s, threshold):
        if end - start + 1 >= sustain:
            onset = Event("onset", start, end)
            break

    events = []
    limit = onset.start if onset is not None else len(r)
    for start, end in _runs_at_or_above(r, threshold):
        if end < limit and end - start + 1 < sustain:
            events.append(Event("intermittency", start, end))
    if onset is not None:
        events.append(onset)
    return events


def soft_labels(smoothed):
    """Min-max normalize a smoothed trace to [0, 1].

    A constant series carries no ordering information and maps to 0.5
    everywhere.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    if s.size == 0:
        raise ValueError("series must be nonempty")
    lo = s.min()
    span = s.max() - lo
    if span == 0.0:
        return np.full(s.shape, 0.5)
    return (s - lo) / span


@dataclass
class InstabilityTrace:
    """Per-frame raw and smoothed measures, detected events, soft labels."""

    raw: np.ndarray
    smoothed: np.ndarray
    events: list = field(default_factory=list)
    soft_labels: np.ndarray = None

    @property
    def onset(self):
        for e in self.events:
            if e.kind == "onset":
                return e
        return None

    def intermittency_events(self):
        return [e for e in self.events if e.kind == "intermittency"]


def _measure_chunk(model, frames):
    batch = np.stack([normalize(f) for f in frames])
    outputs, _ = forward(model, batch)
    return [correlation_ratio(f, out).eta for f, out in zip(frames, outputs)]


def analyze_sequence(
    model,
    frames,
    threshold=DEFAULT_THRESHOLD,
    sustain=DEFAULT_SUSTAIN,
    window_fraction=DEFAULT_WINDOW_FRACTION,
    workers=1,
    chunk_size=64,
):
    """Run frames through the model and assemble the instability trace.

    Per frame: normalize, forward, correlation ratio against the input.
    The raw series is then smoothed, events detected, and soft labels
    assigned.  Frames are processed in chunks; with ``workers > 1``
    chunks fan out to a thread pool, results kept in stream order.
    """
    frames = list(frames)
    if not frames:
        raise ConfigError("cannot analyze an empty frame sequence")
    expect = tuple(model.config.input_shape)
    got = (1,) + frames[0].pixels.shape
    if got != expect:
        raise ShapeError(
            f"frame shape {got} does not match network input {expect}"
        )
    chunks = [frames[lo : lo + chunk_size] for lo in range(0, len(frames), chunk_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _measure_chunk(model, c), chunks))
    else:
        results = [_measure_chunk(model, c) for c in chunks]
    raw = np.array([eta for part in results for eta in part])
    smoothed = smooth_trace(raw, window_fraction) if raw.size >= 2 else raw.copy()
    events = detect_events(smoothed, raw, threshold=threshold, sustain=sustain)
    return InstabilityTrace(
        raw=raw,
        smoothed=smoothed,
        events=events,
        soft_labels=soft_labels(smoothed),
    )


def write_trace_csv(trace, path):
    """Trace CSV: frame_index,raw,smoothed,soft_label,event.

    The event column labels every frame inside a detected event's span
    with its kind, empty elsewhere.
    """
    kinds = [""] * len(trace.raw)
    for e in trace.events:
        for i in range(e.start, e.end + 1):
            kinds[i] = e.kind
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("frame_index,raw,smoothed,soft_label,event\n")
        for i in range(len(trace.raw)):
            fh.write(
                f"{i},{float(trace.raw[i])!r},{float(trace.smoothed[i])!r},"
                f"{float(trace.soft_labels[i])!r},{kinds[i]}\n"
            )
    os.replace(tmp, path)
