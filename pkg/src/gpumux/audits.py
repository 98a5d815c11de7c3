"""Trace audits: structural properties every run must satisfy."""

from __future__ import annotations

from .engine import MetricsTrace

_EPS = 1e-9


class InvariantViolation(Exception):
    pass


def check_temporal_exclusivity(trace: MetricsTrace):
    """At most one timeslice group active at any instant."""
    windows = sorted(trace.windows, key=lambda w: (w[1], w[2]))
    for (tsg_a, _, end_a), (tsg_b, start_b, _) in zip(windows, windows[1:]):
        if end_a > start_b + _EPS:
            raise InvariantViolation(
                f"groups {tsg_a} and {tsg_b} overlap: {end_a} > {start_b}")


def check_fifo_completion(trace: MetricsTrace):
    """Buffers complete in submission order within each channel."""
    last_seq: dict[int, int] = {}
    for ev in trace.events:
        if ev["event"] != "buffer_complete":
            continue
        ch = ev["channel"]
        if ch in last_seq and ev["seq"] <= last_seq[ch]:
            raise InvariantViolation(
                f"channel {ch} completed seq {ev['seq']} after {last_seq[ch]}")
        last_seq[ch] = ev["seq"]


def check_semaphores_monotonic(trace: MetricsTrace):
    """Per stream, observed semaphore values strictly increase."""
    last: dict[int, int] = {}
    for ev in trace.events:
        if ev["event"] != "semaphore" or ev["stream"] is None:
            continue
        sid = ev["stream"]
        if sid in last and ev["value"] <= last[sid]:
            raise InvariantViolation(
                f"stream {sid} semaphore went {last[sid]} -> {ev['value']}")
        last[sid] = ev["value"]


def check_all(trace: MetricsTrace):
    check_temporal_exclusivity(trace)
    check_fifo_completion(trace)
    check_semaphores_monotonic(trace)


def interval_inside_windows(trace: MetricsTrace, start: float, end: float,
                            tsg: int) -> bool:
    """True when [start, end] lies inside one active slice of the given group."""
    return any(w_tsg == tsg and w0 - _EPS <= start and end <= w1 + _EPS
               for w_tsg, w0, w1 in trace.windows)
