"""
In-process counters and timing histograms for solver sweeps, optimizer
iterations and call durations.

Logged at the end of a CLI run; never written into run artifacts, which must
stay byte-identical for a fixed seed.
"""

import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from typing import Any, Dict, List

import numpy as np

from app.utils.logger import get_logger

logger = get_logger(__name__)

_counters: Dict[str, int] = defaultdict(int)
_timings: Dict[str, List[float]] = defaultdict(list)
_lock = threading.Lock()

MAX_TIMING_SAMPLES = 500  # per name, oldest dropped first


def inc(name: str, value: int = 1) -> None:
    with _lock:
        _counters[name] += int(value)


def observe(name: str, value: float) -> None:
    """Record one timing sample in milliseconds."""
    with _lock:
        samples = _timings[name]
        samples.append(float(value))
        del samples[:-MAX_TIMING_SAMPLES]


@contextmanager
def track_duration(service: str, operation: str = "call"):
    """
    Time the wrapped block and count it as success or error.

        with track_duration("hjb", "finite_horizon"):
            fields = solve_finite_horizon(...)
    """
    start = time.perf_counter()
    status = "error"
    try:
        yield
        status = "success"
    finally:
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        observe(f"{service}.{operation}.duration_ms", elapsed_ms)
        inc(f"{service}.{operation}.{status}")
        log = logger.debug if status == "success" else logger.warning
        log("metrics.call", extra={"service": service, "operation": operation,
                                   "duration_ms": round(elapsed_ms, 1), "status": status})


def get_snapshot() -> Dict[str, Any]:
    """Counters plus count/total/p50/p95/max per timing name."""
    with _lock:
        counters = dict(_counters)
        timings = {name: np.array(samples) for name, samples in _timings.items() if samples}
    summaries = {
        name: {
            "count": int(values.size),
            "total": round(float(values.sum()), 1),
            "p50": round(float(np.percentile(values, 50)), 1),
            "p95": round(float(np.percentile(values, 95)), 1),
            "max": round(float(values.max()), 1),
        }
        for name, values in timings.items()
    }
    return {"counters": counters, "timings": summaries}


def reset() -> None:
    with _lock:
        _counters.clear()
        _timings.clear()
