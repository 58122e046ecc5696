"""Optional wall-clock profiling of training runs, gated on PROFILING_ENABLED."""
import functools
import logging
import time
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Dict, Optional

from m2net.config import settings

logger = logging.getLogger("m2net.profiling")


@dataclass
class StepTiming:
    total: float = 0.0
    calls: int = 0

    @property
    def mean(self) -> float:
        return self.total / self.calls if self.calls else 0.0


# Step timings of the run currently being profiled
profiling_context: ContextVar[Optional[Dict[str, StepTiming]]] = ContextVar("profiling_context", default=None)


@contextmanager
def profile_step(step_name: str):
    """Accumulate the time spent in a named step of the current run (no-op outside one)."""
    timings = profiling_context.get()
    if timings is None:
        yield
        return

    start_time = time.perf_counter()
    try:
        yield
    finally:
        timing = timings.setdefault(step_name, StepTiming())
        timing.total += time.perf_counter() - start_time
        timing.calls += 1


def format_timings(timings: Dict[str, StepTiming]) -> str:
    return " | ".join(f"{name}: {t.total:.4f}s over {t.calls} calls ({t.mean * 1000:.2f}ms each)"
                      for name, t in timings.items())


def profile_run(run_name: str):
    """Decorator timing a whole run and logging its per-step breakdown."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            if not settings.PROFILING_ENABLED:
                return func(*args, **kwargs)

            timings: Dict[str, StepTiming] = {}
            token = profiling_context.set(timings)
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                total_time = time.perf_counter() - start_time
                logger.info(f"PROFILING [{run_name}] Total: {total_time:.4f}s | {format_timings(timings)}")
                profiling_context.reset(token)
        return wrapper
    return decorator
