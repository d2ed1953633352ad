"""Adaptive cluster-count controller: keeps smoothed per-line processing time
inside a configured band by proportional steps on the cluster target."""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass


@dataclass
class ControllerConfig:
    t_lo: float = 8.0  # ms
    t_hi: float = 12.0  # ms
    hard_limit: float = 20.0  # ms
    k_min: int = 8
    k_max: int = 200
    step: float = 2.0  # clusters per ms of band violation
    ema_beta: float = 0.2
    history_len: int = 100_000

    def __post_init__(self):
        if not 0 < self.t_lo < self.t_hi <= self.hard_limit:
            raise ValueError("need 0 < t_lo < t_hi <= hard_limit")
        if self.k_min < 2 or self.k_max < self.k_min:
            raise ValueError("need k_max >= k_min >= 2")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if not 0 < self.ema_beta <= 1:
            raise ValueError("ema_beta must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "t_lo": self.t_lo,
            "t_hi": self.t_hi,
            "hard_limit": self.hard_limit,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "step": self.step,
            "ema_beta": self.ema_beta,
            "history_len": self.history_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        return cls(**d)


class ClusterController:
    """Dead-band proportional controller over EMA-smoothed line times.

    One tick per processed line, after the line finishes; the returned target
    applies from the next line on.
    """

    def __init__(self, config: ControllerConfig, k_init: int | None = None):
        self.config = config
        self.k_target = int(
            min(config.k_max, max(config.k_min, k_init if k_init is not None else config.k_min))
        )
        self.smoothed_time_ms: float | None = None
        self.violation_count = 0
        self.line = 0
        self.history: deque[tuple[int, float, int]] = deque(maxlen=config.history_len)

    def tick(self, measured_ms: float) -> int:
        if measured_ms < 0:
            raise ValueError("measured time must be non-negative")
        cfg = self.config
        if measured_ms > cfg.hard_limit:
            self.violation_count += 1
        beta = cfg.ema_beta
        if self.smoothed_time_ms is None:
            self.smoothed_time_ms = float(measured_ms)
        else:
            self.smoothed_time_ms = (1 - beta) * self.smoothed_time_ms + beta * measured_ms
        s = self.smoothed_time_ms
        if s > cfg.t_hi:
            self.k_target = max(cfg.k_min, self.k_target - math.ceil(cfg.step * (s - cfg.t_hi)))
        elif s < cfg.t_lo:
            self.k_target = min(cfg.k_max, self.k_target + math.ceil(cfg.step * (cfg.t_lo - s)))
        self.history.append((self.line, float(measured_ms), self.k_target))
        self.line += 1
        return self.k_target

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["line", "ms", "k"])
            writer.writerows(self.history)


class measure:
    """Context manager timing a block on the monotonic clock.

    with measure() as t:
        ...
    t.elapsed_ms
    """

    def __enter__(self) -> "measure":
        self.elapsed_ms = 0.0
        self._t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed_ms = (time.perf_counter_ns() - self._t0) / 1e6
