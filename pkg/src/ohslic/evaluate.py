"""Metrics, per-pixel baselines, and the benchmark harness.

All methods emit the same artifacts per cube: an HxWx3 pigment output, a
predicted tree mask, and per-line wall times measured with the same harness.
Regression quality is scored over true-tree pixels only, pooled across
cubes; missed trees therefore cost the method the full squared truth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ohslic.clustering import OhslicConfig, run_cube
from ohslic.control import measure
from ohslic.hsdata import LabeledCube

log = logging.getLogger(__name__)

WARMUP_LINES = 10  # discarded from timing statistics per cube
CONTENT_COLUMNS = ("ab", "ar", "ant")
LABEL_INDEX = {"ab": 1, "ar": 2, "ant": 6}  # columns in the 7-vector labels


def dice_background(pred_tree: np.ndarray, true_tree: np.ndarray) -> float:
    """Dice overlap of the background class: 2|P&T| / (|P|+|T|) where P and T
    are the predicted and true background pixel sets; empty/empty gives 1."""
    p = np.asarray(pred_tree, dtype=bool)
    t = np.asarray(true_tree, dtype=bool)
    if p.shape != t.shape:
        raise ValueError("mask shapes differ")
    pb = ~p
    tb = ~t
    denom = pb.sum() + tb.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float((pb & tb).sum()) / float(denom)


def r2(predictions: np.ndarray, truths: np.ndarray) -> float:
    """Coefficient of determination; -inf when the truths are constant."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("length mismatch")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("-inf")
    ss_res = float(((t - p) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def baseline_pc(cube: LabeledCube, model):
    """Classify every pixel on its own spectrum, one inference per pixel."""
    h, w = cube.height, cube.width
    outputs = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    times = []
    for row in range(h):
        line = cube.data[row].astype(np.float64)
        with measure() as t:
            for col in range(w):
                pred = model.predict_cluster(line[col])
                if pred.is_tree:
                    outputs[row, col] = pred.contents()
                    mask[row, col] = True
        times.append(t.elapsed_ms)
    return outputs, mask, times


def _window_means(line: np.ndarray, window: int) -> np.ndarray:
    """Centered sliding-window mean along the pixel axis, edges clamped."""
    w = line.shape[0]
    half = window // 2
    idx = np.clip(np.arange(w)[:, None] + np.arange(-half, half + 1)[None, :], 0, w - 1)
    return line[idx].mean(axis=1)


def baseline_apc(cube: LabeledCube, model, window: int = 5):
    """Classify every pixel on the mean spectrum of its centered window."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window > cube.width:
        raise ValueError("window larger than the line")
    h, w = cube.height, cube.width
    outputs = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    times = []
    for row in range(h):
        line = cube.data[row].astype(np.float64)
        with measure() as t:
            averaged = _window_means(line, window)
            for col in range(w):
                pred = model.predict_cluster(averaged[col])
                if pred.is_tree:
                    outputs[row, col] = pred.contents()
                    mask[row, col] = True
        times.append(t.elapsed_ms)
    return outputs, mask, times


METHODS = ("PC", "APC", "OHSLIC-C", "OHSLIC-C-C")


def run_method(method: str, cube: LabeledCube, model, ohslic_config: OhslicConfig):
    """Dispatch one method on one cube -> (outputs, tree mask, line times)."""
    if method == "PC":
        return baseline_pc(cube, model)
    if method == "APC":
        return baseline_apc(cube, model)
    if method in ("OHSLIC-C", "OHSLIC-C-C"):
        cfg_kwargs = {
            k: getattr(ohslic_config, k)
            for k in (
                "k_init",
                "w_spatial",
                "w_spectral",
                "confidence_threshold",
                "update_stride",
                "centroid_decay",
                "window_factor",
                "distance_form",
                "stale_line_limit",
            )
        }
        cfg = OhslicConfig(confidence_feedback=(method == "OHSLIC-C-C"), **cfg_kwargs)
        outputs, mask, times, _ = run_cube(cube, model, cfg)
        return outputs, mask, times
    raise ValueError(f"unknown method: {method!r}")


@dataclass
class MethodResult:
    method: str
    dice_background: float
    r2_ab: float
    r2_ar: float
    r2_ant: float
    mean_ms: float
    std_ms: float
    lines_timed: int

    @property
    def r2_mean(self) -> float:
        return (self.r2_ab + self.r2_ar + self.r2_ant) / 3.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms if self.mean_ms > 0 else float("inf")

    def metrics_dict(self) -> dict:
        return {
            "dice_background": self.dice_background,
            "r2_ab": self.r2_ab,
            "r2_ar": self.r2_ar,
            "r2_ant": self.r2_ant,
            "r2_mean": self.r2_mean,
        }

    def timing_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "fps": self.fps,
            "lines_timed": self.lines_timed,
        }


@dataclass
class EvalReport:
    rows: list[MethodResult]
    sweep: list[dict] = field(default_factory=list)
    dataset_hash: str | None = None
    config_snapshot: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "dataset_hash": self.dataset_hash,
            "config": self.config_snapshot,
            "rows": [
                {"method": r.method, "metrics": r.metrics_dict(), "timing": r.timing_dict()}
                for r in self.rows
            ],
            "sweep": [
                {
                    "k": s["k"],
                    "metrics": {key: s[key] for key in ("r2_mean", "r2_ab", "r2_ar", "r2_ant", "dice_background")},
                    "timing": {"mean_ms": s["mean_ms"], "std_ms": s["std_ms"]},
                }
                for s in self.sweep
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        header = f"{'Method':<12} {'Dice':>7} {'R2':>7} {'inference time (ms)':>22} {'fps':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.method:<12} {r.dice_background:>7.3f} {r.r2_mean:>7.3f} "
                f"{r.mean_ms:>14.2f} +- {r.std_ms:<5.2f} {r.fps:>8.1f}"
            )
        return "\n".join(lines)


def _pooled_metrics(per_cube: list[tuple]) -> dict:
    """Pool per-cube (outputs, pred mask, cube) into one metric row."""
    bg_p = bg_t = bg_both = 0
    preds = {k: [] for k in CONTENT_COLUMNS}
    truths = {k: [] for k in CONTENT_COLUMNS}
    for outputs, mask, cube in per_cube:
        t = cube.tree_mask
        p = mask
        bg_p += int((~p).sum())
        bg_t += int((~t).sum())
        bg_both += int((~p & ~t).sum())
        for j, key in enumerate(CONTENT_COLUMNS):
            preds[key].append(outputs[:, :, j][t])
            truths[key].append(cube.labels[:, :, LABEL_INDEX[key]][t].astype(np.float64))
    dice = 1.0 if (bg_p + bg_t) == 0 else 2.0 * bg_both / (bg_p + bg_t)
    out = {"dice_background": dice}
    for key in CONTENT_COLUMNS:
        out[f"r2_{key}"] = r2(np.concatenate(preds[key]), np.concatenate(truths[key]))
    return out


def _timing_stats(all_times: list[list[float]]) -> tuple[float, float, int]:
    kept = np.concatenate([np.asarray(t[WARMUP_LINES:]) for t in all_times if len(t) > WARMUP_LINES])
    if kept.size == 0:
        kept = np.concatenate([np.asarray(t) for t in all_times])
    return float(kept.mean()), float(kept.std()), int(kept.size)


def benchmark(
    cubes: list[LabeledCube],
    model,
    ohslic_config: OhslicConfig,
    methods: tuple[str, ...] = METHODS,
    k_sweep: tuple[int, ...] = (),
    dataset_hash: str | None = None,
    config_snapshot: dict | None = None,
) -> EvalReport:
    """Run every method over the cubes; optionally sweep the cluster count.

    The sweep uses the feedback-free variant so each row reflects exactly one
    cluster count.
    """
    if not cubes:
        raise ValueError("no cubes to benchmark")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")

    rows = []
    for method in methods:
        per_cube = []
        all_times = []
        for cube in cubes:
            outputs, mask, times = run_method(method, cube, model, ohslic_config)
            per_cube.append((outputs, mask, cube))
            all_times.append(times)
        metrics = _pooled_metrics(per_cube)
        mean_ms, std_ms, n = _timing_stats(all_times)
        rows.append(
            MethodResult(
                method=method,
                mean_ms=mean_ms,
                std_ms=std_ms,
                lines_timed=n,
                **metrics,
            )
        )
        log.info("benchmark %s: %s", method, rows[-1].metrics_dict())

    sweep = []
    for k in k_sweep:
        cfg_kwargs = {
            key: getattr(ohslic_config, key)
            for key in (
                "w_spatial",
                "w_spectral",
                "confidence_threshold",
                "update_stride",
                "centroid_decay",
                "window_factor",
                "distance_form",
                "stale_line_limit",
            )
        }
        cfg = OhslicConfig(k_init=k, confidence_feedback=False, **cfg_kwargs)
        per_cube = []
        all_times = []
        for cube in cubes:
            outputs, mask, times, _ = run_cube(cube, model, cfg)
            per_cube.append((outputs, mask, cube))
            all_times.append(times)
        metrics = _pooled_metrics(per_cube)
        mean_ms, std_ms, _ = _timing_stats(all_times)
        entry = {"k": k, "mean_ms": mean_ms, "std_ms": std_ms, **metrics}
        entry["r2_mean"] = (metrics["r2_ab"] + metrics["r2_ar"] + metrics["r2_ant"]) / 3.0
        sweep.append(entry)
        log.info("k-sweep k=%d: r2_mean=%.3f dice=%.3f", k, entry["r2_mean"], entry["dice_background"])

    return EvalReport(
        rows=rows,
        sweep=sweep,
        dataset_hash=dataset_hash,
        config_snapshot=config_snapshot or {},
    )
