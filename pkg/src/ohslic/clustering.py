"""Online per-line clustering: weighted spectral+spatial assignment with
incremental centroid updates, confidence-driven splitting, and cluster-count
retargeting.

The per-line scan is sequential by contract (centroids re-estimate as pixels
arrive) and runs as a compiled kernel; everything around it is plain Python
on a small cluster list.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ohslic.hsdata import SpectralLine

log = logging.getLogger(__name__)


@dataclass
class OhslicConfig:
    k_init: int = 40
    w_spatial: float = 40.0
    w_spectral: float = 10.0
    confidence_threshold: float = 0.7
    update_stride: int = 1  # centroid re-estimation every u assigned pixels
    centroid_decay: float = 0.3  # cross-line EMA weight on the new line mean
    window_factor: float = 2.0  # candidate window = factor * spacing
    confidence_feedback: bool = True
    distance_form: str = "additive"  # or "quadrature"
    stale_line_limit: int = 5  # empty for this many lines -> recycled

    def __post_init__(self):
        if self.k_init < 2:
            raise ValueError("k_init must be >= 2")
        if self.w_spatial <= 0 or self.w_spectral <= 0:
            raise ValueError("distance weights must be positive")
        if not 0.5 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence threshold must be in [0.5, 1]")
        if self.update_stride < 1:
            raise ValueError("update_stride must be >= 1")
        if not 0.0 < self.centroid_decay <= 1.0:
            raise ValueError("centroid_decay must be in (0, 1]")
        if self.window_factor <= 0:
            raise ValueError("window_factor must be positive")
        if self.distance_form not in ("additive", "quadrature"):
            raise ValueError(f"unknown distance form: {self.distance_form!r}")


@dataclass
class Cluster:
    id: int
    centroid_spectrum: np.ndarray
    centroid_col: float
    count: int = 0  # pixels absorbed on the latest line
    lifetime_count: int = 0
    last_confidence: float = 1.0
    split_pending: bool = False
    staleness: int = 0


@dataclass
class ClusterState:
    clusters: list[Cluster]
    width: int
    line_counter: int = 0
    next_id: int = 0
    fallback_count: int = 0
    split_events: list[tuple[int, int]] = field(default_factory=list)

    @property
    def spacing(self) -> float:
        return self.width / len(self.clusters)

    def cluster_by_id(self, cid: int) -> Cluster:
        for c in self.clusters:
            if c.id == cid:
                return c
        raise KeyError(f"no cluster with id {cid}")

    def sort_clusters(self) -> None:
        self.clusters.sort(key=lambda c: (c.centroid_col, c.id))

    def validate(self) -> None:
        assert len(self.clusters) >= 2
        ids = [c.id for c in self.clusters]
        assert len(set(ids)) == len(ids)
        cols = [c.centroid_col for c in self.clusters]
        assert all(a <= b for a, b in zip(cols, cols[1:]))
        assert all(0.0 <= c < self.width for c in cols)


@dataclass
class LineAssignment:
    labels: np.ndarray  # (width,) cluster ids
    cluster_means: dict[int, np.ndarray]  # id -> mean member spectrum
    member_counts: dict[int, int]
    fallbacks: int = 0


def init_clusters(config: OhslicConfig, width: int, first_line: SpectralLine) -> ClusterState:
    """Seed k_init clusters evenly across the line, spectra copied from the
    pixels under the seed columns."""
    if width < config.k_init:
        raise ValueError(f"width {width} < k_init {config.k_init}")
    if first_line.width != width:
        raise ValueError("first line width mismatch")
    clusters = []
    for i in range(config.k_init):
        col = (i + 0.5) * width / config.k_init
        clusters.append(
            Cluster(
                id=i,
                centroid_spectrum=first_line.values[int(col)].astype(np.float64).copy(),
                centroid_col=float(col),
            )
        )
    return ClusterState(clusters=clusters, width=width, next_id=config.k_init)


def pixel_distance(
    pixel_spectrum: np.ndarray,
    pixel_col: float,
    cluster: Cluster,
    config: OhslicConfig,
    spacing: float,
) -> float:
    """Weighted combination of normalized spectral and spatial distances."""
    p = np.asarray(pixel_spectrum, dtype=np.float64)
    if p.shape != cluster.centroid_spectrum.shape:
        raise ValueError("band count mismatch between pixel and centroid")
    d_spec = float(np.sqrt(((p - cluster.centroid_spectrum) ** 2).sum()) / np.sqrt(p.size))
    d_spat = abs(float(pixel_col) - cluster.centroid_col) / spacing
    if config.distance_form == "quadrature":
        return float(np.hypot(config.w_spectral * d_spec, config.w_spatial * d_spat))
    return config.w_spectral * d_spec + config.w_spatial * d_spat


@njit(cache=True)
def _scan_line(pixels, start_spec, start_col, ids, w_spec, w_spat, spacing, window, stride, quadrature):
    """Sequential pixel scan: windowed arg-min assignment with running-mean
    centroid re-estimation every `stride` pixels.  Returns cluster indices,
    per-cluster sums/counts, and the fallback count."""
    n_pix, n_bands = pixels.shape
    n_clusters = start_spec.shape[0]
    inv_sqrt_b = 1.0 / np.sqrt(n_bands)
    work_spec = start_spec.copy()
    work_col = start_col.copy()
    sums = np.zeros((n_clusters, n_bands))
    col_sums = np.zeros(n_clusters)
    counts = np.zeros(n_clusters, dtype=np.int64)
    changed = np.zeros(n_clusters, dtype=np.uint8)
    labels = np.empty(n_pix, dtype=np.int64)
    fallbacks = 0
    since_update = 0
    for i in range(n_pix):
        x = float(i)
        best = -1
        best_d = 0.0
        best_id = 0
        for pass_no in range(2):
            for c in range(n_clusters):
                dcol = work_col[c] - x
                if dcol < 0.0:
                    dcol = -dcol
                if pass_no == 0 and dcol > window:
                    continue
                ss = 0.0
                for b in range(n_bands):
                    diff = pixels[i, b] - work_spec[c, b]
                    ss += diff * diff
                d_spec = np.sqrt(ss) * inv_sqrt_b
                d_spat = dcol / spacing
                if quadrature:
                    a = w_spec * d_spec
                    s = w_spat * d_spat
                    d = np.sqrt(a * a + s * s)
                else:
                    d = w_spec * d_spec + w_spat * d_spat
                if best < 0 or d < best_d or (d == best_d and ids[c] < best_id):
                    best = c
                    best_d = d
                    best_id = ids[c]
            if best >= 0:
                break
            fallbacks += 1  # nothing in the window: fall back to a full scan
        labels[i] = best
        counts[best] += 1
        col_sums[best] += x
        for b in range(n_bands):
            sums[best, b] += pixels[i, b]
        changed[best] = 1
        since_update += 1
        if since_update >= stride:
            since_update = 0
            for c in range(n_clusters):
                if changed[c] == 1:
                    inv = 1.0 / counts[c]
                    for b in range(n_bands):
                        work_spec[c, b] = sums[c, b] * inv
                    work_col[c] = col_sums[c] * inv
                    changed[c] = 0
    return labels, sums, col_sums, counts, fallbacks


def assign_line(state: ClusterState, line: SpectralLine, config: OhslicConfig) -> LineAssignment:
    """Assign every pixel of a reflectance line, update centroids.

    During the scan each cluster's working centroid is the running mean of
    the pixels it absorbed this line (refreshed every `update_stride`
    pixels).  At line end the persistent centroid moves toward the line mean
    by the centroid_decay factor.
    """
    if line.kind != "reflectance":
        raise ValueError("assign_line expects a reflectance line")
    if line.width != state.width:
        raise ValueError("line width does not match cluster state")
    k = len(state.clusters)
    bands = state.clusters[0].centroid_spectrum.size
    if line.bands != bands:
        raise ValueError("band count mismatch between line and clusters")

    start_spec = np.empty((k, bands))
    start_col = np.empty(k)
    ids = np.empty(k, dtype=np.int64)
    for i, c in enumerate(state.clusters):
        start_spec[i] = c.centroid_spectrum
        start_col[i] = c.centroid_col
        ids[i] = c.id

    spacing = state.spacing
    idx_labels, sums, col_sums, counts, fallbacks = _scan_line(
        np.ascontiguousarray(line.values, dtype=np.float64),
        start_spec,
        start_col,
        ids,
        float(config.w_spectral),
        float(config.w_spatial),
        float(spacing),
        float(config.window_factor * spacing),
        int(config.update_stride),
        config.distance_form == "quadrature",
    )
    if fallbacks:
        state.fallback_count += int(fallbacks)
        log.debug("line %d: %d window fallbacks", state.line_counter, fallbacks)

    alpha = config.centroid_decay
    means: dict[int, np.ndarray] = {}
    member_counts: dict[int, int] = {}
    for i, c in enumerate(state.clusters):
        n = int(counts[i])
        c.count = n
        if n > 0:
            mean_spec = sums[i] / n
            mean_col = col_sums[i] / n
            means[c.id] = mean_spec
            member_counts[c.id] = n
            c.centroid_spectrum = (1.0 - alpha) * c.centroid_spectrum + alpha * mean_spec
            c.centroid_col = (1.0 - alpha) * c.centroid_col + alpha * mean_col
            c.lifetime_count += n
            c.staleness = 0
        else:
            c.staleness += 1
    state.sort_clusters()
    state.line_counter += 1
    return LineAssignment(
        labels=ids[idx_labels],
        cluster_means=means,
        member_counts=member_counts,
        fallbacks=int(fallbacks),
    )


def apply_confidence(state: ClusterState, predictions, config: OhslicConfig) -> None:
    """Record classifier confidences; flag low-confidence clusters to split
    at the start of the next line (strictly below the threshold)."""
    for pred in predictions:
        cluster = state.cluster_by_id(pred.cluster_id)
        if cluster.count == 0:
            raise ValueError(f"prediction for cluster {pred.cluster_id} with no members")
        cluster.last_confidence = pred.confidence
        if config.confidence_feedback and pred.confidence < config.confidence_threshold:
            cluster.split_pending = True


def _split_cluster(state: ClusterState, cluster: Cluster) -> None:
    """Replace a cluster by two children at +-spacing/4, spectra copied."""
    offset = state.spacing / 4.0
    half_life = max(1, cluster.lifetime_count // 2)
    lo = float(np.clip(cluster.centroid_col - offset, 0.0, state.width - 1e-9))
    hi = float(np.clip(cluster.centroid_col + offset, 0.0, state.width - 1e-9))
    left = Cluster(
        id=cluster.id,
        centroid_spectrum=cluster.centroid_spectrum.copy(),
        centroid_col=lo,
        lifetime_count=half_life,
        last_confidence=cluster.last_confidence,
    )
    right = Cluster(
        id=state.next_id,
        centroid_spectrum=cluster.centroid_spectrum.copy(),
        centroid_col=hi,
        lifetime_count=half_life,
        last_confidence=cluster.last_confidence,
    )
    state.next_id += 1
    state.clusters.remove(cluster)
    state.clusters.extend([left, right])
    state.sort_clusters()


def begin_line(state: ClusterState, config: OhslicConfig) -> None:
    """Start-of-line maintenance: recycle stale clusters, apply pending splits."""
    stale = [c for c in state.clusters if c.staleness >= config.stale_line_limit]
    for c in stale:
        if len(state.clusters) <= 2 or c not in state.clusters:
            continue
        state.clusters.remove(c)
        largest = max(state.clusters, key=lambda x: (x.count, -x.id))
        _split_cluster(state, largest)

    pending = [c for c in state.clusters if c.split_pending]
    for c in pending:
        c.split_pending = False
        state.split_events.append((state.line_counter, c.id))
        _split_cluster(state, c)


def set_target_clusters(state: ClusterState, k_target: int) -> None:
    """Merge closest adjacent pairs or split the largest clusters until the
    live cluster count equals k_target."""
    if k_target < 2:
        raise ValueError("k_target must be >= 2")
    while len(state.clusters) > k_target:
        best_i = 0
        best_d = np.inf
        for i in range(len(state.clusters) - 1):
            a, b = state.clusters[i], state.clusters[i + 1]
            d = float(np.sqrt(((a.centroid_spectrum - b.centroid_spectrum) ** 2).sum()))
            if d < best_d:
                best_d = d
                best_i = i
        a, b = state.clusters[best_i], state.clusters[best_i + 1]
        wa = max(a.lifetime_count, 1)
        wb = max(b.lifetime_count, 1)
        merged = Cluster(
            id=min(a.id, b.id),
            centroid_spectrum=(wa * a.centroid_spectrum + wb * b.centroid_spectrum) / (wa + wb),
            centroid_col=(wa * a.centroid_col + wb * b.centroid_col) / (wa + wb),
            count=a.count + b.count,
            lifetime_count=a.lifetime_count + b.lifetime_count,
            last_confidence=(wa * a.last_confidence + wb * b.last_confidence) / (wa + wb),
            staleness=min(a.staleness, b.staleness),
        )
        state.clusters[best_i : best_i + 2] = [merged]
    while len(state.clusters) < k_target:
        largest = max(state.clusters, key=lambda c: (c.count, -c.id))
        _split_cluster(state, largest)
    state.sort_clusters()


@dataclass
class LineResult:
    output: np.ndarray  # (width, 3) pigment predictions, zero off-tree
    tree_mask: np.ndarray  # (width,) bool
    elapsed_ms: float
    labels: np.ndarray
    k_after: int


def process_line(
    state: ClusterState,
    line: SpectralLine,
    config: OhslicConfig,
    model,
    controller=None,
    k_target: int | None = None,
) -> LineResult:
    """One full pipeline step: maintenance, assignment, per-cluster
    classification, confidence feedback, then cluster-count control.

    The wall-clock time of everything before the control step is reported to
    the controller; the controller's new target (or the fixed `k_target`) is
    applied afterwards so the next line starts at the requested count.
    """
    t0 = time.perf_counter_ns()
    begin_line(state, config)
    assignment = assign_line(state, line, config)
    predictions = {
        cid: model.predict_cluster(mean, cluster_id=cid)
        for cid, mean in assignment.cluster_means.items()
    }
    apply_confidence(state, predictions.values(), config)

    width = line.width
    output = np.zeros((width, 3))
    tree_mask = np.zeros(width, dtype=bool)
    for cid, pred in predictions.items():
        if pred.is_tree:
            members = assignment.labels == cid
            output[members] = pred.contents()
            tree_mask[members] = True
    elapsed_ms = (time.perf_counter_ns() - t0) / 1e6

    if controller is not None:
        set_target_clusters(state, controller.tick(elapsed_ms))
    elif k_target is not None:
        set_target_clusters(state, k_target)
    return LineResult(
        output=output,
        tree_mask=tree_mask,
        elapsed_ms=elapsed_ms,
        labels=assignment.labels,
        k_after=len(state.clusters),
    )


def run_cube(cube, model, config: OhslicConfig, controller=None, hold_k: bool = True):
    """Stream a cube line by line; returns (outputs HxWx3, tree mask HxW,
    per-line ms list, final state)."""
    state = init_clusters(config, cube.width, cube.line(0))
    outputs = np.zeros((cube.height, cube.width, 3))
    mask = np.zeros((cube.height, cube.width), dtype=bool)
    times = []
    fixed_k = config.k_init if (controller is None and hold_k) else None
    for row in range(cube.height):
        res = process_line(
            state, cube.line(row), config, model, controller=controller, k_target=fixed_k
        )
        outputs[row] = res.output
        mask[row] = res.tree_mask
        times.append(res.elapsed_ms)
    return outputs, mask, times, state


def cluster_snapshot(state: ClusterState) -> list[dict]:
    """Diagnostic per-line cluster dump (JSON-serializable)."""
    return [
        {
            "id": c.id,
            "col": round(c.centroid_col, 3),
            "count": c.count,
            "confidence": round(c.last_confidence, 4),
        }
        for c in state.clusters
    ]
