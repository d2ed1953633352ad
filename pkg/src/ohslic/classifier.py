"""Lightweight 1-D CNN with four heads: tree/background segmentation plus
three pigment regressions, trained on cluster-style pixel averages.

Everything is plain numpy in float64: forward, backward, and Adam live here
so gradients are exactly the derivatives of the forward pass (verified
against central finite differences in the test suite).

Model bundle format: uint32 LE manifest length, UTF-8 JSON manifest
(architecture, normalization stats, label scales, seed, dataset hash, tensor
table), then the raw float32 LE tensors in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from ohslic.hsdata import NORM_EPS, LabeledCube, NormStats, normalize_spectrum

# Fixed label scaling so regression targets are O(1) during training.
CONTENT_SCALES = np.array([50.0, 14.0, 5.0])  # ab, ar, ant
CONTENT_NAMES = ("ab", "ar", "ant")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteError(RuntimeError):
    """A forward/backward intermediate went non-finite."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: three conv blocks (kernel 5, ReLU, maxpool 2) and four
    two-layer heads on the flattened features."""

    bands: int
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    kernel_size: int = 5
    seg_hidden: int = 32
    reg_hidden: int = 16

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError("bands must be >= 1")
        if len(self.conv_channels) != 3:
            raise ValueError("exactly three conv blocks")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd (same padding)")

    @property
    def feature_len(self) -> int:
        length = self.bands
        for _ in self.conv_channels:
            length = (length + 1) // 2
        return self.conv_channels[-1] * length

    def to_dict(self) -> dict:
        return {
            "bands": self.bands,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "seg_hidden": self.seg_hidden,
            "reg_hidden": self.reg_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            bands=d["bands"],
            conv_channels=tuple(d["conv_channels"]),
            kernel_size=d["kernel_size"],
            seg_hidden=d["seg_hidden"],
            reg_hidden=d["reg_hidden"],
        )


HEAD_NAMES = ("seg", "ab", "ar", "ant")


def parameter_names(spec: NetworkSpec) -> list[str]:
    names = []
    for i in range(3):
        names += [f"conv{i}_w", f"conv{i}_b"]
    for head in HEAD_NAMES:
        names += [f"{head}_w1", f"{head}_b1", f"{head}_w2", f"{head}_b2"]
    return names


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal conv/hidden layers, smaller linear output layers, zero biases."""
    w: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c_out in enumerate(spec.conv_channels):
        fan_in = c_in * spec.kernel_size
        w[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, spec.kernel_size))
        w[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    feat = spec.feature_len
    for head, hidden, out in (
        ("seg", spec.seg_hidden, 2),
        ("ab", spec.reg_hidden, 1),
        ("ar", spec.reg_hidden, 1),
        ("ant", spec.reg_hidden, 1),
    ):
        w[f"{head}_w1"] = rng.normal(0.0, np.sqrt(2.0 / feat), (hidden, feat))
        w[f"{head}_b1"] = np.zeros(hidden)
        w[f"{head}_w2"] = rng.normal(0.0, np.sqrt(1.0 / hidden), (out, hidden))
        w[f"{head}_b2"] = np.zeros(out)
    return w


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """(N, C, L) -> (N, L, C*K) windows with zero same-padding."""
    pad = kernel // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)  # (N, C, L, K)
    n, c, length, k = win.shape
    return win.transpose(0, 2, 1, 3).reshape(n, length, c * k)


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Max-pool window 2, stride 2; odd tails pool over a single element."""
    n, c, length = x.shape
    padded_len = length + (length % 2)
    if padded_len != length:
        x = np.concatenate([x, np.full((n, c, 1), -np.inf)], axis=2)
    pairs = x.reshape(n, c, padded_len // 2, 2)
    idx = pairs.argmax(axis=3)
    out = np.take_along_axis(pairs, idx[..., None], axis=3)[..., 0]
    return out, idx, length


def _pool_backward(grad: np.ndarray, idx: np.ndarray, length: int) -> np.ndarray:
    n, c, half = grad.shape
    out = np.zeros((n, c, half * 2))
    np.put_along_axis(
        out.reshape(n, c, half, 2), idx[..., None], grad[..., None], axis=3
    )
    return out[:, :, :length]


def forward(
    weights: dict[str, np.ndarray],
    spec: NetworkSpec,
    x: np.ndarray,
    validate: bool = False,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Run the network on normalized spectra.

    x: (N, bands).  Returns (seg_logits (N, 2), regressions (N, 3) in scaled
    units, cache for backward).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.bands:
        raise ValueError(f"expected {spec.bands} bands, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network input")

    cache: dict = {"x": x}
    h = x[:, None, :]  # (N, 1, B)
    for i in range(3):
        cols = _im2col(h, spec.kernel_size)
        w = weights[f"conv{i}_w"]
        z = cols @ w.reshape(w.shape[0], -1).T + weights[f"conv{i}_b"]
        z = z.transpose(0, 2, 1)  # (N, C_out, L)
        if validate and not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite activation in conv block {i}")
        a = np.maximum(z, 0.0)
        pooled, idx, pre_len = _pool_forward(a)
        cache[f"conv{i}"] = (cols, z, idx, pre_len)
        h = pooled
    flat = h.reshape(h.shape[0], -1)
    cache["flat_shape"] = h.shape
    cache["flat"] = flat

    outputs = {}
    for head in HEAD_NAMES:
        z1 = flat @ weights[f"{head}_w1"].T + weights[f"{head}_b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ weights[f"{head}_w2"].T + weights[f"{head}_b2"]
        if validate and not np.all(np.isfinite(z2)):
            raise NonFiniteError(f"non-finite activation in head {head}")
        cache[head] = (z1, a1)
        outputs[head] = z2
    seg_logits = outputs["seg"]
    regs = np.concatenate([outputs[h] for h in CONTENT_NAMES], axis=1)
    if single:
        return seg_logits[0], regs[0], cache
    return seg_logits, regs, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TrainingLoss:
    seg: float
    reg: float

    @property
    def total(self) -> float:
        return self.seg + self.reg


def compute_loss(
    seg_logits: np.ndarray,
    regs: np.ndarray,
    is_tree: np.ndarray,
    targets_scaled: np.ndarray,
    label_smoothing: float = 0.0,
) -> TrainingLoss:
    """Mean cross-entropy plus per-head MSE summed over the three regressions.

    Regression error counts tree samples only; background rows are ignored.
    """
    n = seg_logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y = np.asarray(is_tree, dtype=np.int64)
    shifted = seg_logits - seg_logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if label_smoothing:
        target = np.full_like(log_probs, label_smoothing / 2.0)
        target[np.arange(n), y] = 1.0 - label_smoothing / 2.0
        seg = float(-(target * log_probs).sum(axis=1).mean())
    else:
        seg = float(-log_probs[np.arange(n), y].mean())
    tree = y == 1
    if tree.any():
        err = regs[tree] - targets_scaled[tree]
        reg = float((err**2).mean(axis=0).sum())
    else:
        reg = 0.0
    return TrainingLoss(seg=seg, reg=reg)


def loss_and_gradients(
    weights: dict[str, np.ndarray],
    spec: NetworkSpec,
    x: np.ndarray,
    is_tree: np.ndarray,
    targets_scaled: np.ndarray,
    label_smoothing: float = 0.0,
) -> tuple[TrainingLoss, dict[str, np.ndarray]]:
    """Total loss and its gradient for every weight tensor.

    `label_smoothing` softens the segmentation targets during training so
    softmax confidences stay calibrated on mixed spectra; 0 is the plain
    cross-entropy this module reports everywhere else.
    """
    seg_logits, regs, cache = forward(weights, spec, x, validate=True)
    n = x.shape[0]
    y = np.asarray(is_tree, dtype=np.int64)
    loss = compute_loss(seg_logits, regs, y, targets_scaled, label_smoothing)

    # Head output gradients.
    probs = softmax(seg_logits)
    target = np.full_like(probs, label_smoothing / 2.0)
    target[np.arange(n), y] = 1.0 - label_smoothing / 2.0
    d_seg = (probs - target) / n
    tree = (y == 1).astype(np.float64)
    n_tree = tree.sum()
    d_out = {"seg": d_seg}
    for j, head in enumerate(CONTENT_NAMES):
        if n_tree > 0:
            d = 2.0 * (regs[:, j] - targets_scaled[:, j]) * tree / n_tree
        else:
            d = np.zeros(n)
        d_out[head] = d[:, None]

    grads: dict[str, np.ndarray] = {}
    flat = cache["flat"]
    d_flat = np.zeros_like(flat)
    for head in HEAD_NAMES:
        z1, a1 = cache[head]
        dz2 = d_out[head]
        grads[f"{head}_w2"] = dz2.T @ a1
        grads[f"{head}_b2"] = dz2.sum(axis=0)
        da1 = dz2 @ weights[f"{head}_w2"]
        dz1 = da1 * (z1 > 0)
        grads[f"{head}_w1"] = dz1.T @ flat
        grads[f"{head}_b1"] = dz1.sum(axis=0)
        d_flat += dz1 @ weights[f"{head}_w1"]

    dh = d_flat.reshape(cache["flat_shape"])
    for i in (2, 1, 0):
        cols, z, idx, pre_len = cache[f"conv{i}"]
        da = _pool_backward(dh, idx, pre_len)
        dz = da * (z > 0)  # (N, C_out, L)
        w = weights[f"conv{i}_w"]
        dz_flat = dz.transpose(0, 2, 1)  # (N, L, C_out)
        grads[f"conv{i}_b"] = dz_flat.sum(axis=(0, 1))
        gw = np.einsum("nlc,nlk->ck", dz_flat, cols)
        grads[f"conv{i}_w"] = gw.reshape(w.shape)
        if i > 0:
            dcols = dz_flat @ w.reshape(w.shape[0], -1)  # (N, L, C_in*K)
            dh = _col2im(dcols, z.shape[0], w.shape[1], spec)
    return loss, grads


def _col2im(dcols: np.ndarray, n: int, c_in: int, spec: NetworkSpec) -> np.ndarray:
    """Scatter im2col gradients back to the (N, C_in, L) input of a conv."""
    k = spec.kernel_size
    pad = k // 2
    length = dcols.shape[1]
    d = dcols.reshape(n, length, c_in, k)
    out = np.zeros((n, c_in, length + 2 * pad))
    for off in range(k):
        out[:, :, off : off + length] += d[:, :, :, off].transpose(0, 2, 1)
    return out[:, :, pad : pad + length]


class Adam:
    """Plain Adam over a weight dict; state keyed by tensor name."""

    def __init__(self, weights: dict[str, np.ndarray], lr: float = 1e-3):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for k, g in grads.items():
            self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * g * g
            weights[k] -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + ADAM_EPS)


@njit(cache=True)
def _conv_block(x, w, b):
    """Same-padded conv (kernel from w) + ReLU + ceil max-pool 2 on (C, L)."""
    c_out, c_in, k = w.shape
    length = x.shape[1]
    pad = k // 2
    z = np.empty((c_out, length))
    for co in range(c_out):
        for i in range(length):
            acc = b[co]
            for ci in range(c_in):
                for kk in range(k):
                    j = i + kk - pad
                    if 0 <= j < length:
                        acc += w[co, ci, kk] * x[ci, j]
            z[co, i] = max(acc, 0.0)
    half = (length + 1) // 2
    out = np.empty((c_out, half))
    for co in range(c_out):
        for j in range(half):
            a = z[co, 2 * j]
            if 2 * j + 1 < length and z[co, 2 * j + 1] > a:
                a = z[co, 2 * j + 1]
            out[co, j] = a
    return out


@njit(cache=True)
def _head(flat, w1, b1, w2, b2):
    hidden = np.empty(w1.shape[0])
    for i in range(w1.shape[0]):
        acc = b1[i]
        for j in range(w1.shape[1]):
            acc += w1[i, j] * flat[j]
        hidden[i] = max(acc, 0.0)
    out = np.empty(w2.shape[0])
    for i in range(w2.shape[0]):
        acc = b2[i]
        for j in range(w2.shape[1]):
            acc += w2[i, j] * hidden[j]
        out[i] = acc
    return out


@njit(cache=True)
def _infer_single(
    spectrum, norm_mean, norm_std, eps,
    c0w, c0b, c1w, c1b, c2w, c2b,
    seg_w1, seg_b1, seg_w2, seg_b2,
    ab_w1, ab_b1, ab_w2, ab_b2,
    ar_w1, ar_b1, ar_w2, ar_b2,
    ant_w1, ant_b1, ant_w2, ant_b2,
):
    """Whole single-spectrum forward pass (normalize, convs, heads).

    Returns a 5-vector: two segmentation logits then the three scaled
    regression outputs."""
    bands = spectrum.shape[0]
    x = np.empty((1, bands))
    for b in range(bands):
        x[0, b] = (spectrum[b] - norm_mean[b]) / (norm_std[b] + eps)
    h = _conv_block(x, c0w, c0b)
    h = _conv_block(h, c1w, c1b)
    h = _conv_block(h, c2w, c2b)
    flat = h.ravel()
    out = np.empty(5)
    seg = _head(flat, seg_w1, seg_b1, seg_w2, seg_b2)
    out[0] = seg[0]
    out[1] = seg[1]
    out[2] = _head(flat, ab_w1, ab_b1, ab_w2, ab_b2)[0]
    out[3] = _head(flat, ar_w1, ar_b1, ar_w2, ar_b2)[0]
    out[4] = _head(flat, ant_w1, ant_b1, ant_w2, ant_b2)[0]
    return out


@dataclass
class ClusterPrediction:
    """Classifier output for one cluster mean spectrum."""

    cluster_id: int
    is_tree: bool
    confidence: float
    ab_hat: float
    ar_hat: float
    ant_hat: float

    def contents(self) -> np.ndarray:
        return np.array([self.ab_hat, self.ar_hat, self.ant_hat])


@dataclass
class TrainingSet:
    """Averaged, label-pure samples: spectra plus class and raw contents."""

    spectra: np.ndarray  # (N, bands) raw reflectance means
    is_tree: np.ndarray  # (N,) bool
    contents: np.ndarray  # (N, 3) ab/ar/ant in leaf units, zeros for background

    def __len__(self) -> int:
        return int(self.spectra.shape[0])


def build_training_set(
    cubes: list[LabeledCube],
    group_size_range: tuple[int, int] = (5, 50),
    samples_per_cube: int = 200,
    rng: np.random.Generator | None = None,
) -> TrainingSet:
    """Sample label-pure pixel groups and average their spectra.

    Tree groups draw from a single crown's interior (identical labels);
    background groups from non-tree pixels.  Mixed edge pixels never enter a
    group.  Classes are balanced 50/50 by downsampling the larger side.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    g_lo, g_hi = group_size_range
    if not (1 <= g_lo <= g_hi):
        raise ValueError("bad group size range")

    tree_x, tree_c, bg_x = [], [], []
    for cube in cubes:
        if cube.tree_mask is None:
            raise ValueError("cube lacks mask/labels")
        pure_tree = cube.tree_mask & ~cube.mixed_mask
        pure_bg = ~cube.tree_mask & ~cube.mixed_mask
        flat_data = cube.data.reshape(-1, cube.bands).astype(np.float64)
        tree_idx = np.flatnonzero(pure_tree.ravel())
        bg_idx = np.flatnonzero(pure_bg.ravel())

        label_rows = cube.labels.reshape(-1, 7)[tree_idx]
        crowns: dict[bytes, np.ndarray] = {}
        if tree_idx.size:
            keys = [row.tobytes() for row in label_rows]
            order: dict[bytes, list[int]] = {}
            for i, key in enumerate(keys):
                order.setdefault(key, []).append(i)
            crowns = {k: tree_idx[np.array(v)] for k, v in order.items()}
        crown_list = [
            (np.frombuffer(k, dtype=np.float32), v)
            for k, v in crowns.items()
            if v.size >= g_lo
        ]

        half = samples_per_cube // 2
        for _ in range(half):
            if not crown_list:
                break
            params, pool = crown_list[int(rng.integers(len(crown_list)))]
            g = int(rng.integers(g_lo, min(g_hi, pool.size) + 1))
            pick = rng.choice(pool, size=g, replace=False)
            tree_x.append(flat_data[pick].mean(axis=0))
            tree_c.append([params[1], params[2], params[6]])  # ab, ar, ant
        for _ in range(half):
            if bg_idx.size < g_lo:
                break
            g = int(rng.integers(g_lo, min(g_hi, bg_idx.size) + 1))
            pick = rng.choice(bg_idx, size=g, replace=False)
            bg_x.append(flat_data[pick].mean(axis=0))

    if not tree_x or not bg_x:
        raise ValueError("insufficient pure pixels to build a training set")
    n = min(len(tree_x), len(bg_x))
    tree_keep = rng.permutation(len(tree_x))[:n]
    bg_keep = rng.permutation(len(bg_x))[:n]
    spectra = np.vstack(
        [np.asarray(tree_x)[tree_keep], np.asarray(bg_x)[bg_keep]]
    )
    is_tree = np.concatenate([np.ones(n, bool), np.zeros(n, bool)])
    contents = np.vstack(
        [np.asarray(tree_c)[tree_keep], np.zeros((n, 3))]
    )
    return TrainingSet(spectra=spectra, is_tree=is_tree, contents=contents)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    val_fraction: float = 0.1
    rng_seed: int = 0
    label_smoothing: float = 0.1
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    kernel_size: int = 5
    seg_hidden: int = 32
    reg_hidden: int = 16

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "val_fraction": self.val_fraction,
            "rng_seed": self.rng_seed,
            "label_smoothing": self.label_smoothing,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "seg_hidden": self.seg_hidden,
            "reg_hidden": self.reg_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class TrainedModel:
    """Everything needed for standalone inference."""

    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    norm: NormStats
    scales: np.ndarray = field(default_factory=lambda: CONTENT_SCALES.copy())
    seed: int = 0
    dataset_hash: str | None = None
    config_hash: str | None = None
    training_log: list[dict] = field(default_factory=list)

    def _weight_tuple(self) -> tuple:
        cached = getattr(self, "_packed", None)
        if cached is None:
            names = parameter_names(self.spec)
            cached = tuple(np.ascontiguousarray(self.weights[k]) for k in names)
            self._packed = cached
        return cached

    def predict_cluster(self, mean_spectrum: np.ndarray, cluster_id: int = -1) -> ClusterPrediction:
        """Single-spectrum inference on the compiled fast path (the timed
        per-unit call used by the streaming pipeline and the baselines)."""
        spectrum = np.ascontiguousarray(mean_spectrum, dtype=np.float64)
        if spectrum.ndim != 1 or spectrum.size != self.spec.bands:
            raise ValueError(f"expected a {self.spec.bands}-band spectrum")
        out = _infer_single(
            spectrum, self.norm.mean, self.norm.std, NORM_EPS, *self._weight_tuple()
        )
        p_tree = 1.0 / (1.0 + math.exp(min(max(out[0] - out[1], -700.0), 700.0)))
        return ClusterPrediction(
            cluster_id=cluster_id,
            is_tree=p_tree > 0.5,
            confidence=max(p_tree, 1.0 - p_tree),
            ab_hat=float(out[2] * self.scales[0]),
            ar_hat=float(out[3] * self.scales[1]),
            ant_hat=float(out[4] * self.scales[2]),
        )

    def predict_batch(self, spectra: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized inference for untimed evaluation/training paths.

        Returns (is_tree (N,), confidence (N,), contents (N, 3) raw units).
        """
        z = normalize_spectrum(np.asarray(spectra, dtype=np.float64), self.norm)
        seg_logits, regs, _ = forward(self.weights, self.spec, z)
        p = softmax(seg_logits)
        return p.argmax(axis=1) == 1, p.max(axis=1), regs * self.scales


def train(dataset: TrainingSet, config: TrainConfig | None = None) -> TrainedModel:
    """Adam training, deterministic given the config seed.

    Raises on divergence (non-finite loss), reporting the epoch index.
    """
    if config is None:
        config = TrainConfig()
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if dataset.is_tree.all() or not dataset.is_tree.any():
        raise ValueError("training set must contain both classes")

    rng = np.random.default_rng(config.rng_seed)
    order = rng.permutation(n)
    n_val = int(round(n * config.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train_raw = dataset.spectra[train_idx]
    norm = NormStats.from_samples(x_train_raw)
    x_train = normalize_spectrum(x_train_raw, norm)
    y_train = dataset.is_tree[train_idx]
    t_train = dataset.contents[train_idx] / CONTENT_SCALES
    x_val = normalize_spectrum(dataset.spectra[val_idx], norm) if n_val else None

    spec = NetworkSpec(
        bands=dataset.spectra.shape[1],
        conv_channels=config.conv_channels,
        kernel_size=config.kernel_size,
        seg_hidden=config.seg_hidden,
        reg_hidden=config.reg_hidden,
    )
    weights = init_weights(spec, rng)
    opt = Adam(weights, lr=config.learning_rate)

    log: list[dict] = []
    m = x_train.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(m)
        seg_sum = reg_sum = 0.0
        batches = 0
        for start in range(0, m, config.batch_size):
            pick = perm[start : start + config.batch_size]
            loss, grads = loss_and_gradients(
                weights,
                spec,
                x_train[pick],
                y_train[pick],
                t_train[pick],
                label_smoothing=config.label_smoothing,
            )
            if not np.isfinite(loss.total):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            opt.step(weights, grads)
            seg_sum += loss.seg
            reg_sum += loss.reg
            batches += 1
        row = {
            "epoch": epoch,
            "seg_loss": seg_sum / batches,
            "reg_loss": reg_sum / batches,
            "total_loss": (seg_sum + reg_sum) / batches,
        }
        if x_val is not None and len(val_idx):
            sl, rg, _ = forward(weights, spec, x_val)
            vloss = compute_loss(sl, rg, dataset.is_tree[val_idx], dataset.contents[val_idx] / CONTENT_SCALES)
            row["val_total_loss"] = vloss.total
        log.append(row)

    return TrainedModel(
        spec=spec,
        weights=weights,
        norm=norm,
        scales=CONTENT_SCALES.copy(),
        seed=config.rng_seed,
        training_log=log,
    )


def save_model(model: TrainedModel, path) -> None:
    names = parameter_names(model.spec)
    manifest = {
        "format": "ohslic-model",
        "format_version": 1,
        "architecture": model.spec.to_dict(),
        "norm_mean": [float(v) for v in model.norm.mean],
        "norm_std": [float(v) for v in model.norm.std],
        "scales": [float(v) for v in model.scales],
        "seed": model.seed,
        "dataset_hash": model.dataset_hash,
        "config_hash": model.config_hash,
        "tensors": [{"name": k, "shape": list(model.weights[k].shape)} for k in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.weights[k], dtype="<f4").tobytes())


def load_model(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated model bundle")
    (mlen,) = struct.unpack("<I", raw[:4])
    try:
        manifest = json.loads(raw[4 : 4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed model manifest: {exc}") from exc
    if manifest.get("format") != "ohslic-model":
        raise ValueError(f"{path}: not a model bundle")
    spec = NetworkSpec.from_dict(manifest["architecture"])
    weights = {}
    off = 4 + mlen
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        need = count * 4
        if len(raw) < off + need:
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        weights[entry["name"]] = (
            np.frombuffer(raw[off : off + need], dtype="<f4").reshape(shape).astype(np.float64)
        )
        off += need
    return TrainedModel(
        spec=spec,
        weights=weights,
        norm=NormStats(np.array(manifest["norm_mean"]), np.array(manifest["norm_std"])),
        scales=np.array(manifest["scales"]),
        seed=manifest.get("seed", 0),
        dataset_hash=manifest.get("dataset_hash"),
        config_hash=manifest.get("config_hash"),
    )
