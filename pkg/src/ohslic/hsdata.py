"""Spectral data model: band grids, lines, calibration, normalization, cube files.

The on-disk cube format is a small custom container:

    8 bytes   magic ``OHSLICUB``
    4 bytes   uint32 LE header length
    N bytes   UTF-8 JSON header (width, height, bands, wavelengths, kind,
              section presence flags, seed, meta, crc32 of everything after
              the header)
    payload   height*bands*width float32 LE, band-interleaved-by-line
              (per image row: all bands, each a full row of columns)
    optional  b"MASK" + height*width uint8   (bit0 = tree, bit1 = mixed edge)
    optional  b"LABL" + height*width*7 float32 LE leaf-parameter vectors
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CUBE_MAGIC = b"OHSLICUB"
MASK_TAG = b"MASK"
LABELS_TAG = b"LABL"
LABEL_DIM = 7
NORM_EPS = 1e-8


class DimensionError(ValueError):
    """Array shapes or band counts do not line up."""


class CalibrationError(ValueError):
    """Calibration references are unusable (white <= dark somewhere)."""


class CubeFormatError(ValueError):
    """Cube file is malformed, truncated, or fails its checksum."""


@dataclass(frozen=True)
class BandGrid:
    """Strictly increasing wavelength grid in nm."""

    wavelengths: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        if wl.ndim != 1 or wl.size < 1:
            raise DimensionError("wavelengths must be a non-empty 1-D array")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths", wl)

    @property
    def count(self) -> int:
        return int(self.wavelengths.size)

    @classmethod
    def two_camera(cls) -> "BandGrid":
        """224-band layout: 112 bands over 400-1000 nm, 112 over 900-1700 nm."""
        vnir = np.linspace(400.0, 1000.0, 112)
        swir = np.linspace(900.0, 1700.0, 112)
        return cls(np.sort(np.concatenate([vnir, swir])))

    @classmethod
    def uniform(cls, start: float = 400.0, stop: float = 1700.0, count: int = 64) -> "BandGrid":
        """Desk-scale grid: `count` evenly spaced bands over [start, stop] nm."""
        return cls(np.linspace(float(start), float(stop), int(count)))


@dataclass
class SpectralLine:
    """One push-broom line: width x bands values, raw intensity or reflectance."""

    values: np.ndarray
    kind: str = "reflectance"
    row_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError("line values must be width x bands")
        if self.kind not in ("raw", "reflectance"):
            raise ValueError(f"unknown line kind: {self.kind!r}")
        if self.kind == "reflectance":
            if not np.all(np.isfinite(v)):
                raise ValueError("reflectance values must be finite")
            if np.any(v < 0):
                raise ValueError("reflectance values must be >= 0")
        self.values = v

    @property
    def width(self) -> int:
        return int(self.values.shape[0])

    @property
    def bands(self) -> int:
        return int(self.values.shape[1])

    @property
    def has_specular_outliers(self) -> bool:
        """Reflectance above 1 is kept but flagged (specular glints)."""
        return self.kind == "reflectance" and bool(np.any(self.values > 1.0))


@dataclass
class CalibrationRefs:
    """Per-band white and dark reference spectra (pixel-independent)."""

    white: np.ndarray
    dark: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.white, dtype=np.float64)
        if w.ndim != 1:
            raise DimensionError("white reference must be 1-D")
        d = (
            np.zeros_like(w)
            if self.dark is None
            else np.asarray(self.dark, dtype=np.float64)
        )
        if d.shape != w.shape:
            raise DimensionError("dark reference shape must match white")
        if np.any(w <= d):
            raise CalibrationError("white reference must exceed dark in every band")
        self.white = w
        self.dark = d


def calibrate_reflectance(line: SpectralLine, refs: CalibrationRefs) -> SpectralLine:
    """Convert raw intensity to reflectance: (I - dark) / (white - dark).

    Negative results (intensity below dark, possible on noisy real sensors)
    are clipped to 0 so the output stays a valid reflectance line.
    """
    if line.kind != "raw":
        raise ValueError("calibrate_reflectance expects a raw line")
    if line.bands != refs.white.size:
        raise DimensionError(
            f"band count mismatch: line has {line.bands}, refs have {refs.white.size}"
        )
    refl = (line.values - refs.dark) / (refs.white - refs.dark)
    np.maximum(refl, 0.0, out=refl)
    return SpectralLine(values=refl, kind="reflectance", row_index=line.row_index)


@dataclass(frozen=True)
class NormStats:
    """Per-band mean and standard deviation from a training set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.std, dtype=np.float64)
        if m.ndim != 1 or s.shape != m.shape:
            raise DimensionError("NormStats mean/std must be matching 1-D arrays")
        if np.any(s < 0):
            raise ValueError("std must be non-negative")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "NormStats":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError("samples must be n x bands")
        return cls(mean=x.mean(axis=0), std=x.std(axis=0))


def normalize_spectrum(spectrum: np.ndarray, stats: NormStats) -> np.ndarray:
    """Per-band z-score: (x - mean) / (std + eps)."""
    x = np.asarray(spectrum, dtype=np.float64)
    if x.shape[-1] != stats.mean.size:
        raise DimensionError(
            f"spectrum has {x.shape[-1]} bands, stats have {stats.mean.size}"
        )
    return (x - stats.mean) / (stats.std + NORM_EPS)


@dataclass
class LabeledCube:
    """Full image cube plus optional per-pixel ground truth.

    `labels` holds one 7-component leaf-parameter vector per pixel and is
    defined (non-zero allowed) exactly where `tree_mask` is true; `mixed_mask`
    marks crown-edge pixels whose footprint mixes tree and background.
    """

    data: np.ndarray
    tree_mask: np.ndarray | None = None
    mixed_mask: np.ndarray | None = None
    labels: np.ndarray | None = None
    kind: str = "reflectance"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise DimensionError("cube data must be height x width x bands")
        self.data = d
        h, w = d.shape[:2]
        if (self.tree_mask is None) != (self.labels is None):
            raise DimensionError("tree_mask and labels must be provided together")
        if self.tree_mask is not None:
            tm = np.asarray(self.tree_mask, dtype=bool)
            mm = (
                np.zeros((h, w), dtype=bool)
                if self.mixed_mask is None
                else np.asarray(self.mixed_mask, dtype=bool)
            )
            lb = np.asarray(self.labels, dtype=np.float32)
            if tm.shape != (h, w) or mm.shape != (h, w):
                raise DimensionError("mask shape must match cube height x width")
            if lb.shape != (h, w, LABEL_DIM):
                raise DimensionError(f"labels must be height x width x {LABEL_DIM}")
            if np.any(lb[~tm] != 0):
                raise ValueError("labels must be zero outside the tree mask")
            self.tree_mask, self.mixed_mask, self.labels = tm, mm, lb

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def bands(self) -> int:
        return int(self.data.shape[2])

    def line(self, row: int) -> SpectralLine:
        return SpectralLine(values=self.data[row], kind=self.kind, row_index=row)


def _mask_to_bytes(cube: LabeledCube) -> bytes:
    code = cube.tree_mask.astype(np.uint8) | (cube.mixed_mask.astype(np.uint8) << 1)
    return code.tobytes()


def _mask_from_bytes(raw: bytes, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    code = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return (code & 1).astype(bool), ((code >> 1) & 1).astype(bool)


def write_cube(cube: LabeledCube, path) -> None:
    """Serialize a cube; read_cube(write_cube(c)) is bit-exact."""
    payload = np.ascontiguousarray(cube.data.transpose(0, 2, 1), dtype="<f4").tobytes()
    sections = b""
    if cube.tree_mask is not None:
        sections += MASK_TAG + _mask_to_bytes(cube)
        sections += LABELS_TAG + np.ascontiguousarray(cube.labels, dtype="<f4").tobytes()
    body = payload + sections
    header = {
        "format_version": 1,
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "wavelengths": cube.meta.get("wavelengths"),
        "kind": cube.kind,
        "has_mask": cube.tree_mask is not None,
        "has_labels": cube.labels is not None,
        "seed": cube.meta.get("seed"),
        "meta": {k: v for k, v in cube.meta.items() if k not in ("wavelengths", "seed")},
        "crc32": zlib.crc32(body) & 0xFFFFFFFF,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(body)


def read_cube(path) -> LabeledCube:
    raw = Path(path).read_bytes()
    if len(raw) < len(CUBE_MAGIC) + 4 or raw[: len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic, not a cube file")
    off = len(CUBE_MAGIC)
    header_len = int(np.frombuffer(raw[off : off + 4], dtype="<u4")[0])
    off += 4
    if len(raw) < off + header_len:
        raise CubeFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CubeFormatError(f"{path}: malformed header: {exc}") from exc
    off += header_len

    body = raw[off:]
    if zlib.crc32(body) & 0xFFFFFFFF != header.get("crc32"):
        raise CubeFormatError(f"{path}: checksum mismatch")

    h, w, b = header["height"], header["width"], header["bands"]
    payload_len = h * b * w * 4
    if len(body) < payload_len:
        raise CubeFormatError(f"{path}: truncated payload")
    data = (
        np.frombuffer(body[:payload_len], dtype="<f4")
        .reshape(h, b, w)
        .transpose(0, 2, 1)
        .copy()
    )
    off2 = payload_len

    tree_mask = mixed_mask = labels = None
    if header.get("has_mask"):
        if body[off2 : off2 + 4] != MASK_TAG:
            raise CubeFormatError(f"{path}: missing mask section tag")
        off2 += 4
        if len(body) < off2 + h * w:
            raise CubeFormatError(f"{path}: truncated mask section")
        tree_mask, mixed_mask = _mask_from_bytes(body[off2 : off2 + h * w], h, w)
        off2 += h * w
    if header.get("has_labels"):
        if body[off2 : off2 + 4] != LABELS_TAG:
            raise CubeFormatError(f"{path}: missing labels section tag")
        off2 += 4
        need = h * w * LABEL_DIM * 4
        if len(body) < off2 + need:
            raise CubeFormatError(f"{path}: truncated labels section")
        labels = np.frombuffer(body[off2 : off2 + need], dtype="<f4").reshape(h, w, LABEL_DIM).copy()
        off2 += need

    meta = dict(header.get("meta") or {})
    if header.get("wavelengths") is not None:
        meta["wavelengths"] = header["wavelengths"]
    if header.get("seed") is not None:
        meta["seed"] = header["seed"]
    return LabeledCube(
        data=data,
        tree_mask=tree_mask,
        mixed_mask=mixed_mask,
        labels=labels,
        kind=header.get("kind", "reflectance"),
        meta=meta,
    )
