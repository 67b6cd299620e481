"""Core point-cloud types, ASCII I/O, and segment preprocessing.

Points are float64 numpy arrays of shape (3,) and point sets are (N, 3);
meters throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CloudParseError, DegenerateSegmentError
from .validation import check_points

TARGET_POINTS = 256

CLOUD_FORMATS = ("ascii-xyz", "ply-ascii")


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3), may be empty
    frame_id: str | None = None

    def __post_init__(self):
        self.points = check_points(self.points, "cloud points", allow_empty=True)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Segment:
    """One Euclidean cluster extracted from a source cloud."""

    points: np.ndarray  # (N, 3), non-empty
    label: int | None = None
    source_cloud_index: int = 0

    def __post_init__(self):
        self.points = check_points(self.points, "segment points")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class NormalizedSegment:
    """Exactly TARGET_POINTS zero-centered points with unit RMS radius.

    `centroid` and `scale` preserve the pre-normalization placement so the
    matching and pose stages can work in metric coordinates.
    """

    points: np.ndarray  # (TARGET_POINTS, 3)
    centroid: np.ndarray  # (3,), meters
    scale: float  # RMS radius before normalization, meters
    label: int | None = None

    def __post_init__(self):
        self.points = check_points(self.points, "normalized points")
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def centroid(points) -> np.ndarray:
    """Arithmetic mean per axis of a non-empty point set."""
    pts = check_points(points, "points")
    return pts.mean(axis=0)


def preprocess_segment(segment, target: int = TARGET_POINTS, seed: int = 0) -> NormalizedSegment:
    """Resample a segment to `target` points, zero-center, and scale-normalize.

    Oversized segments are subsampled uniformly at random without
    replacement; undersized ones keep every original point and are topped
    up with replacement. Both paths are deterministic in `seed`. The
    normalization divides by the RMS distance to the centroid, so the
    output is isotropically unit-scaled but keeps its anisotropy.
    """
    pts = segment.points if isinstance(segment, Segment) else check_points(segment)
    label = segment.label if isinstance(segment, Segment) else None
    n = pts.shape[0]
    rng = np.random.default_rng(seed)
    if n >= target:
        idx = rng.choice(n, size=target, replace=False)
    else:
        extra = rng.choice(n, size=target - n, replace=True)
        idx = np.concatenate([np.arange(n), extra])
    sample = pts[idx]
    c = sample.mean(axis=0)
    centered = sample - c
    scale = float(np.sqrt(np.mean(np.sum(centered * centered, axis=1))))
    if scale <= 0.0:
        raise DegenerateSegmentError(
            f"segment has zero spatial extent ({n} identical points)"
        )
    return NormalizedSegment(points=centered / scale, centroid=c, scale=scale, label=label)


def load_cloud(path, format: str = "ascii-xyz") -> PointCloud:
    """Load a point cloud from an ASCII xyz or ASCII PLY file."""
    if format not in CLOUD_FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {CLOUD_FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such cloud file: {path}")
    lines = path.read_text().splitlines()
    if format == "ascii-xyz":
        points = _parse_xyz(path, lines)
    else:
        points = _parse_ply(path, lines)
    return PointCloud(points=points, frame_id=None)


def save_cloud_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def _parse_triple(path, line_no, parts):
    if len(parts) != 3:
        raise CloudParseError(path, line_no, f"expected 3 columns, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise CloudParseError(path, line_no, f"non-numeric coordinate in {parts!r}") from None
    if not all(np.isfinite(v) for v in vals):
        raise CloudParseError(path, line_no, f"non-finite coordinate in {parts!r}")
    return vals


def _parse_xyz(path, lines):
    points = []
    for line_no, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        points.append(_parse_triple(path, line_no, stripped.split()))
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def _parse_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "not a PLY file (missing 'ply' magic)")
    # header: find the vertex element, its count, and the x/y/z property columns
    elements = []  # (name, count, [properties])
    header_end = None
    fmt_ok = False
    for line_no, raw in enumerate(lines[1:], start=2):
        tokens = raw.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise CloudParseError(path, line_no, f"unsupported PLY format {tokens[1]!r}")
            fmt_ok = True
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise CloudParseError(path, line_no, "property before any element")
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            header_end = line_no
            break
    if header_end is None or not fmt_ok:
        raise CloudParseError(path, len(lines), "PLY header not terminated")
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise CloudParseError(path, header_end, "PLY file has no vertex element")
    _, count, props = vertex
    try:
        cols = [props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise CloudParseError(path, header_end, "vertex element lacks x/y/z properties") from None
    # data lines: elements appear in declaration order; vertex rows first iff declared first
    offset = 0
    for name, n, _ in elements:
        if name == "vertex":
            break
        offset += n
    start = header_end + offset
    points = []
    for i in range(count):
        line_no = start + 1 + i
        if line_no > len(lines):
            raise CloudParseError(path, len(lines), "unexpected end of file in vertex data")
        parts = lines[line_no - 1].split()
        if len(parts) < len(props):
            raise CloudParseError(path, line_no, f"expected {len(props)} columns, got {len(parts)}")
        points.append(_parse_triple(path, line_no, [parts[c] for c in cols]))
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)
