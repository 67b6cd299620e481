"""Euclidean distance-based clustering of a point cloud into segments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, Segment


@dataclass
class SegmentationParams:
    tolerance: float = 0.2  # cluster gap threshold, meters
    min_points: int = 200
    max_points: int = 15000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if not (0 < self.min_points <= self.max_points):
            raise ValueError(
                f"need 0 < min_points <= max_points, got {self.min_points}, {self.max_points}"
            )


def cluster_labels(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Connected components of the <=tolerance proximity graph.

    Exact at the radius (KD-tree range search, no approximation). Labels are
    renumbered so that label k is the cluster containing the lowest point
    index among unlabeled-so-far points, making the result order-stable.
    """
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    current = 0
    for seed in range(n):
        if labels[seed] != -1:
            continue
        # BFS flood fill from the lowest unlabeled index
        labels[seed] = current
        frontier = [seed]
        while frontier:
            neighbors = tree.query_ball_point(points[frontier], r=tolerance)
            nxt = []
            for nbrs in neighbors:
                for j in nbrs:
                    if labels[j] == -1:
                        labels[j] = current
                        nxt.append(j)
            frontier = nxt
        current += 1
    return labels


def euclidean_segment(cloud: PointCloud, params: SegmentationParams) -> list[Segment]:
    """Partition a cloud into clusters; keep those within the size bounds.

    Two points share a cluster iff they are connected through hops of at
    most `tolerance`. Result is ordered by each cluster's lowest contained
    point index, so it is deterministic and independent of point order up
    to that canonical ordering.
    """
    if len(cloud) == 0:
        raise ValueError("cannot segment an empty cloud")
    labels = cluster_labels(cloud.points, params.tolerance)
    segments = []
    for k in range(labels.max() + 1):
        idx = np.nonzero(labels == k)[0]
        if params.min_points <= idx.size <= params.max_points:
            segments.append(
                Segment(points=cloud.points[idx], label=None, source_cloud_index=0)
            )
    return segments
