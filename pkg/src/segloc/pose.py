"""Robust 6-DoF pose estimation from ranked segment matches.

Pipeline order: geometric-consistency filtering of the ranked candidates,
progressive sample consensus over centroid correspondences (3-point
minimal samples fit with the SVD rigid solver), then a final refit on the
winning hypothesis' inliers. No localization is a valid outcome and is
always preferred over a wrong one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError
from .matching import MatchCandidate
from .validation import check_points, check_rotation


@dataclass
class SE3:
    rotation: np.ndarray  # (3,3), orthonormal, det +1
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        self.rotation = check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "SE3":
        return SE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "SE3":
        c, s = math.cos(yaw), math.sin(yaw)
        return SE3(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "SE3":
        rt = self.rotation.T
        return SE3(rt, -rt @ self.translation)

    def compose(self, other: "SE3") -> "SE3":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return SE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def rotation_angle_deg(self, other: "SE3" = None) -> float:
        """Geodesic rotation distance in degrees (to identity by default)."""
        r = self.rotation if other is None else self.rotation @ other.rotation.T
        cos = (np.trace(r) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, cos))))

    def translation_distance(self, other: "SE3") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


@dataclass
class ProsacParams:
    sample_size: int = 3  # minimum for 6-DoF from point correspondences
    inlier_threshold: float = 0.5  # meters, centroid residual
    max_hypotheses: int = 2000
    min_inliers: int = 4
    confidence: float = 0.99
    progressive: bool = True  # False reduces to uniform RANSAC

    def __post_init__(self):
        if self.sample_size != 3:
            raise ValueError("sample_size is fixed at 3")
        if self.min_inliers < self.sample_size + 1:
            raise ValueError("min_inliers must be >= sample_size + 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0,1)")
        if self.inlier_threshold <= 0 or self.max_hypotheses < 1:
            raise ValueError("inlier_threshold and max_hypotheses must be positive")


@dataclass
class PoseEstimate:
    transform: SE3
    inlier_matches: list[MatchCandidate]
    mean_residual: float  # meters, over inliers
    hypotheses_evaluated: int = 0
    first_success_index: int | None = None  # 1-based hypothesis index

    def to_json_dict(self) -> dict:
        return {
            "localized": True,
            "rotation": [[float(v) for v in row] for row in self.transform.rotation],
            "translation": [float(v) for v in self.transform.translation],
            "inliers": [[c.query_id, c.map_id] for c in self.inlier_matches],
            "num_inliers": len(self.inlier_matches),
            "mean_residual_m": float(self.mean_residual),
            "hypotheses_evaluated": self.hypotheses_evaluated,
        }


def kabsch(src: np.ndarray, dst: np.ndarray) -> SE3:
    """Least-squares rigid transform T minimizing sum ||T(src_i) - dst_i||^2.

    SVD of the cross-covariance with reflection correction (det forced to
    +1). Degenerate (collinear or coincident) source/target configurations
    raise, since the rotation is then not unique.
    """
    a = check_points(src, "src")
    b = check_points(dst, "dst")
    if a.shape != b.shape or a.shape[0] < 3:
        raise ValueError("need matching point sets with n >= 3")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    # rank < 2 leaves a free rotation about the degenerate axis
    if s[1] <= max(s[0] * 1e-9, 1e-300):
        raise DegenerateGeometryError("collinear or coincident points")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return SE3(r, cb - r @ ca)


def geometric_consistency_filter(
    matches: list[MatchCandidate], epsilon: float = 0.4, min_degree: int = 2
) -> list[MatchCandidate]:
    """Keep the maximal subset where every match is distance-consistent with
    at least `min_degree` others.

    Matches a, b are consistent iff the query-frame and map-frame centroid
    gaps agree within epsilon. Implemented as iterative degree peeling
    (the min_degree-core of the consistency graph); input rank order is
    preserved. May return empty.
    """
    m = len(matches)
    if m == 0:
        return []
    q = np.stack([np.asarray(c.query_centroid, dtype=np.float64) for c in matches])
    p = np.stack([np.asarray(c.map_centroid, dtype=np.float64) for c in matches])
    dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=-1)
    dm = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    consistent = np.abs(dq - dm) <= epsilon
    np.fill_diagonal(consistent, False)
    alive = np.ones(m, dtype=bool)
    while True:
        degree = (consistent & alive[None, :]).sum(axis=1)
        drop = alive & (degree < min_degree)
        if not drop.any():
            break
        alive &= ~drop
    return [c for c, keep in zip(matches, alive) if keep]


def _growth_schedule(n_total: int, sample_size: int, budget: int) -> np.ndarray:
    """PROSAC growth: T'_n = hypothesis count after which the pool grows to n+1.

    Standard recurrence on the expected number of uniform samples drawn
    exclusively from the top-n candidates.
    """
    t_n = float(budget)
    for i in range(sample_size):
        t_n *= (sample_size - i) / (n_total - i)
    tp = np.zeros(n_total + 1)
    tp[sample_size] = 1.0
    for n in range(sample_size, n_total - 1):
        t_next = t_n * (n + 1) / (n + 1 - sample_size)
        tp[n + 1] = tp[n] + math.ceil(t_next - t_n)
        t_n = t_next
    return tp


def prosac(
    matches: list[MatchCandidate], params: ProsacParams, seed: int = 0
) -> PoseEstimate | None:
    """Progressive sample consensus over ranked centroid correspondences.

    Hypothesis t draws its 3 correspondences from the top-n(t) ranked
    matches, n(t) growing from sample_size+1 toward all matches by the
    standard schedule; with `progressive=False` every hypothesis samples
    uniformly from the full list. Stops on the usual confidence criterion,
    capped at max_hypotheses. Returns None when no hypothesis reaches
    min_inliers after the final refit.
    """
    m = params.sample_size
    n_total = len(matches)
    if n_total < max(params.min_inliers, m):
        return None
    q = np.stack([np.asarray(c.query_centroid, dtype=np.float64) for c in matches])
    p = np.stack([np.asarray(c.map_centroid, dtype=np.float64) for c in matches])
    rng = np.random.default_rng(seed)
    schedule = _growth_schedule(n_total, m, params.max_hypotheses) if params.progressive else None
    thr2 = params.inlier_threshold**2

    best_count = 0
    best_inliers = None
    best_t = None
    n = m
    evaluated = 0
    for t in range(1, params.max_hypotheses + 1):
        evaluated = t
        if params.progressive:
            if n < n_total and t >= schedule[n]:
                n += 1
            pool = min(max(n, m + 1), n_total)
        else:
            pool = n_total
        sample = rng.choice(pool, size=m, replace=False)
        try:
            hyp = kabsch(q[sample], p[sample])
        except DegenerateGeometryError:
            continue
        residual2 = np.sum((q @ hyp.rotation.T + hyp.translation - p) ** 2, axis=1)
        count = int(np.sum(residual2 <= thr2))
        if count > best_count:
            best_count = count
            best_inliers = residual2 <= thr2
            if count >= params.min_inliers and best_t is None:
                best_t = t
        if best_count >= params.min_inliers:
            # standard stopping criterion on the inlier ratio seen so far
            w = best_count / n_total
            p_fail = (1.0 - w**m) ** t
            if p_fail <= 1.0 - params.confidence:
                break
    if best_count < max(params.min_inliers, m):
        return None
    # refine on all inliers of the best hypothesis, then re-verify
    try:
        refined = kabsch(q[best_inliers], p[best_inliers])
    except DegenerateGeometryError:
        return None
    residual2 = np.sum((q @ refined.rotation.T + refined.translation - p) ** 2, axis=1)
    final = residual2 <= thr2
    if int(final.sum()) < params.min_inliers:
        return None
    inlier_matches = [c for c, keep in zip(matches, final) if keep]
    return PoseEstimate(
        transform=refined,
        inlier_matches=inlier_matches,
        mean_residual=float(np.sqrt(residual2[final]).mean()),
        hypotheses_evaluated=evaluated,
        first_success_index=best_t,
    )
