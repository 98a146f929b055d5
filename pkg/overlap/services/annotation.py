"""
Overlap — Ground-Truth Annotation.
Labels every (camera-1 frame, camera-2 frame) pair from poses and 3D points.

A pair is a valid view overlap when
1. the two truncated viewing frusta intersect (separating-axis test)
2. the camera-1 frame's 3D points, projected into camera 2, span more than
   `overlap_threshold` of the image (convex-hull area)
3. the optical axes differ by less than `angle_threshold` degrees
No occlusion reasoning: every point in front of the camera and inside the
image counts.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation

from overlap.core.config import HISTOGRAM_ANGLE_BIN_DEG, NO_INTERSECTION_BIN
from overlap.core.errors import AnnotationError
from overlap.models.schemas import CameraIntrinsics, CameraPose, OverlapAnnotation

logger = logging.getLogger(__name__)

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 50.0
DEFAULT_OVERLAP_THRESHOLD = 0.5
DEFAULT_ANGLE_THRESHOLD = 70.0
DEFAULT_DISTANCE_BIN = 5.0

TABLE_COLUMNS = ["frame_a", "frame_b", "intersect", "angle_deg", "dist", "overlap", "valid"]

PathLike = Union[str, Path]


# ============================================================
# Frusta
# ============================================================

def frustum_corners(
    pose: CameraPose, intrinsics: CameraIntrinsics, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR
) -> np.ndarray:
    """(8, 3) world corners: near rectangle then far rectangle, same winding."""
    rect = np.array(
        [[0.0, 0.0], [intrinsics.width, 0.0], [intrinsics.width, intrinsics.height], [0.0, intrinsics.height]]
    )
    rays = np.stack(
        [
            (rect[:, 0] - intrinsics.cx) / intrinsics.fx,
            (rect[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(4),
        ],
        axis=1,
    )
    corners_cam = np.concatenate([rays * near, rays * far])
    return pose.to_world(corners_cam)


def _axes(corners: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Face normals (..., 5, 3) and edge directions (..., 6, 3) of frusta (..., 8, 3)."""
    c = corners
    near, far = c[..., :4, :], c[..., 4:, :]
    nxt = np.roll(near, -1, axis=-2)
    front = np.cross(near[..., 1, :] - near[..., 0, :], near[..., 3, :] - near[..., 0, :])
    sides = np.cross(nxt - near, far - near)
    normals = np.concatenate([front[..., None, :], sides], axis=-2)
    edges = np.concatenate(
        [
            (near[..., 1, :] - near[..., 0, :])[..., None, :],
            (near[..., 3, :] - near[..., 0, :])[..., None, :],
            far - near,
        ],
        axis=-2,
    )
    return normals, edges


def frusta_intersect_many(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Separating-axis test of one frustum (8, 3) against many (m, 8, 3)."""
    corners_b = np.asarray(corners_b, dtype=np.float64).reshape(-1, 8, 3)
    m = len(corners_b)
    corners_a = np.broadcast_to(corners_a, (m, 8, 3))

    # bounding spheres
    center_a = corners_a.mean(axis=1)
    center_b = corners_b.mean(axis=1)
    radius_a = np.linalg.norm(corners_a - center_a[:, None, :], axis=2).max(axis=1)
    radius_b = np.linalg.norm(corners_b - center_b[:, None, :], axis=2).max(axis=1)
    result = np.linalg.norm(center_a - center_b, axis=1) <= radius_a + radius_b
    todo = np.flatnonzero(result)
    if len(todo) == 0:
        return result

    ca, cb = corners_a[todo], corners_b[todo]
    normals_a, edges_a = _axes(ca)
    normals_b, edges_b = _axes(cb)
    crosses = np.cross(edges_a[:, :, None, :], edges_b[:, None, :, :]).reshape(len(todo), -1, 3)
    axes = np.concatenate([normals_a, normals_b, crosses], axis=1)

    proj_a = np.einsum("mkd,mjd->mkj", axes, ca)
    proj_b = np.einsum("mkd,mjd->mkj", axes, cb)
    separated = (proj_a.max(axis=2) < proj_b.min(axis=2)) | (proj_b.max(axis=2) < proj_a.min(axis=2))
    result[todo] = ~np.any(separated, axis=1)
    return result


def frustum_intersects(
    pose_a: CameraPose,
    pose_b: CameraPose,
    intrinsics: CameraIntrinsics,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> bool:
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far; got near={near}, far={far}")
    corners_a = frustum_corners(pose_a, intrinsics, near, far)
    corners_b = frustum_corners(pose_b, intrinsics, near, far)
    return bool(frusta_intersect_many(corners_a, corners_b[None])[0])


def viewpoint_difference(pose_a: CameraPose, pose_b: CameraPose) -> Tuple[float, float]:
    """(angle between optical axes in degrees, distance between camera centers)."""
    cosine = float(np.clip(np.dot(pose_a.optical_axis, pose_b.optical_axis), -1.0, 1.0))
    return math.degrees(math.acos(cosine)), float(np.linalg.norm(pose_a.center - pose_b.center))


# ============================================================
# Overlap ratio
# ============================================================

def _hull_ratio(uv: np.ndarray, intrinsics: CameraIntrinsics) -> float:
    if len(uv) < 3:
        return 0.0
    try:
        area = ConvexHull(uv).volume
    except QhullError:
        return 0.0
    return float(min(1.0, max(0.0, area / (intrinsics.width * intrinsics.height))))


def _in_image(uv: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    return (
        (depth > 0)
        & (uv[..., 0] >= 0) & (uv[..., 0] <= intrinsics.width)
        & (uv[..., 1] >= 0) & (uv[..., 1] <= intrinsics.height)
    )


def overlap_ratio(points_3d: np.ndarray, pose_b: CameraPose, intrinsics: CameraIntrinsics) -> float:
    """Share of view b's image covered by the hull of the projected points."""
    points_3d = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    if len(points_3d) == 0:
        return 0.0
    cam = pose_b.to_camera(points_3d)
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack(
            [
                intrinsics.fx * cam[:, 0] / depth + intrinsics.cx,
                intrinsics.fy * cam[:, 1] / depth + intrinsics.cy,
            ],
            axis=1,
        )
    return _hull_ratio(uv[_in_image(uv, depth, intrinsics)], intrinsics)


# ============================================================
# Pair labelling
# ============================================================

@dataclass
class AnnotationResult:
    table: pd.DataFrame
    has_valid_a: Dict[int, bool] = field(default_factory=dict)
    has_valid_b: Dict[int, bool] = field(default_factory=dict)
    angle_histogram: pd.DataFrame = field(default_factory=pd.DataFrame)
    distance_histogram: pd.DataFrame = field(default_factory=pd.DataFrame)
    excluded_a: List[int] = field(default_factory=list)
    excluded_b: List[int] = field(default_factory=list)

    @property
    def n_valid(self) -> int:
        return int(self.table["valid"].sum()) if len(self.table) else 0

    def records(self) -> List[OverlapAnnotation]:
        return [
            OverlapAnnotation(
                int(r.frame_a), int(r.frame_b), bool(r.intersect), float(r.angle_deg),
                float(r.dist), float(r.overlap), bool(r.valid),
            )
            for r in self.table.itertuples(index=False)
        ]


def _histogram(values: np.ndarray, intersect: np.ndarray, width: float, upper: Optional[float]) -> pd.DataFrame:
    """`no_intersection` bin, then fixed-width bins over the intersecting pairs."""
    kept = values[intersect]
    top = upper if upper is not None else (float(kept.max()) if len(kept) else 0.0)
    n_bins = max(1, int(math.ceil(top / width))) if top > 0 else 1
    index = np.minimum((kept // width).astype(np.int64), n_bins - 1) if len(kept) else np.zeros(0, np.int64)
    counts = np.bincount(index, minlength=n_bins)
    bins = [NO_INTERSECTION_BIN] + [f"{k * width:g}-{(k + 1) * width:g}" for k in range(n_bins)]
    return pd.DataFrame({"bin": bins, "count": [int((~intersect).sum())] + counts.tolist()})


def label_pairs(
    poses_a: Dict[int, CameraPose],
    points_a: Dict[int, np.ndarray],
    poses_b: Dict[int, CameraPose],
    intrinsics: CameraIntrinsics,
    frames_a: Optional[Iterable[int]] = None,
    frames_b: Optional[Iterable[int]] = None,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    angle_threshold: float = DEFAULT_ANGLE_THRESHOLD,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    distance_bin: float = DEFAULT_DISTANCE_BIN,
) -> AnnotationResult:
    """
    Annotation table over every (frame of a, frame of b).

    `frames_a` / `frames_b` list the frames of each sequence (default: the
    posed ones); frames without a pose are excluded and reported.
    """
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far; got near={near}, far={far}")
    frames_a = sorted(poses_a if frames_a is None else set(frames_a))
    frames_b = sorted(poses_b if frames_b is None else set(frames_b))
    excluded_a = [t for t in frames_a if t not in poses_a]
    excluded_b = [t for t in frames_b if t not in poses_b]
    frames_a = [t for t in frames_a if t in poses_a]
    frames_b = [t for t in frames_b if t in poses_b]
    if excluded_a or excluded_b:
        logger.warning(
            "frames without pose excluded: camera 1 %s, camera 2 %s", excluded_a, excluded_b
        )

    # 1. camera-2 quantities shared by every row
    m = len(frames_b)
    rot_b = np.array([poses_b[t].rotation for t in frames_b]).reshape(m, 3, 3)
    trans_b = np.array([poses_b[t].translation for t in frames_b]).reshape(m, 3)
    corners_b = np.array([frustum_corners(poses_b[t], intrinsics, near, far) for t in frames_b]).reshape(m, 8, 3)
    axes_b = rot_b[:, 2, :]
    centers_b = -np.einsum("mji,mj->mi", rot_b, trans_b)

    columns = {name: [] for name in TABLE_COLUMNS}
    for fa in frames_a:
        pose_a = poses_a[fa]

        # 2. frusta and viewpoint difference against all of camera 2
        intersect = frusta_intersect_many(frustum_corners(pose_a, intrinsics, near, far), corners_b)
        cosine = np.clip(axes_b @ pose_a.optical_axis, -1.0, 1.0)
        angle = np.degrees(np.arccos(cosine))
        dist = np.linalg.norm(centers_b - pose_a.center, axis=1)

        # 3. overlap: camera-1 points into every camera-2 view
        overlap = np.zeros(m)
        pts = np.asarray(points_a.get(fa, np.zeros((0, 3))), dtype=np.float64).reshape(-1, 3)
        if len(pts) >= 3 and m:
            cam = np.einsum("mij,nj->mni", rot_b, pts) + trans_b[:, None, :]
            depth = cam[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                uv = np.stack(
                    [
                        intrinsics.fx * cam[..., 0] / depth + intrinsics.cx,
                        intrinsics.fy * cam[..., 1] / depth + intrinsics.cy,
                    ],
                    axis=-1,
                )
            visible = _in_image(uv, depth, intrinsics)
            for j in np.flatnonzero(visible.sum(axis=1) >= 3):
                overlap[j] = _hull_ratio(uv[j][visible[j]], intrinsics)

        valid = intersect & (overlap > overlap_threshold) & (angle < angle_threshold)
        columns["frame_a"].extend([fa] * m)
        columns["frame_b"].extend(frames_b)
        columns["intersect"].extend(intersect.tolist())
        columns["angle_deg"].extend(angle.tolist())
        columns["dist"].extend(dist.tolist())
        columns["overlap"].extend(overlap.tolist())
        columns["valid"].extend(valid.tolist())

    table = pd.DataFrame(columns, columns=TABLE_COLUMNS)
    table = table.astype({"frame_a": np.int64, "frame_b": np.int64, "intersect": bool, "valid": bool})

    # 4. per-frame flags: a frame with several valid partners counts once
    valid_rows = table[table["valid"]]
    has_valid_a = {t: False for t in frames_a}
    has_valid_b = {t: False for t in frames_b}
    has_valid_a.update({int(t): True for t in valid_rows["frame_a"].unique()})
    has_valid_b.update({int(t): True for t in valid_rows["frame_b"].unique()})

    intersect_all = table["intersect"].to_numpy(dtype=bool)
    result = AnnotationResult(
        table=table,
        has_valid_a=has_valid_a,
        has_valid_b=has_valid_b,
        angle_histogram=_histogram(
            table["angle_deg"].to_numpy(dtype=np.float64), intersect_all, HISTOGRAM_ANGLE_BIN_DEG, 180.0
        ),
        distance_histogram=_histogram(
            table["dist"].to_numpy(dtype=np.float64), intersect_all, distance_bin, None
        ),
        excluded_a=excluded_a,
        excluded_b=excluded_b,
    )
    logger.info(
        "annotated %d pairs: %d intersecting, %d valid; %d/%d camera-1 and %d/%d camera-2 frames annotated",
        len(table), int(intersect_all.sum()), result.n_valid,
        sum(has_valid_a.values()), len(frames_a), sum(has_valid_b.values()), len(frames_b),
    )
    return result


# ============================================================
# Files
# ============================================================

def save_annotations(path: PathLike, result: AnnotationResult) -> None:
    table = result.table.astype({"intersect": int, "valid": int})
    table.to_csv(path, index=False, float_format="%.10g")


def load_annotations(path: PathLike) -> pd.DataFrame:
    if not Path(path).exists():
        raise FileNotFoundError(f"annotation table not found: {path}")
    table = pd.read_csv(path)
    missing = set(TABLE_COLUMNS) - set(table.columns)
    if missing:
        raise AnnotationError(f"{path}: missing columns {sorted(missing)}")
    return table.astype({"frame_a": np.int64, "frame_b": np.int64, "intersect": bool, "valid": bool})


def save_histogram(path: PathLike, histogram: pd.DataFrame) -> None:
    histogram.to_csv(path, index=False)


def load_poses(path: PathLike) -> Dict[int, CameraPose]:
    """`frame_index qw qx qy qz tx ty tz` per line (world-to-camera); '#' starts a comment."""
    try:
        table = pd.read_csv(path, sep=r"\s+", header=None, comment="#")
    except pd.errors.EmptyDataError:
        return {}
    if table.shape[1] != 8:
        raise AnnotationError(f"{path}: expected 8 columns per pose line, got {table.shape[1]}")
    values = table.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise AnnotationError(f"{path}: non-finite pose values")
    rotations = Rotation.from_quat(values[:, [2, 3, 4, 1]]).as_matrix()
    poses = {}
    for row, rotation in zip(values, rotations):
        frame = int(row[0])
        if frame in poses:
            raise AnnotationError(f"{path}: duplicate pose for frame {frame}")
        poses[frame] = CameraPose(rotation, row[5:8])
    return poses


def load_frame_points(path: PathLike) -> Dict[int, np.ndarray]:
    """`frame_index x y z` per line, any number of lines per frame."""
    try:
        table = pd.read_csv(path, sep=r"\s+", header=None, comment="#")
    except pd.errors.EmptyDataError:
        return {}
    if table.shape[1] != 4:
        raise AnnotationError(f"{path}: expected 4 columns per point line, got {table.shape[1]}")
    values = table.to_numpy(dtype=np.float64)
    frames = values[:, 0].astype(np.int64)
    return {int(t): values[frames == t, 1:4] for t in np.unique(frames)}


def save_frame_points(path: PathLike, points: Dict[int, np.ndarray]) -> None:
    rows = [
        np.column_stack([np.full(len(p), t, dtype=np.float64), np.asarray(p, dtype=np.float64).reshape(-1, 3)])
        for t, p in sorted(points.items())
    ]
    values = np.concatenate(rows) if rows else np.zeros((0, 4))
    table = pd.DataFrame(values, columns=["frame", "x", "y", "z"]).astype({"frame": np.int64})
    table.to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")
