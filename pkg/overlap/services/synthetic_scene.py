"""
Overlap — Synthetic Scene.
Deterministic world of 3D points with identity descriptors, camera
trajectories and pinhole rendering with descriptor noise.

Every rendered observation keeps the id of its source point in a side table,
which is the ground truth for matching, geometry and annotation checks.

Camera convention: x right, y down, z forward (viewing direction).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from overlap.core.config import SceneConfig, TrajectoryConfig
from overlap.core.errors import SceneError
from overlap.ml.features import POPCOUNT
from overlap.models.schemas import (
    CameraIntrinsics,
    CameraPose,
    FrameFeatures,
    MatchPair,
    MatchSet,
)

logger = logging.getLogger(__name__)

MAX_REDRAW_ROUNDS = 100
FLOOR_CHECK_CHUNK = 256


@dataclass(eq=False)
class SyntheticWorld:
    points: np.ndarray        # (n, 3) float64
    descriptors: np.ndarray   # (n, 32) uint8 identity descriptors
    seed: int

    def __len__(self) -> int:
        return len(self.points)


@dataclass(eq=False)
class RenderedFrame:
    features: FrameFeatures
    point_ids: np.ndarray     # (n,) source point id of every observation


@dataclass(eq=False)
class SyntheticScene:
    """Both cameras of one generated scene."""

    config: SceneConfig
    intrinsics: CameraIntrinsics
    world_1: SyntheticWorld
    world_2: SyntheticWorld
    poses_1: List[CameraPose]
    poses_2: List[CameraPose]
    frames_1: List[RenderedFrame]
    frames_2: List[RenderedFrame]
    aliased_frames: List[int] = field(default_factory=list)


# ============================================================
# World
# ============================================================

def _floor_violations(descriptors: np.ndarray, floor: int) -> np.ndarray:
    """Indices i having some j < i closer than `floor` bits."""
    n = len(descriptors)
    bad = []
    for start in range(0, n, FLOOR_CHECK_CHUNK):
        rows = descriptors[start:start + FLOOR_CHECK_CHUNK]
        stop = start + len(rows)
        d = POPCOUNT[np.bitwise_xor(rows[:, None, :], descriptors[None, :stop, :])].sum(
            axis=2, dtype=np.int32
        )
        # only earlier descriptors count against row i
        earlier = np.arange(stop)[None, :] < np.arange(start, stop)[:, None]
        bad.extend((start + np.flatnonzero(np.any((d < floor) & earlier, axis=1))).tolist())
    return np.array(bad, dtype=np.int64)


def generate_scene(
    n_points: int,
    bounds_min: Sequence[float],
    bounds_max: Sequence[float],
    seed: int,
    hamming_floor: int = 64,
) -> SyntheticWorld:
    """Uniform points in a box with pairwise-separated random identity descriptors."""
    if n_points < 1:
        raise SceneError(f"n_points must be >= 1; got {n_points}")
    rng = np.random.default_rng(seed)
    points = rng.uniform(bounds_min, bounds_max, size=(n_points, 3))
    descriptors = rng.integers(0, 256, size=(n_points, 32), dtype=np.uint8)

    for _ in range(MAX_REDRAW_ROUNDS):
        bad = _floor_violations(descriptors, hamming_floor)
        if len(bad) == 0:
            return SyntheticWorld(points, descriptors, seed)
        descriptors[bad] = rng.integers(0, 256, size=(len(bad), 32), dtype=np.uint8)
    raise SceneError(
        f"could not separate {n_points} descriptors by {hamming_floor} bits "
        f"after {MAX_REDRAW_ROUNDS} redraw rounds"
    )


# ============================================================
# Cameras
# ============================================================

def look_at(center: Sequence[float], forward: Sequence[float], up: Sequence[float]) -> CameraPose:
    """World-to-camera pose of a camera at `center` looking along `forward`."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    down = -(up - np.dot(up, z) * z)
    norm = np.linalg.norm(down)
    if norm < 1e-12:
        raise SceneError("up vector is parallel to the viewing direction")
    y = down / norm
    x = np.cross(y, z)
    rotation = np.stack([x, y, z])
    return CameraPose(rotation, -rotation @ np.asarray(center, dtype=np.float64))


def trajectory_centers(waypoints: Sequence[Sequence[float]], n_frames: int) -> np.ndarray:
    """n_frames positions evenly spaced by arc length along the polyline."""
    nodes = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if len(nodes) == 1 or n_frames == 1:
        return np.repeat(nodes[:1], n_frames, axis=0)
    lengths = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    if cumulative[-1] == 0:
        return np.repeat(nodes[:1], n_frames, axis=0)
    s = np.linspace(0.0, cumulative[-1], n_frames)
    return np.stack([np.interp(s, cumulative, nodes[:, axis]) for axis in range(3)], axis=1)


def trajectory_poses(
    trajectory: TrajectoryConfig, offset: Optional[Sequence[float]] = None
) -> List[CameraPose]:
    centers = trajectory_centers(trajectory.waypoints, trajectory.n_frames)
    if offset is not None:
        centers = centers + np.asarray(offset, dtype=np.float64)
    return [look_at(c, trajectory.forward, trajectory.up) for c in centers]


def project(
    points_world: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics
) -> Tuple[np.ndarray, np.ndarray]:
    """Pinhole projection: (n, 2) float64 pixel coordinates and (n,) depths."""
    cam = pose.to_camera(np.asarray(points_world, dtype=np.float64).reshape(-1, 3))
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / depth + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / depth + intrinsics.cy
    return np.stack([u, v], axis=1), depth


def flip_bits(descriptors: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Flip every bit independently with probability `prob`."""
    if prob <= 0 or len(descriptors) == 0:
        return descriptors.copy()
    mask = np.packbits(rng.random((len(descriptors), descriptors.shape[1] * 8)) < prob, axis=1)
    return np.bitwise_xor(descriptors, mask)


def render_frame(
    world: SyntheticWorld,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    bit_flip_prob: float,
    max_features: int,
    seed: int,
    frame_index: int = 0,
) -> RenderedFrame:
    """Observations of the visible world points, nearest first, at most `max_features`."""
    if not 0 <= bit_flip_prob < 0.5:
        raise ValueError(f"bit_flip_prob must be in [0, 0.5); got {bit_flip_prob}")
    uv, depth = project(world.points, pose, intrinsics)
    uv32 = uv.astype(np.float32)
    front = depth > 0
    inside = (
        front
        & (uv32[:, 0] >= 0) & (uv32[:, 0] < intrinsics.width)
        & (uv32[:, 1] >= 0) & (uv32[:, 1] < intrinsics.height)
    )
    ids = np.flatnonzero(inside)
    ids = ids[np.lexsort((ids, depth[ids]))][:max_features]

    rng = np.random.default_rng(seed)
    descriptors = flip_bits(world.descriptors[ids], bit_flip_prob, rng)
    features = FrameFeatures(frame_index, uv32[ids], descriptors)
    return RenderedFrame(features, ids.astype(np.int64))


def ground_truth_matches(frame_a: RenderedFrame, frame_b: RenderedFrame) -> MatchSet:
    """Observations of a and b that share a source point."""
    position_b = {int(pid): j for j, pid in enumerate(frame_b.point_ids)}
    pairs = []
    for i, pid in enumerate(frame_a.point_ids):
        j = position_b.get(int(pid))
        if j is not None:
            pairs.append(MatchPair(i, j, 0))
    return MatchSet(pairs)


# ============================================================
# Scenes
# ============================================================

def frame_seed(scene_seed: int, camera_id: int, frame_index: int) -> int:
    return int(np.random.SeedSequence([scene_seed, camera_id, frame_index]).generate_state(1)[0])


def _render_sequence(
    world: SyntheticWorld,
    poses: List[CameraPose],
    intrinsics: CameraIntrinsics,
    cfg: SceneConfig,
    camera_id: int,
) -> List[RenderedFrame]:
    return [
        render_frame(
            world, pose, intrinsics, cfg.bit_flip_prob, cfg.max_features,
            frame_seed(cfg.seed, camera_id, t), frame_index=t,
        )
        for t, pose in enumerate(poses)
    ]


def _alias(scene: SyntheticScene) -> None:
    """Replace a fraction of camera-2 frames by camera-1 content at shuffled positions."""
    shared = min(len(scene.frames_1), len(scene.frames_2))
    n_alias = int(round(scene.config.camera_b.alias_fraction * shared))
    if n_alias == 0:
        return
    rng = np.random.default_rng(np.random.SeedSequence([scene.config.seed, 0xA11A5]))
    chosen = np.sort(rng.choice(shared, n_alias, replace=False))
    for t in chosen.tolist():
        source = scene.frames_1[t]
        order = rng.permutation(len(source.features))
        features = FrameFeatures(
            t, source.features.points[order], source.features.descriptors.copy()
        )
        scene.frames_2[t] = RenderedFrame(features, source.point_ids.copy())
    scene.aliased_frames = chosen.tolist()


def synthesize(cfg: SceneConfig) -> SyntheticScene:
    """Generate world(s), trajectories and both rendered sequences."""
    k = cfg.intrinsics
    try:
        intrinsics = CameraIntrinsics(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    except ValueError as exc:
        raise SceneError(str(exc)) from exc

    world_1 = generate_scene(cfg.n_points, cfg.bounds.min, cfg.bounds.max, cfg.seed, cfg.hamming_floor)
    offset = None
    if cfg.shared_world:
        world_2 = world_1
    else:
        offset = np.asarray(cfg.separate_world_offset, dtype=np.float64)
        world_2 = generate_scene(
            cfg.n_points, np.add(cfg.bounds.min, offset), np.add(cfg.bounds.max, offset),
            cfg.seed + 1, cfg.hamming_floor,
        )

    poses_1 = trajectory_poses(cfg.camera_a)
    poses_2 = trajectory_poses(cfg.camera_b, offset)
    scene = SyntheticScene(
        config=cfg,
        intrinsics=intrinsics,
        world_1=world_1,
        world_2=world_2,
        poses_1=poses_1,
        poses_2=poses_2,
        frames_1=_render_sequence(world_1, poses_1, intrinsics, cfg, 1),
        frames_2=_render_sequence(world_2, poses_2, intrinsics, cfg, 2),
    )
    _alias(scene)

    counts = [len(f.features) for f in scene.frames_1 + scene.frames_2]
    logger.info(
        "scene: %d points, %d + %d frames, %d-%d observations per frame, %d aliased",
        cfg.n_points, len(poses_1), len(poses_2), min(counts), max(counts),
        len(scene.aliased_frames),
    )
    return scene


# ============================================================
# Text files
# ============================================================

PathLike = Union[str, Path]


def save_poses(path: PathLike, poses: List[CameraPose]) -> None:
    """`frame_index qw qx qy qz tx ty tz` per line, world-to-camera."""
    rows = []
    for t, pose in enumerate(poses):
        qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
        rows.append([t, qw, qx, qy, qz, *pose.translation])
    table = pd.DataFrame(rows, columns=["frame", "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
    table.to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")


def save_world(path: PathLike, world: SyntheticWorld) -> None:
    table = pd.DataFrame(
        {
            "point_id": np.arange(len(world)),
            "x": world.points[:, 0],
            "y": world.points[:, 1],
            "z": world.points[:, 2],
            "descriptor": [row.tobytes().hex() for row in world.descriptors],
        }
    )
    table.to_csv(path, index=False, float_format="%.17g")


def load_world(path: PathLike, seed: int = 0) -> SyntheticWorld:
    table = pd.read_csv(path, dtype={"descriptor": str})
    points = table[["x", "y", "z"]].to_numpy(dtype=np.float64)
    descriptors = np.stack(
        [np.frombuffer(bytes.fromhex(h), dtype=np.uint8) for h in table["descriptor"]]
    ) if len(table) else np.zeros((0, 32), dtype=np.uint8)
    return SyntheticWorld(points, descriptors, seed)


def frame_points(world: SyntheticWorld, point_ids: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
    """3D points observed by every frame, from the ground-truth side table."""
    return {t: world.points[np.asarray(ids, dtype=np.int64)] for t, ids in point_ids.items()}
