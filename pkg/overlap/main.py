"""
Overlap — Command-Line Entry Point.
Binds the services into reproducible workflows.

    synth      scene, both sequences, ground truth, poses, frame points
    vocab      vocabulary tree from one or more sequence files
    run-pair   both peers in-process (memory pipe or loopback TCP), K runs
    peer       one camera over TCP (listen or connect)
    annotate   pair annotation table and viewpoint histograms
    eval       P / R / A reports, repetitions and the two-stage comparison

Every command writes `manifest.json` into its output directory.
"""

import argparse
import asyncio
import json
import logging
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from overlap.core.config import PeerConfig, load_peer_config, load_scene_config, settings
from overlap.core.errors import OverlapError, PeerSessionError
from overlap.core.logging import setup_logging
from overlap.ml.vocabulary import build_vocabulary
from overlap.models.schemas import CameraIntrinsics, RecognitionLog
from overlap.services import annotation, codec, evaluation, peer, synthetic_scene
from overlap.services.manifest import RunManifest

logger = logging.getLogger("overlap.cli")

STAGES = {"two_stage": True, "view_only": False}
LOG_PATTERN = re.compile(r"^log_(two_stage|view_only)_run(\d+)_cam([12])\.csv$")

SCENE_FILES = {
    "sequence_1": "sequence_cam1.xvff",
    "sequence_2": "sequence_cam2.xvff",
    "ground_truth_1": "groundtruth_cam1.xvgt",
    "ground_truth_2": "groundtruth_cam2.xvgt",
    "poses_1": "poses_cam1.txt",
    "poses_2": "poses_cam2.txt",
    "points_1": "points_cam1.txt",
    "world_1": "world_cam1.csv",
    "world_2": "world_cam2.csv",
    "scene": "scene.json",
}


def log_name(stage: str, run: int, camera_id: int) -> str:
    return f"log_{stage}_run{run:02d}_cam{camera_id}.csv"


def _out_dir(args) -> Path:
    out = Path(args.out or settings.OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(explicit: Optional[str], scene_dir: Optional[str], key: str) -> Path:
    """Explicit path, else the conventional file inside --scene."""
    if explicit:
        path = Path(explicit)
    elif scene_dir:
        path = Path(scene_dir) / SCENE_FILES[key]
    else:
        raise ValueError(f"no input for {key.replace('_', ' ')}: pass it explicitly or use --scene")
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return path


# ============================================================
# synth
# ============================================================

def cmd_synth(args) -> None:
    cfg = load_scene_config(args.config, seed=args.seed)
    out = _out_dir(args)
    manifest = RunManifest(
        command="synth",
        seeds={"scene": cfg.seed},
        config_paths={"scene": str(args.config or "")},
        config=cfg.model_dump(mode="json"),
    )
    manifest.seal()

    scene = synthetic_scene.synthesize(cfg)
    files = {key: out / name for key, name in SCENE_FILES.items()}

    codec.save_sequence(files["sequence_1"], [f.features for f in scene.frames_1])
    codec.save_sequence(files["sequence_2"], [f.features for f in scene.frames_2])
    gt_1 = {f.features.frame_index: f.point_ids for f in scene.frames_1}
    gt_2 = {f.features.frame_index: f.point_ids for f in scene.frames_2}
    codec.save_ground_truth(files["ground_truth_1"], gt_1)
    codec.save_ground_truth(files["ground_truth_2"], gt_2)
    synthetic_scene.save_poses(files["poses_1"], scene.poses_1)
    synthetic_scene.save_poses(files["poses_2"], scene.poses_2)
    annotation.save_frame_points(files["points_1"], synthetic_scene.frame_points(scene.world_1, gt_1))
    synthetic_scene.save_world(files["world_1"], scene.world_1)
    synthetic_scene.save_world(files["world_2"], scene.world_2)
    files["scene"].write_text(
        json.dumps({**cfg.model_dump(mode="json"), "aliased_frames": scene.aliased_frames}, indent=2) + "\n"
    )
    manifest.write(out, files.values())


# ============================================================
# vocab
# ============================================================

def cmd_vocab(args) -> None:
    paths = [Path(p) for p in args.sequences] or [
        _pick(None, args.scene, "sequence_1"), _pick(None, args.scene, "sequence_2")
    ]
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"input not found: {path}")
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    manifest = RunManifest(
        command="vocab",
        seeds={"vocabulary": seed},
        config={"k_b": args.k_b, "depth": args.depth, "max_descriptors": args.max_descriptors},
    )
    manifest.add_inputs(paths)
    manifest.seal()

    blocks = [f.descriptors for path in paths for f in codec.load_sequence(path)]
    corpus = np.concatenate(blocks) if blocks else np.zeros((0, 32), dtype=np.uint8)
    if args.max_descriptors and len(corpus) > args.max_descriptors:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(corpus), args.max_descriptors, replace=False))
        corpus = corpus[keep]
    logger.info("training corpus: %d descriptors from %d files", len(corpus), len(paths))

    vocab = build_vocabulary(corpus, k_b=args.k_b, depth=args.depth, seed=seed)
    target = out / "vocabulary.xvvc"
    codec.save_vocabulary(target, vocab)
    manifest.write(out, [target])


# ============================================================
# run-pair / peer
# ============================================================

def _peer_configs(args, run: int, geometry: bool) -> List[PeerConfig]:
    configs = []
    for camera_id in (1, 2):
        cfg = load_peer_config(args.config, camera_id=camera_id)
        base = cfg.seed if args.seed is None else args.seed
        configs.append(cfg.model_copy(update={"seed": base + run, "geometric_validation": geometry}))
    return configs


def cmd_run_pair(args) -> None:
    seq_paths = [
        _pick(args.sequences[0] if args.sequences else None, args.scene, "sequence_1"),
        _pick(args.sequences[1] if args.sequences else None, args.scene, "sequence_2"),
    ]
    vocab_path = Path(args.vocab)
    if not vocab_path.exists():
        raise FileNotFoundError(f"input not found: {vocab_path}")
    if args.runs < 1:
        raise ValueError(f"--runs must be >= 1; got {args.runs}")
    stages = list(STAGES) if args.stages == "both" else [args.stages]
    out = _out_dir(args)

    base_cfg = load_peer_config(args.config)
    manifest = RunManifest(
        command="run-pair",
        seeds={"base": base_cfg.seed if args.seed is None else args.seed, "runs": args.runs},
        config_paths={"peer": str(args.config or settings.DEFAULT_CONFIG_PATH)},
        config={**base_cfg.model_dump(mode="json"), "stages": stages, "transport": args.transport},
    )
    manifest.add_inputs([*seq_paths, vocab_path])
    manifest.seal()

    vocab = codec.load_vocabulary(vocab_path)
    sequences = [codec.load_sequence(p, base_cfg.max_features) for p in seq_paths]
    written: List[Path] = []
    for stage in stages:
        for run in range(args.runs):
            cfg_1, cfg_2 = _peer_configs(args, run, STAGES[stage])
            try:
                logs = asyncio.run(
                    peer.run_pair(vocab, cfg_1, sequences[0], cfg_2, sequences[1], args.transport, args.host)
                )
            except PeerSessionError as exc:
                if exc.log is not None:
                    partial = out / log_name(stage, run, exc.log.camera_id)
                    peer.save_log(partial, exc.log)
                    logger.error("partial log written to %s", partial)
                raise
            for log in logs:
                path = out / log_name(stage, run, log.camera_id)
                peer.save_log(path, log)
                written.extend([path, path.with_suffix(".json")])
    manifest.write(out, written)


def _endpoint(value: str):
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port; got {value!r}")
    return host, int(port)


def cmd_peer(args) -> None:
    host, port = _endpoint(args.endpoint or f"{settings.DEFAULT_HOST}:{settings.DEFAULT_PORT}")
    cfg = load_peer_config(args.config, camera_id=args.camera_id, seed=args.seed)
    seq_path = _pick(args.sequence, args.scene, f"sequence_{args.camera_id}")
    vocab_path = Path(args.vocab)
    if not vocab_path.exists():
        raise FileNotFoundError(f"input not found: {vocab_path}")
    out = _out_dir(args)
    manifest = RunManifest(
        command="peer",
        seeds={"ransac": cfg.seed},
        config_paths={"peer": str(args.config or settings.DEFAULT_CONFIG_PATH)},
        config={**cfg.model_dump(mode="json"), "role": args.role},
    )
    manifest.add_inputs([seq_path, vocab_path])
    manifest.seal()

    vocab = codec.load_vocabulary(vocab_path)
    sequence = codec.load_sequence(seq_path, cfg.max_features)

    async def session() -> RecognitionLog:
        if args.role == "listen":
            channel = await peer.listen(host, port)
        else:
            channel = await peer.connect(host, port, settings.CONNECT_RETRIES, settings.CONNECT_RETRY_DELAY)
        return await peer.run_peer(cfg, vocab, sequence, channel)

    path = out / f"log_cam{cfg.camera_id}.csv"
    try:
        log = asyncio.run(session())
    except PeerSessionError as exc:
        if exc.log is not None:
            peer.save_log(path, exc.log)
        raise
    peer.save_log(path, log)
    manifest.write(out, [path, path.with_suffix(".json")])


# ============================================================
# annotate
# ============================================================

def _intrinsics(args) -> CameraIntrinsics:
    scene_json = Path(args.scene) / SCENE_FILES["scene"] if args.scene else None
    if args.config:
        cfg = load_scene_config(args.config)
    elif scene_json is not None and scene_json.exists():
        data = json.loads(scene_json.read_text())
        data.pop("aliased_frames", None)
        cfg = load_scene_config(None, **data)
    else:
        cfg = load_scene_config(None)
    k = cfg.intrinsics
    return CameraIntrinsics(k.fx, k.fy, k.cx, k.cy, k.width, k.height)


def cmd_annotate(args) -> None:
    poses_1_path = _pick(args.poses_1, args.scene, "poses_1")
    poses_2_path = _pick(args.poses_2, args.scene, "poses_2")
    points_path = _pick(args.points_1, args.scene, "points_1")
    intrinsics = _intrinsics(args)
    out = _out_dir(args)
    manifest = RunManifest(
        command="annotate",
        config={
            "overlap_threshold": args.overlap_threshold,
            "angle_threshold": args.angle_threshold,
            "near": args.near,
            "far": args.far,
            "distance_bin": args.distance_bin,
            "intrinsics": [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                           intrinsics.width, intrinsics.height],
        },
    )
    manifest.add_inputs([poses_1_path, poses_2_path, points_path])
    manifest.seal()

    poses_1 = annotation.load_poses(poses_1_path)
    poses_2 = annotation.load_poses(poses_2_path)
    points_1 = annotation.load_frame_points(points_path)
    result = annotation.label_pairs(
        poses_1,
        points_1,
        poses_2,
        intrinsics,
        frames_a=sorted(set(poses_1) | set(points_1)),
        overlap_threshold=args.overlap_threshold,
        angle_threshold=args.angle_threshold,
        near=args.near,
        far=args.far,
        distance_bin=args.distance_bin,
    )
    if result.excluded_a or result.excluded_b:
        logger.warning("excluded frames without pose: %s / %s", result.excluded_a, result.excluded_b)

    files = [out / "annotations.csv", out / "histogram_angle.csv", out / "histogram_distance.csv"]
    annotation.save_annotations(files[0], result)
    annotation.save_histogram(files[1], result.angle_histogram)
    annotation.save_histogram(files[2], result.distance_histogram)
    manifest.write(out, files)


# ============================================================
# eval
# ============================================================

def _discover_logs(log_dir: Path) -> Dict[str, Dict[int, Dict[int, Path]]]:
    """stage -> run -> camera id -> log path."""
    found: Dict[str, Dict[int, Dict[int, Path]]] = {}
    for path in sorted(log_dir.glob("log_*.csv")):
        match = LOG_PATTERN.match(path.name)
        if match:
            stage, run, camera = match.group(1), int(match.group(2)), int(match.group(3))
            found.setdefault(stage, {}).setdefault(run, {})[camera] = path
    return found


def cmd_eval(args) -> None:
    annotations_path = Path(args.annotations)
    if not annotations_path.exists():
        raise FileNotFoundError(f"annotation table not found: {annotations_path}")
    log_dir = Path(args.logs)
    found = _discover_logs(log_dir) if log_dir.is_dir() else {}
    if not found:
        raise FileNotFoundError(f"no recognition logs found in {log_dir}")
    out = _out_dir(args)

    inputs = [annotations_path]
    for runs in found.values():
        for run, cameras in sorted(runs.items()):
            if set(cameras) != {1, 2}:
                raise FileNotFoundError(f"run {run}: missing log of camera {({1, 2} - set(cameras)).pop()}")
            inputs.extend(cameras[c] for c in (1, 2))
    manifest = RunManifest(command="eval", config={"pair": args.pair})
    manifest.add_inputs(inputs)
    manifest.seal()

    index = evaluation.AnnotationIndex.from_table(annotation.load_annotations(annotations_path))
    per_stage: Dict[str, List[evaluation.PairEvaluation]] = {}
    written: List[Path] = []
    for stage, runs in sorted(found.items()):
        evaluations = []
        for run, cameras in sorted(runs.items()):
            log_1 = peer.load_log(cameras[1])
            log_2 = peer.load_log(cameras[2])
            evaluations.append(evaluation.evaluate_pair(log_1, log_2, index, run))
        per_stage[stage] = evaluations
        table = evaluation.report_table(args.pair, evaluations, index)
        table["manifest_hash"] = manifest.manifest_hash
        path = out / f"report_{stage}.csv"
        evaluation.save_report(path, table)
        written.append(path)

    if set(per_stage) == set(STAGES):
        table = evaluation.comparison_table(args.pair, per_stage["two_stage"], per_stage["view_only"])
        table["manifest_hash"] = manifest.manifest_hash
        path = out / "report_comparison.csv"
        evaluation.save_report(path, table)
        written.append(path)
    manifest.write(out, written)


# ============================================================
# Parser & global error handler
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description="Cross-camera view-overlap recognition")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (env OVERLAP_LOG_LEVEL)")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=None, help=f"output directory (default {settings.OUTPUT_DIR})")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic two-camera scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", parents=[common], help="train a vocabulary tree")
    p.add_argument("--sequences", nargs="*", default=[], help="sequence files used as training corpus")
    p.add_argument("--scene", default=None, help="scene directory written by synth")
    p.add_argument("--k-b", type=int, default=10)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--max-descriptors", type=int, default=None)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("run-pair", parents=[common], help="run both peers on two sequences")
    p.add_argument("--sequences", nargs=2, default=None, metavar=("CAM1", "CAM2"))
    p.add_argument("--scene", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--stages", choices=[*STAGES, "both"], default="two_stage")
    p.add_argument("--transport", choices=["memory", "tcp"], default="memory")
    p.add_argument("--host", default=settings.DEFAULT_HOST)
    p.set_defaults(func=cmd_run_pair)

    p = sub.add_parser("peer", parents=[common], help="run one camera over TCP")
    p.add_argument("--role", choices=["listen", "connect"], required=True)
    p.add_argument("--endpoint", default=None, help="host:port")
    p.add_argument("--camera-id", type=int, choices=[1, 2], required=True)
    p.add_argument("--sequence", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_peer)

    p = sub.add_parser("annotate", parents=[common], help="label frame pairs from poses and points")
    p.add_argument("--scene", default=None)
    p.add_argument("--poses-1", default=None)
    p.add_argument("--poses-2", default=None)
    p.add_argument("--points-1", default=None)
    p.add_argument("--overlap-threshold", type=float, default=annotation.DEFAULT_OVERLAP_THRESHOLD)
    p.add_argument("--angle-threshold", type=float, default=annotation.DEFAULT_ANGLE_THRESHOLD)
    p.add_argument("--near", type=float, default=annotation.DEFAULT_NEAR)
    p.add_argument("--far", type=float, default=annotation.DEFAULT_FAR)
    p.add_argument("--distance-bin", type=float, default=annotation.DEFAULT_DISTANCE_BIN)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("eval", parents=[common], help="score recognition logs against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--logs", required=True, help="directory written by run-pair")
    p.add_argument("--pair", default="pair")
    p.set_defaults(func=cmd_eval)
    return parser


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, OverlapError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return "file_not_found"
    if isinstance(exc, ValueError):
        return "invalid_value"
    return "io_error"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.func(args)
    except (OverlapError, ValueError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        line = json.dumps({"error": _error_code(exc), "message": str(exc)})
        print(f"error: {line}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
