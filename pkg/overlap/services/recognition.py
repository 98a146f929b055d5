"""
Overlap — View-Overlap Recognition.
Answers one partner query against the local view database.

Coarse-to-fine pipeline:
1. Guard on the number of received features (strictly more than mu)
2. Re-aggregate the features into a view feature with the local vocabulary
3. Best view of the best temporal group (view-feature retrieval)
4. Local-feature matching against that view (exhaustive or via direct index)
5. Epipolar validation under RANSAC (skipped in view-only mode)
"""

import logging

import numpy as np

from overlap.core.config import PeerConfig
from overlap.core.database import ViewDatabase
from overlap.ml.features import match_local_features, match_with_direct_index
from overlap.ml.geometry import ERROR_FUNCTIONS, ransac_verify
from overlap.ml.vocabulary import Vocabulary
from overlap.models.schemas import QueryMessage, ReplyMessage, ReplyStatus

logger = logging.getLogger(__name__)

NO_MATCH = ReplyMessage(ReplyStatus.NO_MATCH)


def query_seed(base_seed: int, camera_id: int, frame_index: int) -> int:
    """RANSAC seed of one query, stable across runs and transports."""
    return int(np.random.SeedSequence([base_seed, camera_id, frame_index]).generate_state(1)[0])


def handle_query(
    db: ViewDatabase, vocab: Vocabulary, msg: QueryMessage, cfg: PeerConfig
) -> ReplyMessage:
    """Reply to a partner query; every failure mode is NO_MATCH. Never writes to `db`."""
    features = msg.features

    # 1. Enough features to be worth re-aggregating
    if len(features) <= cfg.mu:
        return NO_MATCH

    # 2. View feature
    v_q, query_direct = vocab.transform(features, cfg.direct_index_level)

    # 3. Candidate view
    candidate = db.query(
        v_q,
        alpha=cfg.alpha,
        n_candidates=cfg.n_candidates,
        acquisition_rate=cfg.acquisition_rate,
        beta=cfg.beta,
        min_group_size=cfg.min_group_size,
    )
    if candidate is None:
        return NO_MATCH
    stored = db.get(candidate.matched_frame)

    if not cfg.geometric_validation:
        return ReplyMessage(ReplyStatus.MATCH, stored.frame_index, 0)

    # 4. Local features
    if cfg.use_direct_index:
        matches = match_with_direct_index(
            features, query_direct, stored.features, stored.direct_index, cfg.gamma, cfg.delta,
            centers=vocab.centers,
        )
    else:
        matches = match_local_features(features, stored.features, cfg.gamma, cfg.delta)

    # 5. Geometry
    result = ransac_verify(
        matches,
        features,
        stored.features,
        mu=cfg.mu,
        rho=cfg.rho,
        max_iters=cfg.max_iterations,
        success_p=cfg.success_probability,
        tau=cfg.tau,
        seed=query_seed(cfg.seed, msg.camera_id, msg.frame_index),
        error_fn=ERROR_FUNCTIONS[cfg.error_metric],
    )
    logger.debug(
        "query cam%d/%d -> frame %d (score %.3f): %d matches, %d inliers, accepted=%s",
        msg.camera_id, msg.frame_index, stored.frame_index, candidate.score,
        len(matches), len(result.inliers), result.accepted,
    )
    if not result.accepted:
        return NO_MATCH
    return ReplyMessage(ReplyStatus.MATCH, stored.frame_index, min(len(result.inliers), 0xFFFF))
