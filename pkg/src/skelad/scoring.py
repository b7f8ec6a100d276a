"""Anomaly scoring cascade and frame-level evaluation.

A window's score is its latent distance from the center (optionally the
reconstruction error, or their sum, in autoencoder mode). Per agent and
frame, scores of all windows containing the frame are averaged; per
frame, the maximum over agents present is taken. Frames no window covers
are excluded by default. AUC uses the rank statistic with averaged ranks
for ties, equivalent to pairwise counting with half credit for ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import manifolds
from .errors import ConfigError, DataFormatError, DimensionError, StateError, UndefinedAUCError
from .model import MotionModel

SCORE_DISTANCE = "hyp"
SCORE_RECON = "rec"
SCORE_COMBINED = "rec+hyp"
SCORE_KINDS = (SCORE_DISTANCE, SCORE_RECON, SCORE_COMBINED)


@dataclass
class WindowScore:
    clip_id: str
    agent_id: str
    start_frame: int
    score: float


@dataclass
class AnomalyTimeline:
    """Per-frame scores for one clip, restricted to covered frames."""

    clip_id: str
    frames: np.ndarray
    scores: np.ndarray


def score_windows(
    model: MotionModel,
    center: manifolds.LatentPoint,
    windows: np.ndarray,
    kind: str = SCORE_DISTANCE,
    batch_size: int = 1024,
) -> np.ndarray:
    """Score a window array [N,T,V,2]; larger means more anomalous."""
    if kind not in SCORE_KINDS:
        raise ConfigError(f"unknown score kind {kind!r}")
    if center.manifold != model.manifold:
        raise StateError(
            f"center manifold {center.manifold!r} does not match model manifold {model.manifold!r}"
        )
    if kind != SCORE_DISTANCE and model.decoder is None:
        raise StateError(f"score kind {kind!r} requires an autoencoder checkpoint")

    windows = np.asarray(windows, dtype=np.float64)
    out = np.empty(len(windows))
    for lo in range(0, len(windows), batch_size):
        batch = windows[lo : lo + batch_size]
        result = model.forward(batch, "infer", update_stats=False)
        if kind == SCORE_RECON:
            score = _recon_error(result)
        else:
            score = manifolds.distance_to_center(
                result.point.data, center.coords, model.manifold
            )
            if kind == SCORE_COMBINED:
                score = score + _recon_error(result)
        out[lo : lo + len(batch)] = score
    return out


def _recon_error(result) -> np.ndarray:
    """Per-window reconstruction MSE (sample axis is third in op layout)."""
    return np.mean((result.reconstruction.data - result.canonical_input) ** 2, axis=(0, 1, 3))


def median_window_scores(
    model: MotionModel, center: manifolds.LatentPoint, windows: np.ndarray
) -> dict[str, float]:
    """Median training-window score per available kind (uncovered-frame fill)."""
    kinds = SCORE_KINDS if model.decoder is not None else (SCORE_DISTANCE,)
    return {k: float(np.median(score_windows(model, center, windows, kind=k))) for k in kinds}


def agent_frame_score(covering_scores) -> float:
    """Mean window score over exactly the windows covering one (agent, frame)."""
    scores = np.asarray(covering_scores, dtype=np.float64)
    if scores.size == 0:
        raise StateError("frame has no covering window for this agent")
    return float(scores.mean())


def frame_score(agent_scores) -> float:
    """Max pool over the per-agent scores of one frame."""
    scores = np.asarray(agent_scores, dtype=np.float64)
    if scores.size == 0:
        raise StateError("frame has no covered agent")
    return float(scores.max())


def build_timelines(window_scores: list[WindowScore], window_length: int) -> list[AnomalyTimeline]:
    """Aggregate window scores into per-clip frame scores.

    Each window of agent p starting at s contributes its score to every
    frame s..s+T-1 of p; per-agent frame scores are the mean of those
    contributions and the clip frame score is the max over agents.
    """
    per_clip: dict[str, dict[str, dict[int, tuple[float, int]]]] = {}
    for ws in window_scores:
        agents = per_clip.setdefault(ws.clip_id, {})
        frames = agents.setdefault(ws.agent_id, {})
        for f in range(ws.start_frame, ws.start_frame + window_length):
            total, count = frames.get(f, (0.0, 0))
            frames[f] = (total + ws.score, count + 1)

    timelines = []
    for clip_id in sorted(per_clip):
        frame_values: dict[int, list[float]] = {}
        for frames in per_clip[clip_id].values():
            for f, (total, count) in frames.items():
                frame_values.setdefault(f, []).append(total / count)
        covered = np.array(sorted(frame_values), dtype=np.int64)
        scores = np.array([max(frame_values[f]) for f in covered])
        timelines.append(AnomalyTimeline(clip_id, covered, scores))
    return timelines


# ---------------------------------------------------------------------------
# AUC


def auc(scores, labels) -> float:
    """Area under the ROC curve via average ranks; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigError("labels must be binary")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC undefined: both classes must be present")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    first = np.searchsorted(sorted_scores, sorted_scores, side="left")
    last = np.searchsorted(sorted_scores, sorted_scores, side="right")
    ranks = np.empty(scores.size)
    ranks[order] = 0.5 * (first + last - 1) + 1.0
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# score CSV and evaluation report


def write_scores_csv(path, timelines: list[AnomalyTimeline], fill: dict[str, tuple[int, float]] | None = None) -> None:
    """Write ``clip_id,frame,score,covered`` rows for covered frames.

    ``fill`` optionally maps clip_id -> (frame_count, fill_score); frames
    of those clips without coverage then get a row with covered=0.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("clip_id,frame,score,covered\n")
        for tl in sorted(timelines, key=lambda t: t.clip_id):
            rows = {int(f): (float(s), 1) for f, s in zip(tl.frames, tl.scores)}
            if fill and tl.clip_id in fill:
                frame_count, fill_score = fill[tl.clip_id]
                for f in range(frame_count):
                    rows.setdefault(f, (fill_score, 0))
            for f in sorted(rows):
                score, covered = rows[f]
                fh.write(f"{tl.clip_id},{f},{score!r},{covered}\n")


def read_scores_csv(path) -> list[AnomalyTimeline]:
    per_clip: dict[str, list[tuple[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "clip_id,frame,score,covered":
            raise DataFormatError(f"unexpected score CSV header {header!r}", 1)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(f"expected 4 comma-separated fields, got {len(parts)}", lineno)
            try:
                per_clip.setdefault(parts[0], []).append((int(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise DataFormatError(f"unparseable score row ({exc})", lineno) from None
    timelines = []
    for clip_id in sorted(per_clip):
        rows = sorted(per_clip[clip_id])
        timelines.append(
            AnomalyTimeline(
                clip_id,
                np.array([r[0] for r in rows], dtype=np.int64),
                np.array([r[1] for r in rows]),
            )
        )
    return timelines


def evaluate(timelines: list[AnomalyTimeline], label_tracks) -> dict:
    """Join frame scores with ground-truth labels and compute AUC.

    Returns overall AUC over all joined frames plus per-clip AUC (None
    where a clip has a single class). Clips present on only one side are
    ignored; no overlap at all is an error.
    """
    labels_by_clip = {t.clip_id: t.labels for t in label_tracks}
    shared = [tl for tl in timelines if tl.clip_id in labels_by_clip]
    if not shared:
        raise ConfigError("scores and labels share no clip ids")

    all_scores, all_labels = [], []
    per_clip: dict[str, float | None] = {}
    for tl in shared:
        track = labels_by_clip[tl.clip_id]
        if tl.frames.size and tl.frames.max() >= track.size:
            raise DataFormatError(
                f"clip {tl.clip_id!r} scored frame {int(tl.frames.max())} "
                f"beyond label track of length {track.size}"
            )
        labels = track[tl.frames]
        all_scores.append(tl.scores)
        all_labels.append(labels)
        try:
            per_clip[tl.clip_id] = auc(tl.scores, labels)
        except UndefinedAUCError:
            per_clip[tl.clip_id] = None

    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    overall = auc(scores, labels)
    return {
        "overall_auc": overall,
        "frames": int(scores.size),
        "positives": int((labels == 1).sum()),
        "per_clip_auc": per_clip,
    }
