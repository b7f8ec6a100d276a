"""Skeleton trajectory ingestion, pose normalization, windowing, and
synthetic dataset generation.

File formats:

* trajectory file, one record per (clip, agent, frame)::

      clip_id<TAB>agent_id<TAB>frame_index<TAB>x1,y1,x2,y2,...

* label file, one record per (clip, frame)::

      clip_id<TAB>frame_index<TAB>label      # label in {0, 1}

* normalization statistics, flat ``key = value`` text with per-channel
  ``median_<c>`` and ``iqr_<c>`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataFormatError

DEFAULT_JOINTS = 17
DEFAULT_WINDOW = 12
CHANNELS = 2


@dataclass
class AgentTrajectory:
    """One agent's tracked joints: frames [F] strictly increasing, joints [F,V,2]."""

    clip_id: str
    agent_id: str
    frames: np.ndarray
    joints: np.ndarray


@dataclass
class FrameLabelTrack:
    """Per-frame binary anomaly labels for one clip (frame i -> labels[i])."""

    clip_id: str
    labels: np.ndarray


@dataclass
class PoseWindow:
    """A length-T slice of one trajectory; values [T,V,2]."""

    clip_id: str
    agent_id: str
    start_frame: int
    values: np.ndarray
    degenerate: bool = False


@dataclass
class RobustStats:
    """Per-channel median and interquartile range from the training split."""

    median: np.ndarray
    iqr: np.ndarray


# ---------------------------------------------------------------------------
# ingestion


def load_trajectories(path, expected_joints: int | None = None) -> list[AgentTrajectory]:
    """Parse a trajectory file; group by (clip, agent) and sort frames.

    The joint count is taken from the first record unless
    ``expected_joints`` is given; any record deviating from it is a schema
    error. Duplicate frame indices for one agent are rejected.
    """
    groups: dict[tuple[str, str], list[tuple[int, np.ndarray]]] = {}
    joints_per_record = expected_joints
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            clip_id, agent_id, frame_s, coord_s = parts
            try:
                frame = int(frame_s)
                coords = np.array([float(c) for c in coord_s.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"unparseable record ({exc})", lineno) from None
            if coords.size % 2 != 0:
                raise DataFormatError(f"odd coordinate count {coords.size}", lineno)
            v = coords.size // 2
            if joints_per_record is None:
                joints_per_record = v
            if v != joints_per_record:
                raise DataFormatError(
                    f"record for clip {clip_id!r} agent {agent_id!r} frame {frame} "
                    f"has {v} joints, expected {joints_per_record}",
                    lineno,
                )
            groups.setdefault((clip_id, agent_id), []).append((frame, coords.reshape(v, 2)))

    trajectories = []
    for (clip_id, agent_id), entries in sorted(groups.items()):
        entries.sort(key=lambda e: e[0])
        frames = np.array([e[0] for e in entries], dtype=np.int64)
        if np.any(np.diff(frames) == 0):
            dup = int(frames[np.where(np.diff(frames) == 0)[0][0]])
            raise DataFormatError(
                f"duplicate frame {dup} for clip {clip_id!r} agent {agent_id!r}"
            )
        joints = np.stack([e[1] for e in entries])
        trajectories.append(AgentTrajectory(clip_id, agent_id, frames, joints))
    return trajectories


def load_labels(path) -> list[FrameLabelTrack]:
    """Parse a label file; each clip must cover frames 0..N-1 exactly once."""
    per_clip: dict[str, dict[int, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
            clip_id, frame_s, label_s = parts
            try:
                frame = int(frame_s)
                label = int(label_s)
            except ValueError as exc:
                raise DataFormatError(f"unparseable record ({exc})", lineno) from None
            if label not in (0, 1):
                raise DataFormatError(f"label must be 0 or 1, got {label}", lineno)
            clip = per_clip.setdefault(clip_id, {})
            if frame in clip:
                raise DataFormatError(f"duplicate label for clip {clip_id!r} frame {frame}", lineno)
            clip[frame] = label

    tracks = []
    for clip_id, rows in sorted(per_clip.items()):
        n = len(rows)
        if sorted(rows) != list(range(n)):
            raise DataFormatError(f"clip {clip_id!r} labels do not cover frames 0..{n - 1}")
        tracks.append(FrameLabelTrack(clip_id, np.array([rows[i] for i in range(n)], dtype=np.int64)))
    return tracks


def write_trajectories(path, trajectories: list[AgentTrajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            for i, frame in enumerate(traj.frames):
                coords = ",".join(f"{c:.4f}" for c in traj.joints[i].reshape(-1))
                fh.write(f"{traj.clip_id}\t{traj.agent_id}\t{int(frame)}\t{coords}\n")


def write_labels(path, tracks: list[FrameLabelTrack]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for track in tracks:
            for frame, label in enumerate(track.labels):
                fh.write(f"{track.clip_id}\t{frame}\t{int(label)}\n")


# ---------------------------------------------------------------------------
# windowing


def window_slice(traj: AgentTrajectory, length: int, stride: int = 1) -> list[PoseWindow]:
    """Cut sliding windows of ``length`` consecutive frames, advancing by
    ``stride``. Tracking gaps break runs; no window spans a gap."""
    if length < 1 or stride < 1:
        raise ConfigError(f"window length and stride must be >= 1, got {length}, {stride}")
    windows = []
    breaks = np.where(np.diff(traj.frames) != 1)[0] + 1
    run_starts = np.concatenate(([0], breaks))
    run_ends = np.concatenate((breaks, [len(traj.frames)]))
    for lo, hi in zip(run_starts, run_ends):
        for s in range(lo, hi - length + 1, stride):
            windows.append(
                PoseWindow(
                    clip_id=traj.clip_id,
                    agent_id=traj.agent_id,
                    start_frame=int(traj.frames[s]),
                    values=traj.joints[s : s + length].copy(),
                )
            )
    return windows


def windows_from_trajectories(
    trajectories: list[AgentTrajectory], length: int, stride: int = 1
) -> list[PoseWindow]:
    out: list[PoseWindow] = []
    for traj in trajectories:
        out.extend(window_slice(traj, length, stride))
    return out


# ---------------------------------------------------------------------------
# normalization


def center_scale_pose(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Stage 1: per frame, subtract the joint bounding-box center and divide
    by the box width/height. A zero-extent axis gets scale 1 and flags the
    window."""
    mins = values.min(axis=1)
    maxs = values.max(axis=1)
    center = 0.5 * (mins + maxs)
    size = maxs - mins
    degenerate = bool(np.any(size == 0.0))
    scale = np.where(size == 0.0, 1.0, size)
    return (values - center[:, None, :]) / scale[:, None, :], degenerate


def stage1_normalize(windows: list[PoseWindow]) -> list[PoseWindow]:
    out = []
    for w in windows:
        values, degenerate = center_scale_pose(w.values)
        out.append(replace(w, values=values, degenerate=w.degenerate or degenerate))
    return out


def fit_robust_stats(windows: list[PoseWindow]) -> RobustStats:
    """Stage 2 fit: per-channel median and IQR over every training value.

    Call on stage-1 output of the training split only. A zero IQR (all
    values identical) falls back to 1 so the scaler stays defined.
    """
    if not windows:
        raise ConfigError("cannot fit normalization statistics on an empty training split")
    stacked = np.concatenate([w.values.reshape(-1, CHANNELS) for w in windows], axis=0)
    median = np.median(stacked, axis=0)
    q75, q25 = np.percentile(stacked, [75, 25], axis=0)
    iqr = q75 - q25
    iqr = np.where(iqr == 0.0, 1.0, iqr)
    return RobustStats(median=median, iqr=iqr)


def apply_robust_stats(windows: list[PoseWindow], stats: RobustStats) -> list[PoseWindow]:
    return [replace(w, values=(w.values - stats.median) / stats.iqr) for w in windows]


def normalize_windows(windows: list[PoseWindow], stats: RobustStats) -> list[PoseWindow]:
    """Both normalization stages with pre-fitted training statistics."""
    return apply_robust_stats(stage1_normalize(windows), stats)


def save_robust_stats(path, stats: RobustStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in range(stats.median.size):
            fh.write(f"median_{c} = {float(stats.median[c])!r}\n")
        for c in range(stats.iqr.size):
            fh.write(f"iqr_{c} = {float(stats.iqr[c])!r}\n")


def load_robust_stats(path) -> RobustStats:
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError("expected 'key = value'", lineno)
            key, _, val = line.partition("=")
            values[key.strip()] = float(val.strip())
    n = sum(1 for k in values if k.startswith("median_"))
    if n == 0 or n != sum(1 for k in values if k.startswith("iqr_")):
        raise DataFormatError("statistics file must define matching median_<c>/iqr_<c> entries")
    median = np.array([values[f"median_{c}"] for c in range(n)])
    iqr = np.array([values[f"iqr_{c}"] for c in range(n)])
    return RobustStats(median=median, iqr=iqr)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Desk-scale generator settings.

    Normal agents follow smooth low-frequency sinusoidal joint motion
    around a drifting root. Test clips additionally contain anomalous
    agents that, during their anomaly span, either jitter at high
    frequency or freeze. The training split is normal-only.
    """

    train_clips: int = 8
    test_clips: int = 4
    frames: int = 120
    agents: int = 2
    joints: int = DEFAULT_JOINTS
    anomaly_fraction: float = 0.25
    jitter_factor: float = 20.0
    freeze_fraction: float = 0.25

    def validate(self) -> None:
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ConfigError(f"anomaly_fraction must be in [0, 1], got {self.anomaly_fraction}")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ConfigError(f"freeze_fraction must be in [0, 1], got {self.freeze_fraction}")
        for name in ("train_clips", "test_clips", "frames", "agents", "joints"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.jitter_factor <= 0:
            raise ConfigError(f"jitter_factor must be positive, got {self.jitter_factor}")


@dataclass
class SynthDataset:
    train_trajectories: list[AgentTrajectory]
    train_labels: list[FrameLabelTrack]
    test_trajectories: list[AgentTrajectory]
    test_labels: list[FrameLabelTrack]


def _normal_motion(rng: np.random.Generator, frames: int, joints: int) -> np.ndarray:
    t = np.arange(frames, dtype=np.float64)[:, None, None]
    root0 = rng.uniform(100.0, 500.0, size=2)
    velocity = rng.uniform(-1.5, 1.5, size=2)
    root_amp = rng.uniform(3.0, 10.0, size=2)
    root_freq = rng.uniform(0.005, 0.03, size=2)
    root_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    root = root0 + velocity * t + root_amp * np.sin(2.0 * np.pi * root_freq * t + root_phase)

    offsets = rng.uniform(-30.0, 30.0, size=(joints, 2))
    amp = rng.uniform(0.5, 3.0, size=(joints, 2))
    freq = rng.uniform(0.01, 0.06, size=(joints, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(joints, 2))
    return root + offsets + amp * np.sin(2.0 * np.pi * freq * t + phase)


def synth_dataset(seed: int, config: SynthConfig) -> SynthDataset:
    """Generate a deterministic train/test dataset under the OCC protocol.

    The anomalous-agent quota is ``round(anomaly_fraction * total test
    agents)``, spread round-robin over test clips. Each anomalous agent
    misbehaves only during its own slot of the clip (the clip is split
    into ``agents`` equal slots), so the positive-frame rate of the test
    split tracks ``anomaly_fraction``.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    train_trajs, train_labels = [], []
    for i in range(config.train_clips):
        clip_id = f"train{i:03d}"
        for a in range(config.agents):
            motion = _normal_motion(rng, config.frames, config.joints)
            train_trajs.append(
                AgentTrajectory(clip_id, f"a{a}", np.arange(config.frames), motion)
            )
        train_labels.append(FrameLabelTrack(clip_id, np.zeros(config.frames, dtype=np.int64)))

    total_test_agents = config.test_clips * config.agents
    n_anom = int(round(config.anomaly_fraction * total_test_agents))
    n_frozen = int(round(config.freeze_fraction * n_anom))
    # (clip index -> within-clip anomaly slot), round-robin over clips
    anomalous: dict[int, list[tuple[int, str]]] = {}
    for k in range(n_anom):
        kind = "freeze" if k < n_frozen else "jitter"
        anomalous.setdefault(k % config.test_clips, []).append((k // config.test_clips, kind))

    slot_len = config.frames // config.agents
    test_trajs, test_labels = [], []
    for i in range(config.test_clips):
        clip_id = f"test{i:03d}"
        labels = np.zeros(config.frames, dtype=np.int64)
        plan = dict(anomalous.get(i, []))
        for a in range(config.agents):
            motion = _normal_motion(rng, config.frames, config.joints)
            if a in plan:
                s0, s1 = a * slot_len, (a + 1) * slot_len
                if plan[a] == "jitter":
                    step_scale = np.diff(motion, axis=0).std()
                    motion[s0:s1] += rng.normal(
                        0.0, config.jitter_factor * step_scale, size=motion[s0:s1].shape
                    )
                else:
                    motion[s0:s1] = motion[s0]
                labels[s0:s1] = 1
            test_trajs.append(AgentTrajectory(clip_id, f"a{a}", np.arange(config.frames), motion))
        test_labels.append(FrameLabelTrack(clip_id, labels))

    return SynthDataset(train_trajs, train_labels, test_trajs, test_labels)
