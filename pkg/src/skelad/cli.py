"""Command-line entry point: synth, train, score, eval.

Configuration layering: built-in defaults, then a flat ``key = value``
config file (``--config``), then explicit flags. Every command writes a
``manifest.json`` next to its outputs recording the command, the merged
configuration, the seed, and sha256 hashes of inputs and outputs, so any
result is reproducible from its manifest. Environment variables are
never consulted.

Exit codes: 0 success, 1 usage/config error, 2 I/O or data-format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dp
from . import manifolds, scoring, trainer
from .encoder import EncoderConfig
from .errors import ConfigError, DataFormatError, NumericalError, SkeladError
from .model import ModelConfig, MotionModel, load_checkpoint, save_checkpoint
from .projector import ProjectorConfig


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this tool reserves 2 for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


TRAIN_DEFAULTS = {
    "manifold": "euclidean",
    "center": "dynamic",
    "projector": "nonlinear",
    "encoder": "separable",
    "ae": False,
    "epochs": 80,
    "lr": 1e-4,
    "batch_size": 256,
    "window": dp.DEFAULT_WINDOW,
    "stride": 1,
    "latent_dim": None,
    "seed": 0,
    "alpha": 1e-5,
    "gamma": 1.0,
    "phi": 1.0,
    "channels": "2,32,16,8,8",
    "pool": "mean",
    "blocks": 1,
    "final_bias": False,
}

SYNTH_DEFAULTS = {
    "train_clips": 8,
    "test_clips": 4,
    "frames": 120,
    "agents": 2,
    "joints": dp.DEFAULT_JOINTS,
    "anomaly_fraction": 0.25,
    "jitter_factor": 20.0,
    "freeze_fraction": 0.25,
    "seed": 0,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError("expected 'key = value'", lineno)
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _resolve(defaults: dict, config_path, flag_values: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    if config_path is not None:
        file_values = parse_config_file(config_path)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, text in file_values.items():
            default = defaults[key]
            if isinstance(default, bool):
                merged[key] = _parse_bool(text)
            elif isinstance(default, int) and not isinstance(default, bool):
                merged[key] = int(text)
            elif isinstance(default, float):
                merged[key] = float(text)
            elif default is None and key == "latent_dim":
                merged[key] = int(text)
            else:
                merged[key] = text
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": {k: config[k] for k in sorted(config)},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _resolve(
        SYNTH_DEFAULTS,
        args.config,
        {
            "train_clips": args.train_clips,
            "test_clips": args.test_clips,
            "frames": args.frames,
            "agents": args.agents,
            "joints": args.joints,
            "anomaly_fraction": args.anomaly_fraction,
            "jitter_factor": args.jitter_factor,
            "freeze_fraction": args.freeze_fraction,
            "seed": args.seed,
        },
    )
    synth_cfg = dp.SynthConfig(
        train_clips=cfg["train_clips"],
        test_clips=cfg["test_clips"],
        frames=cfg["frames"],
        agents=cfg["agents"],
        joints=cfg["joints"],
        anomaly_fraction=cfg["anomaly_fraction"],
        jitter_factor=cfg["jitter_factor"],
        freeze_fraction=cfg["freeze_fraction"],
    )
    dataset = dp.synth_dataset(cfg["seed"], synth_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.tsv",
        "train_labels": out / "train_labels.tsv",
        "test": out / "test.tsv",
        "test_labels": out / "test_labels.tsv",
    }
    dp.write_trajectories(paths["train"], dataset.train_trajectories)
    dp.write_labels(paths["train_labels"], dataset.train_labels)
    dp.write_trajectories(paths["test"], dataset.test_trajectories)
    dp.write_labels(paths["test_labels"], dataset.test_labels)
    inputs = [Path(args.config)] if args.config else []
    _write_manifest(out, "synth", cfg, inputs, sorted(paths.values()))
    positives = sum(int(t.labels.sum()) for t in dataset.test_labels)
    total = sum(t.labels.size for t in dataset.test_labels)
    print(f"wrote {out}: {len(dataset.train_trajectories)} train agents, "
          f"{len(dataset.test_trajectories)} test agents, "
          f"test positive rate {positives / total:.3f}")
    return 0


# ---------------------------------------------------------------------------
# train


def _build_model_config(cfg: dict, joints: int) -> ModelConfig:
    channels = tuple(int(c) for c in str(cfg["channels"]).split(","))
    encoder = EncoderConfig(
        frames=cfg["window"],
        joints=joints,
        channels=channels,
        layer_count=len(channels) - 1,
        kind=cfg["encoder"],
        pool=cfg["pool"],
    )
    latent_dim = cfg["latent_dim"]
    if latent_dim is None:
        latent_dim = encoder.embed_width if cfg["projector"] == "identity" else 8
    projector = ProjectorConfig(
        kind=cfg["projector"],
        nonlinear_blocks=cfg["blocks"],
        latent_dim=latent_dim,
        final_bias=cfg["final_bias"],
    )
    return ModelConfig(encoder=encoder, projector=projector, manifold=cfg["manifold"], ae=cfg["ae"])


def cmd_train(args) -> int:
    cfg = _resolve(
        TRAIN_DEFAULTS,
        args.config,
        {
            "manifold": args.manifold,
            "center": args.center,
            "projector": args.projector,
            "encoder": args.encoder,
            "ae": args.ae,
            "epochs": args.epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "window": args.window,
            "stride": args.stride,
            "latent_dim": args.latent_dim,
            "seed": args.seed,
            "alpha": args.alpha,
            "gamma": args.gamma,
            "phi": args.phi,
            "channels": args.channels,
            "pool": args.pool,
            "blocks": args.blocks,
            "final_bias": args.final_bias,
        },
    )
    trajectories = dp.load_trajectories(args.data)
    if not trajectories:
        raise ConfigError(f"no trajectories found in {args.data}")
    joints = trajectories[0].joints.shape[1]

    windows = dp.windows_from_trajectories(trajectories, cfg["window"], cfg["stride"])
    if not windows:
        raise ConfigError(
            f"no window of length {cfg['window']} fits any trajectory in {args.data}"
        )
    stage1 = dp.stage1_normalize(windows)
    stats = dp.fit_robust_stats(stage1)
    normalized = dp.apply_robust_stats(stage1, stats)
    window_array = np.stack([w.values for w in normalized])

    model_config = _build_model_config(cfg, joints)
    train_config = trainer.TrainConfig(
        model=model_config,
        epochs=cfg["epochs"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        weight_decay=cfg["alpha"],
        center_strategy=cfg["center"],
        gamma=cfg["gamma"],
        phi=cfg["phi"],
        seed=cfg["seed"],
    )
    state = trainer.train(window_array, train_config)
    medians = scoring.median_window_scores(state.model, state.center.point, window_array)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.npz"
    loss_path = out / "loss.csv"
    stats_path = out / "norm_stats.txt"
    save_checkpoint(
        checkpoint_path,
        state.model,
        state.center.point,
        center_strategy=cfg["center"],
        stats_median=stats.median,
        stats_iqr=stats.iqr,
        stride=cfg["stride"],
        seed=cfg["seed"],
        median_scores=medians,
    )
    trainer.write_loss_history(loss_path, state.history)
    dp.save_robust_stats(stats_path, stats)
    _write_manifest(
        out,
        "train",
        cfg,
        [Path(args.data)] + ([Path(args.config)] if args.config else []),
        [checkpoint_path, loss_path, stats_path],
    )
    print(
        f"trained {cfg['manifold']} model on {len(window_array)} windows: "
        f"first-epoch loss {state.history[0].mean_loss:.6f}, "
        f"final-epoch loss {state.history[-1].mean_loss:.6f}"
    )
    return 0


# ---------------------------------------------------------------------------
# score


def _score_clip_group(model, center, trajectories, stats, window_length, stride, kind):
    windows = dp.windows_from_trajectories(trajectories, window_length, stride)
    if not windows:
        return []
    normalized = dp.normalize_windows(windows, stats)
    values = np.stack([w.values for w in normalized])
    scores = scoring.score_windows(model, center, values, kind=kind)
    window_scores = [
        scoring.WindowScore(w.clip_id, w.agent_id, w.start_frame, float(s))
        for w, s in zip(windows, scores)
    ]
    return scoring.build_timelines(window_scores, window_length)


def cmd_score(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model: MotionModel = checkpoint.model
    window_length = model.config.encoder.frames
    stats = dp.RobustStats(median=checkpoint.stats_median, iqr=checkpoint.stats_iqr)
    kind = args.score_kind

    trajectories = dp.load_trajectories(args.data, expected_joints=model.config.encoder.joints)
    by_clip: dict[str, list] = {}
    for traj in trajectories:
        by_clip.setdefault(traj.clip_id, []).append(traj)
    clip_ids = sorted(by_clip)

    def worker(clip_id):
        return _score_clip_group(
            model, checkpoint.center, by_clip[clip_id], stats,
            window_length, checkpoint.stride, kind,
        )

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            groups = list(pool.map(worker, clip_ids))
    else:
        groups = [worker(c) for c in clip_ids]
    timelines = [tl for group in groups for tl in group]

    fill = None
    if args.uncovered == "median":
        if kind not in checkpoint.median_scores:
            raise ConfigError(
                f"checkpoint has no training median for score kind {kind!r}"
            )
        median = checkpoint.median_scores[kind]
        fill = {
            clip_id: (int(max(t.frames.max() for t in group) + 1), median)
            for clip_id, group in by_clip.items()
        }

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores_path = out / "scores.csv"
    scoring.write_scores_csv(scores_path, timelines, fill=fill)
    config = {
        "checkpoint": str(args.checkpoint),
        "score_kind": kind,
        "uncovered": args.uncovered,
        "threads": args.threads,
    }
    _write_manifest(out, "score", config, [Path(args.checkpoint), Path(args.data)], [scores_path])
    covered = sum(tl.frames.size for tl in timelines)
    print(f"scored {len(timelines)} clips, {covered} covered frames -> {scores_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    timelines = scoring.read_scores_csv(args.scores)
    labels = dp.load_labels(args.labels)
    report = scoring.evaluate(timelines, labels)
    print(
        f"overall AUC {report['overall_auc']:.6f} over {report['frames']} frames "
        f"({report['positives']} positive)"
    )
    for clip_id in sorted(report["per_clip_auc"]):
        value = report["per_clip_auc"][clip_id]
        text = f"{value:.6f}" if value is not None else "undefined (single class)"
        print(f"  {clip_id}: AUC {text}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelad", description="Skeletal-motion anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic trajectory dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-clips", type=int, default=None)
    p.add_argument("--test-clips", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--agents", type=int, default=None)
    p.add_argument("--joints", type=int, default=None)
    p.add_argument("--anomaly-fraction", type=float, default=None)
    p.add_argument("--jitter-factor", type=float, default=None)
    p.add_argument("--freeze-fraction", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a one-class model on a trajectory file")
    p.add_argument("--data", required=True, help="training trajectory file (normal only)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifold", choices=list(manifolds.MANIFOLDS), default=None)
    p.add_argument("--center", choices=[trainer.STATIC, trainer.DYNAMIC], default=None)
    p.add_argument("--projector", choices=["identity", "linear", "nonlinear"], default=None)
    p.add_argument("--encoder", choices=["separable", "plain"], default=None)
    p.add_argument("--ae", action="store_const", const=True, default=None,
                   help="add the mirrored decoder and reconstruction loss")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--window", type=int, default=None, help="window length in frames")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="weight decay coefficient")
    p.add_argument("--gamma", type=float, default=None, help="reconstruction loss weight")
    p.add_argument("--phi", type=float, default=None, help="direction loss weight")
    p.add_argument("--channels", default=None, help="comma-separated layer widths, first must be 2")
    p.add_argument("--pool", choices=["mean", "flatten"], default=None)
    p.add_argument("--blocks", type=int, default=None, help="nonlinear projector block count")
    p.add_argument("--final-bias", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score trajectories with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--score-kind", choices=list(scoring.SCORE_KINDS), default=scoring.SCORE_DISTANCE)
    p.add_argument("--uncovered", choices=["exclude", "median"], default="exclude",
                   help="how to treat frames no window covers")
    p.add_argument("--threads", type=int, default=1, help="clip-parallel scoring threads")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute frame-level AUC from scores and labels")
    p.add_argument("--scores", required=True, help="score CSV from the score command")
    p.add_argument("--labels", required=True, help="ground-truth label file")
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"skelad: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"skelad: i/o error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"skelad: numerical failure: {exc}", file=sys.stderr)
        return 3
    except SkeladError as exc:
        print(f"skelad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
