"""Training loop, evaluation metrics, latency measurement, ablations."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .dataio import CalibrationDataset, subsample_points
from .geometry import quat_to_euler, rotmat_to_quat
from .losses import LossWeights, total_loss_terms
from .network import CalibrationNet, NetworkConfig, PosePrediction, full_scale

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# seed-derivation tags keeping the independent random streams apart
_TAG_SHUFFLE = 11
_TAG_POINTS = 13


@dataclass
class TrainConfig:
    """Run parameters; defaults are the full-scale recipe."""

    train_manifest: str = ""
    val_manifest: str | None = None
    checkpoint_dir: str = "runs/run"
    lr: float = 5e-4
    epochs: int = 500
    batch_size: int = 256
    max_steps: int | None = None
    seed: int = 0
    resample_deviations: bool = True
    loss_points: int = 1024
    grad_clip: float = 10.0
    snapshot_every: int = 0  # numbered snapshots every N epochs (0 = latest only)
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=full_scale)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "network" in data and isinstance(data["network"], dict):
            data["network"] = NetworkConfig.from_dict(data["network"])
        if "weights" in data and isinstance(data["weights"], dict):
            data["weights"] = LossWeights(**data["weights"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class CalibMetrics:
    """Mean absolute calibration errors (translation cm, rotation deg)."""

    trans_mean_cm: float
    trans_x_cm: float
    trans_y_cm: float
    trans_z_cm: float
    rot_mean_deg: float
    rot_roll_deg: float
    rot_pitch_deg: float
    rot_yaw_deg: float
    latency_ms: float
    n_samples: int

    def to_record(self) -> dict:
        return asdict(self)

    def to_table(self, label: str = "run") -> str:
        header = (
            f"{'':*<0}{'Run':<14}{'Trans(cm)':>10}{'X':>9}{'Y':>9}{'Z':>9}"
            f"{'Rot(deg)':>10}{'Roll':>9}{'Pitch':>9}{'Yaw':>9}{'Lat(ms)':>10}"
        )
        row = (
            f"{label:<14}{self.trans_mean_cm:>10.4f}{self.trans_x_cm:>9.4f}"
            f"{self.trans_y_cm:>9.4f}{self.trans_z_cm:>9.4f}"
            f"{self.rot_mean_deg:>10.4f}{self.rot_roll_deg:>9.4f}"
            f"{self.rot_pitch_deg:>9.4f}{self.rot_yaw_deg:>9.4f}"
            f"{self.latency_ms:>10.2f}"
        )
        return header + "\n" + row


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_history: list[float]
    steps: int


def device_tag() -> str:
    if torch.cuda.is_available():  # pragma: no cover - CPU test environment
        return f"cuda ({torch.cuda.get_device_name(0)})"
    return f"cpu ({platform.machine()}, {torch.get_num_threads()} threads)"


# ------------------------------------------------------------- checkpoints


def save_checkpoint(
    path: str | Path,
    model: CalibrationNet,
    optimizer: torch.optim.Optimizer | None,
    train_cfg: TrainConfig,
    epoch: int,
    step: int,
    loss_history: list[float] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "model",
            "network_config": model.cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer else None,
            "epoch": epoch,
            "step": step,
            "loss_history": list(loss_history or []),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> CalibrationNet:
    model = CalibrationNet(NetworkConfig.from_dict(ckpt["network_config"]))
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model


def make_oracle_checkpoint(path: str | Path) -> Path:
    """Debug checkpoint whose predictor returns the ground-truth deviation.

    Useful for verifying the metric pipeline end to end: evaluating it must
    produce an all-zero error table.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_VERSION, "kind": "oracle"}, path)
    return path


# ----------------------------------------------------------------- batches


def _collate(samples, loss_points: int, point_seeds: list[int]):
    cam = torch.from_numpy(np.stack([s.camera.data for s in samples]))
    lidar = torch.from_numpy(np.stack([s.lidar.channels() for s in samples]))
    t_gt = torch.from_numpy(
        np.stack([s.t_gt.translation for s in samples]).astype(np.float32)
    )
    q_gt = torch.from_numpy(
        np.stack(
            [rotmat_to_quat(s.t_gt.rotation).as_array() for s in samples]
        ).astype(np.float32)
    )
    pts = torch.from_numpy(
        np.stack(
            [
                subsample_points(s.cloud, loss_points, seed)
                for s, seed in zip(samples, point_seeds)
            ]
        ).astype(np.float32)
    )
    return cam, lidar, t_gt, q_gt, pts


def _derive(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------ train


def train(cfg: TrainConfig) -> TrainResult:
    """Run the optimization loop; returns the latest checkpoint path.

    Deviations are redrawn every epoch (set resample_deviations=False to
    freeze them), a checkpoint is flushed every epoch, and identical seeds
    reproduce the loss trajectory on the same platform.
    """
    if not cfg.train_manifest:
        raise ValueError("train_manifest is required")
    dataset = CalibrationDataset.from_file(cfg.train_manifest)
    if len(dataset) == 0:
        raise ValueError(f"empty dataset: {cfg.train_manifest}")

    torch.manual_seed(cfg.seed)
    model = CalibrationNet(cfg.network)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    out_dir = Path(cfg.checkpoint_dir)
    latest = out_dir / "latest.pt"
    history: list[float] = []
    step = 0
    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(_derive(cfg.seed, _TAG_SHUFFLE, epoch)).permutation(
                len(dataset)
            )
            sample_epoch = epoch if cfg.resample_deviations else 0
            for start in range(0, len(order), cfg.batch_size):
                idxs = order[start : start + cfg.batch_size]
                samples = [dataset.sample(int(i), sample_epoch) for i in idxs]
                point_seeds = [_derive(cfg.seed, _TAG_POINTS, sample_epoch, int(i)) for i in idxs]
                cam, lidar, t_gt, q_gt, pts = _collate(samples, cfg.loss_points, point_seeds)

                optimizer.zero_grad()
                t_pred, q_pred = model(cam, lidar)
                loss = total_loss_terms(q_gt, t_gt, q_pred, t_pred, pts, cfg.weights)
                if not torch.isfinite(loss.total):
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch}): "
                        f"t={loss.translation.item():.4g} r={loss.rotation.item():.4g} "
                        f"p={loss.pointcloud.item():.4g}"
                    )
                loss.total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                history.append(float(loss.total.item()))
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    raise _Done
            save_checkpoint(latest, model, optimizer, cfg, epoch, step, history)
            if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
                save_checkpoint(
                    out_dir / f"epoch_{epoch:05d}.pt", model, optimizer, cfg, epoch, step, history
                )
    except _Done:
        pass
    except KeyboardInterrupt:
        logger.warning("interrupted at step %d; flushing checkpoint", step)
        save_checkpoint(latest, model, optimizer, cfg, epoch, step, history)
        raise
    save_checkpoint(latest, model, optimizer, cfg, epoch, step, history)
    return TrainResult(checkpoint_path=latest, loss_history=history, steps=step)


class _Done(Exception):
    pass


# ------------------------------------------------------------------- eval


def _oracle_prediction(sample) -> PosePrediction:
    return PosePrediction(
        translation=sample.t_gt.translation.copy(),
        rotation=rotmat_to_quat(sample.t_gt.rotation),
    )


def pose_errors(pred: PosePrediction, sample) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis absolute errors: translation in cm, rotation in degrees.

    Rotation error comes from the error quaternion q_gt * q_pred^-1
    converted to Euler angles, not from subtracting per-pose Euler angles.
    """
    t_err = np.abs(pred.translation - sample.t_gt.translation) * 100.0
    q_gt = rotmat_to_quat(sample.t_gt.rotation)
    q_err = q_gt.multiply(pred.rotation.canonicalize().conjugate())
    roll, pitch, yaw = quat_to_euler(q_err)
    return t_err, np.abs([roll, pitch, yaw])


def aggregate_metrics(t_errs, r_errs, times) -> CalibMetrics:
    t_errs = np.asarray(t_errs)
    r_errs = np.asarray(r_errs)
    tx, ty, tz = t_errs.mean(axis=0)
    rr, rp, ry = r_errs.mean(axis=0)
    return CalibMetrics(
        trans_mean_cm=(tx + ty + tz) / 3.0,
        trans_x_cm=tx,
        trans_y_cm=ty,
        trans_z_cm=tz,
        rot_mean_deg=(rr + rp + ry) / 3.0,
        rot_roll_deg=rr,
        rot_pitch_deg=rp,
        rot_yaw_deg=ry,
        latency_ms=float(np.mean(times)),
        n_samples=len(t_errs),
    )


def evaluate(checkpoint_path: str | Path, manifest_path: str | Path) -> CalibMetrics:
    """Per-sample pose errors against the frozen epoch-0 deviations."""
    ckpt = load_checkpoint(checkpoint_path)
    dataset = CalibrationDataset.from_file(manifest_path)
    if len(dataset) == 0:
        raise ValueError(f"empty dataset: {manifest_path}")
    model = None if ckpt.get("kind") == "oracle" else model_from_checkpoint(ckpt)

    t_errs, r_errs, times = [], [], []
    for idx in range(len(dataset)):
        sample = dataset.sample(idx, epoch=0)
        start = time.perf_counter()
        pred = _oracle_prediction(sample) if model is None else model.predict(sample)
        times.append((time.perf_counter() - start) * 1000.0)
        te, re = pose_errors(pred, sample)
        t_errs.append(te)
        r_errs.append(re)
    return aggregate_metrics(t_errs, r_errs, times)


def validation_loss(
    model: CalibrationNet, dataset: CalibrationDataset, weights: LossWeights, loss_points: int, seed: int
) -> float:
    """Mean total objective over the frozen epoch-0 validation deviations."""
    model.eval()
    totals = []
    with torch.no_grad():
        for idx in range(len(dataset)):
            sample = dataset.sample(idx, epoch=0)
            point_seeds = [_derive(seed, _TAG_POINTS, 0, idx)]
            cam, lidar, t_gt, q_gt, pts = _collate([sample], loss_points, point_seeds)
            t_pred, q_pred = model(cam, lidar)
            totals.append(total_loss_terms(q_gt, t_gt, q_pred, t_pred, pts, weights).total.item())
    return float(np.mean(totals))


# ---------------------------------------------------------------- latency


@dataclass
class LatencyStats:
    mean_ms: float
    p95_ms: float
    n_runs: int
    device: str


def measure_latency(checkpoint_path: str | Path, n_warmup: int = 3, n_runs: int = 20) -> LatencyStats:
    """Wall-clock per forward pass on synthetic input at the model resolution."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.get("kind") == "oracle":
        raise ValueError("latency is undefined for the oracle debug checkpoint")
    model = model_from_checkpoint(ckpt)
    w, h = model.cfg.input_wh
    g = torch.Generator().manual_seed(0)
    cam = torch.rand(1, 3, h, w, generator=g)
    lidar = torch.rand(1, 2, h, w, generator=g)
    with torch.no_grad():
        for _ in range(n_warmup):
            model(cam, lidar)
        times = []
        for _ in range(n_runs):
            start = time.perf_counter()
            model(cam, lidar)
            times.append((time.perf_counter() - start) * 1000.0)
    return LatencyStats(
        mean_ms=float(np.mean(times)),
        p95_ms=float(np.percentile(times, 95)),
        n_runs=n_runs,
        device=device_tag(),
    )


# -------------------------------------------------------------- ablations


def _set_upsample(cfg: NetworkConfig, rate: int) -> NetworkConfig:
    d = cfg.to_dict()
    d["upsample_rate"] = rate
    # keep the attention window a divisor of the (possibly coarser) grid
    w, h = cfg.input_wh
    stride = 32 // rate
    d["attn_window"] = math.gcd(math.gcd(w // stride, h // stride), d["attn_window"])
    return NetworkConfig.from_dict(d)


def _flag(cfg: NetworkConfig, **updates) -> NetworkConfig:
    d = cfg.to_dict()
    d.update(updates)
    return NetworkConfig.from_dict(d)


ABLATION_VARIANTS = {
    "full": lambda cfg: cfg,
    "no_multihead": lambda cfg: _flag(cfg, use_multihead=False),
    "no_encoder": lambda cfg: _flag(cfg, use_encoder=False),
    "no_transformer": lambda cfg: _flag(cfg, use_transformer=False, use_encoder=False),
    "upsample_1": lambda cfg: _set_upsample(cfg, 1),
    "upsample_2": lambda cfg: _set_upsample(cfg, 2),
    "upsample_4": lambda cfg: _set_upsample(cfg, 4),
    "upsample_8": lambda cfg: _set_upsample(cfg, 8),
}


@dataclass
class AblationReport:
    variant: str
    metrics: CalibMetrics
    latency: LatencyStats
    val_loss: float
    checkpoint_path: Path


def ablation_config(variant: str, base: TrainConfig) -> TrainConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown variant {variant!r}; choose from {sorted(ABLATION_VARIANTS)}"
        )
    cfg = TrainConfig.from_dict(base.to_dict())
    cfg.network = ABLATION_VARIANTS[variant](cfg.network)
    cfg.checkpoint_dir = str(Path(base.checkpoint_dir) / variant)
    return cfg


def run_ablation(variant: str, base: TrainConfig) -> AblationReport:
    """Train and evaluate one architecture variant under the base seed."""
    cfg = ablation_config(variant, base)
    result = train(cfg)
    eval_manifest = cfg.val_manifest or cfg.train_manifest
    metrics = evaluate(result.checkpoint_path, eval_manifest)
    latency = measure_latency(result.checkpoint_path, n_warmup=2, n_runs=5)
    model = model_from_checkpoint(load_checkpoint(result.checkpoint_path))
    val_ds = CalibrationDataset.from_file(eval_manifest)
    val = validation_loss(model, val_ds, cfg.weights, cfg.loss_points, cfg.seed)
    return AblationReport(
        variant=variant,
        metrics=metrics,
        latency=latency,
        val_loss=val,
        checkpoint_path=result.checkpoint_path,
    )


# ------------------------------------------------------------- run records


def append_metrics_record(log_path: str | Path, record: dict) -> None:
    """Append one JSON line per run to the results log."""
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_record(command: str, cfg: TrainConfig, metrics: CalibMetrics | None = None, **extra) -> dict:
    record = {
        "run_id": f"{command}-{int(time.time() * 1000):x}",
        "command": command,
        "config_hash": cfg.config_hash(),
        "device": device_tag(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if metrics is not None:
        record.update(metrics.to_record())
    record.update(extra)
    return record
