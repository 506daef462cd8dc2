"""Deterministic training and evaluation harness.

A run is a pure function of (config, datasets): parameter init and batch
shuffling draw from two separate streams split off the config seed, so
re-running with the same inputs reproduces the checkpoint byte for byte,
and changing the epoch count never changes initialization.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import RgbdSample
from .metrics import ImageMetrics, MetricsReport, aggregate, evaluate_masks
from .segnet import Checkpoint, NetworkConfig, SegNet, bce_loss, classify, predict
from .tensor import Tensor, no_grad

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "train",
    "evaluate",
    "select_difficult",
    "load_train_config",
]

OPTIMIZERS = ("adam", "sgd_momentum")
SCHEDULES = ("constant", "poly")
_POLY_POWER = 0.9
_EVAL_BATCH = 16


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the epoch and batch."""


@dataclass
class TrainConfig:
    """Everything a training run depends on besides the data itself."""

    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "constant"
    fusion_mode: str = "wff"
    ablation: str = "none"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


_CONFIG_COERCERS = {
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "optimizer": str,
    "lr_schedule": str,
    "fusion_mode": str,
    "ablation": str,
}


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a flat ``key = value`` config file; keys match TrainConfig fields."""
    values: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_COERCERS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _CONFIG_COERCERS[key](value)
    values.update(overrides or {})
    return TrainConfig(**values)


@dataclass
class TrainLog:
    """Per-epoch record of a run, serializable as JSON lines."""

    entries: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None

    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class _SgdMomentum:
    mu = 0.9

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.mu
            v += p.grad_array()
            p.data -= np.float32(lr) * v


class _Adam:
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad_array()
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= (np.float32(lr) * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def make_optimizer(name: str, params: dict[str, Tensor]):
    return _Adam(params) if name == "adam" else _SgdMomentum(params)


def _schedule_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "poly":
        return config.learning_rate * (1.0 - step / total_steps) ** _POLY_POWER
    return config.learning_rate


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _stack_samples(samples: list[RgbdSample]):
    rgb = np.stack([s.rgb for s in samples]).astype(np.float32)
    depth = np.stack([s.depth for s in samples]).astype(np.float32)
    mask = np.stack([s.mask for s in samples]).astype(np.uint8)
    return rgb, depth, mask


def _check_resolution(samples: list[RgbdSample], config: NetworkConfig, what: str) -> None:
    for s in samples:
        if (s.height, s.width) != (config.input_h, config.input_w):
            raise ValueError(
                f"{what}: sample {s.id!r} is {s.height}x{s.width}, "
                f"network expects {config.input_h}x{config.input_w}"
            )


def network_config_for(config: TrainConfig, samples: list[RgbdSample], **overrides) -> NetworkConfig:
    """Default architecture for a training run, sized from the data."""
    h, w = samples[0].height, samples[0].width
    fields = dict(
        input_h=h,
        input_w=w,
        fusion_mode=config.fusion_mode,
        ablation=config.ablation,
    )
    fields.update(overrides)
    return NetworkConfig(**fields)


def train(
    config: TrainConfig,
    train_set: list[RgbdSample],
    val_set: list[RgbdSample],
    net_config: NetworkConfig | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Run the full loop; returns the final checkpoint and the epoch log."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    if net_config is None:
        net_config = network_config_for(config, train_set)
    if net_config.fusion_mode != config.fusion_mode or net_config.ablation != config.ablation:
        raise ValueError("network config fusion/ablation switches disagree with train config")
    _check_resolution(train_set, net_config, "train set")
    _check_resolution(val_set, net_config, "validation set")

    seed_root = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq = seed_root.spawn(2)
    net = SegNet(net_config, seed=init_seq)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))

    params = net.named_parameters()
    optimizer = make_optimizer(config.optimizer, params)
    rgb_all, depth_all, mask_all = _stack_samples(train_set)
    m = len(train_set)
    steps_per_epoch = (m + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs

    log = TrainLog()
    step = 0
    final_loss = float("nan")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(m)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            rgb = Tensor(rgb_all[idx])
            depth = None if config.fusion_mode == "rgb_only" else Tensor(depth_all[idx])
            logits = net.forward(rgb, depth)
            loss = bce_loss(classify(logits), mask_all[idx])
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"loss became {loss_value} at epoch {epoch}, batch {b} (seed {config.seed})"
                )
            net.zero_grads()
            loss.backward()
            optimizer.step(_schedule_lr(config, step, total_steps))
            step += 1
            epoch_losses.append(loss_value)
        final_loss = float(np.mean(epoch_losses))
        val_report = evaluate(net, val_set)
        log.entries.append(
            {
                "epoch": epoch,
                "train_loss": final_loss,
                "val_iou": val_report.iou_glass,
                "val_miou": val_report.miou,
                "val_biou": val_report.biou,
                "seconds": time.perf_counter() - t0,
            }
        )

    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "final_loss": final_loss,
        "train_config": config.to_dict(),
    }
    return Checkpoint.from_network(net, meta), log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _worker_count() -> int:
    raw = os.environ.get("GLASSFUSE_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def evaluate(model: Checkpoint | SegNet, dataset: list[RgbdSample]) -> MetricsReport:
    """Predict every sample and aggregate the metric counts dataset-wide.

    Parameters are read-only here; batches may be processed by a small
    thread pool (GLASSFUSE_THREADS > 0) with order-independent
    aggregation, so results never depend on the worker count.
    """
    if not dataset:
        raise ValueError("evaluate needs a nonempty dataset")
    net = model.build() if isinstance(model, Checkpoint) else model
    _check_resolution(dataset, net.config, "evaluation set")
    batches = [dataset[i : i + _EVAL_BATCH] for i in range(0, len(dataset), _EVAL_BATCH)]

    def run_batch(samples: list[RgbdSample]) -> list[ImageMetrics]:
        rgb, depth, mask = _stack_samples(samples)
        with no_grad():
            logits = net.forward(
                Tensor(rgb), None if net.config.fusion_mode == "rgb_only" else Tensor(depth)
            )
            pred = predict(classify(logits))
        return [
            evaluate_masks(pred[i], mask[i], image_id=s.id) for i, s in enumerate(samples)
        ]

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_batch, batches))
    else:
        chunks = [run_batch(b) for b in batches]
    return aggregate([rec for chunk in chunks for rec in chunk])


def _id_miou(rec) -> tuple[str, float]:
    if isinstance(rec, dict):
        return str(rec["id"]), float(rec["miou"])
    return rec.id, rec.miou


def select_difficult(reports, k: int) -> list[str]:
    """Ids of the k images with the lowest mean per-image mIoU.

    ``reports`` is one list of per-image records (ImageMetrics or dicts
    with "id"/"miou" keys) or several such lists; scores are averaged by
    id across reports.  Ties break by id.
    """
    report_lists = reports
    if reports and (isinstance(reports[0], ImageMetrics) or isinstance(reports[0], dict)):
        report_lists = [reports]
    scores: dict[str, list[float]] = {}
    for records in report_lists:
        for rec in records:
            sid, score = _id_miou(rec)
            scores.setdefault(sid, []).append(score)
    if k > len(scores):
        raise ValueError(f"k={k} exceeds the {len(scores)} distinct images in the reports")
    ranked = sorted(scores.items(), key=lambda kv: (float(np.mean(kv[1])), kv[0]))
    return [sid for sid, _ in ranked[:k]]
