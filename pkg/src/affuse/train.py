"""Run configuration, the training loop, checkpoints, and evaluation."""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as A
from . import tensor as K
from .data import (
    Dataset,
    SyntheticSceneConfig,
    gen_synthetic_classification,
    gen_synthetic_segmentation,
    load_cifar_dataset,
    load_container,
    metric_accuracy,
    metric_miou,
    read_blobs,
    write_blobs,
)
from .fusion import Fusion
from .layers import Module
from .networks import NetworkSpec, build_network
from .optim import OPTIMIZERS, Optimizer, Schedule
from .tensor import ConfigError

__all__ = [
    "RunConfig",
    "Divergence",
    "parse_config",
    "format_config",
    "load_datasets",
    "train_run",
    "RunResult",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "collect_fusion_weights",
]



class Divergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class RunConfig:
    """Everything that determines a run. Defaults are the desk-scale settings."""

    task: str = "classify"
    scenario: str = "short_skip"
    fusion: str = "aff"
    b: int = 1
    r: int = 4
    base_channels: int = 16
    multipliers: str = "1,2,4"
    branch_scales: str = "global,local"
    policy: str = "all"
    zero_init_attention: bool = False
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "nesterov_sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "step"
    milestones: str = ""
    gamma: float = 0.1
    power: float = 0.9
    seed: int = 1
    precision: str = "f64"
    dataset: str = "synthetic"
    data_seed: int = 0
    train_samples: int = 5000
    val_samples: int = 1000
    image_size: int = 16
    noise: float = 0.1
    scale_min: float = 0.04
    scale_max: float = 0.5
    cifar_train: str = ""
    cifar_val: str = ""
    cifar_variant: str = "cifar100_coarse"
    train_file: str = ""
    val_file: str = ""
    augment: bool = True
    eval_batch: int = 250
    out: str = "runs/default"
    mixup: bool = False
    label_smoothing: float = 0.0

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"config field '{key}': {msg}")

        if self.task not in ("classify", "segment"):
            bad("task", f"must be classify or segment, got {self.task!r}")
        if self.task == "segment" and self.scenario != "long_skip":
            bad("scenario", "segment task needs scenario long_skip")
        if self.task == "classify" and self.scenario == "long_skip":
            bad("scenario", "classify task needs short_skip or same_layer")
        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (self.lr >= 0):
            bad("lr", f"must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            bad("weight_decay", f"must be non-negative, got {self.weight_decay}")
        if self.epochs < 0:
            bad("epochs", f"must be non-negative, got {self.epochs}")
        if self.batch_size < 2:
            bad("batch_size", f"train-mode batch norm needs at least 2, got {self.batch_size}")
        if self.precision not in ("f32", "f64"):
            bad("precision", f"must be f32 or f64, got {self.precision!r}")
        if self.dataset not in ("synthetic", "cifar", "file"):
            bad("dataset", f"must be synthetic, cifar or file, got {self.dataset!r}")
        if self.mixup:
            bad("mixup", "mixup is not supported")
        if self.label_smoothing:
            bad("label_smoothing", "label smoothing is not supported")
        try:
            self.network_spec()
            self.schedule_obj()
        except ConfigError as exc:
            raise ConfigError(f"config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config: {exc}") from None

    def num_classes(self) -> int:
        if self.dataset == "cifar":
            return {"cifar10": 10, "cifar100_coarse": 20, "cifar100_fine": 100}.get(self.cifar_variant, 0)
        if self.task == "segment":
            return 7
        return 6

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            scenario=self.scenario,
            b=self.b,
            base_channels=self.base_channels,
            multipliers=tuple(int(m) for m in self.multipliers.split(",") if m.strip()),
            fusion=self.fusion,
            r=self.r,
            num_classes=self.num_classes(),
            policy=self.policy,
            branch_scales=tuple(s.strip() for s in self.branch_scales.split(",")),
            zero_init_attention=self.zero_init_attention,
        )

    def schedule_obj(self) -> Schedule:
        if self.milestones.strip():
            ms = tuple(int(m) for m in self.milestones.split(","))
        else:
            # same relative positions as 300/350 of 400 epochs
            ms = (int(round(0.75 * self.epochs)), int(round(0.875 * self.epochs)))
        return Schedule(self.schedule, ms, self.gamma, self.power, max(self.epochs, 1))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError(f"config field '{key}': unknown key")
    typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"config field '{key}': cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str = "", overrides: Tuple[str, ...] = (), **kw) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments) then apply ``K=V`` overrides."""
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, val)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        values[key] = _coerce(key, val)
    for key, val in kw.items():
        if val is not None:
            values[key] = val if not isinstance(val, str) else _coerce(key, val)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar":
        if not cfg.cifar_train or not cfg.cifar_val:
            raise ConfigError("config field 'cifar_train': cifar dataset needs cifar_train and cifar_val paths")
        return (load_cifar_dataset(cfg.cifar_train, cfg.cifar_variant),
                load_cifar_dataset(cfg.cifar_val, cfg.cifar_variant))
    if cfg.dataset == "file":
        if not cfg.train_file or not cfg.val_file:
            raise ConfigError("config field 'train_file': file dataset needs train_file and val_file")
        k = cfg.num_classes()
        return load_container(cfg.train_file, k), load_container(cfg.val_file, k)
    gen = gen_synthetic_segmentation if cfg.task == "segment" else gen_synthetic_classification

    def make(n, seed):
        return gen(SyntheticSceneConfig(n_samples=n, image_size=cfg.image_size,
                                        scale_range=(cfg.scale_min, cfg.scale_max),
                                        noise=cfg.noise, seed=seed))

    return make(cfg.train_samples, cfg.data_seed), make(cfg.val_samples, cfg.data_seed + 1)


def channel_stats(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    px = ds.pixels()
    return px.mean(axis=(0, 2, 3)), px.std(axis=(0, 2, 3))


def _normalize(ds: Dataset, idx, mean, std, dtype) -> np.ndarray:
    x = ds.images[idx].astype(dtype) / dtype(255.0)
    return (x - mean.astype(dtype)[None, :, None, None]) / std.astype(dtype)[None, :, None, None]


def _augment(rng: np.random.Generator, x: np.ndarray, masks: Optional[np.ndarray]):
    """Random crop from a zero-padded copy plus horizontal flip, per sample."""
    n, _, h, w = x.shape
    pad = max(1, h // 8)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    mp = None if masks is None else np.pad(masks, ((0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    mout = None if masks is None else np.empty_like(masks)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = xp[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
        if masks is not None:
            mc = mp[i, oy:oy + h, ox:ox + w]
            mout[i] = mc[:, ::-1] if flips[i] else mc
    return out, mout


def _targets(ds: Dataset, idx, task: str):
    return ds.masks[idx].astype(np.int64) if task == "segment" else ds.labels[idx]


def evaluate(net: Module, ds: Dataset, cfg: RunConfig, mean, std) -> float:
    """Eval-mode metric: accuracy for classify, mIoU for segment."""
    net.eval()
    dtype = K.get_dtype()
    preds = []
    for start in range(0, len(ds), cfg.eval_batch):
        idx = np.arange(start, min(start + cfg.eval_batch, len(ds)))
        out = net(A.Var(_normalize(ds, idx, mean, std, dtype))).value
        preds.append(out.argmax(axis=1))
    pred = np.concatenate(preds)
    if cfg.task == "segment":
        return metric_miou(pred, ds.masks, net.spec.num_classes)
    return metric_accuracy(pred[:, 0, 0], ds.labels)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: Module, mean, std) -> None:
    blobs = [(name, p.value) for name, p in net.named_parameters()]
    blobs += [(name, buf) for name, buf in net.named_buffers()]
    blobs += [("__norm__.mean", mean), ("__norm__.std", std)]
    write_blobs(path, blobs)


def load_checkpoint(path, net: Module):
    """Load weights into ``net`` in place; returns the stored normalization ``(mean, std)``."""
    blobs = dict(read_blobs(path))
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    for name, target in list(params.items()) + list(buffers.items()):
        if name not in blobs:
            raise ConfigError(f"checkpoint has no entry for {name!r}")
        val = blobs[name]
        arr = target.value if hasattr(target, "value") else target
        if val.size != arr.size:
            raise ConfigError(f"checkpoint entry {name!r} has {val.size} values, network expects {arr.size}")
        arr[...] = val.reshape(arr.shape)
    extra = set(blobs) - set(params) - set(buffers) - {"__norm__.mean", "__norm__.std"}
    if extra:
        raise ConfigError(f"checkpoint has entries the network lacks: {sorted(extra)[:3]}")
    return blobs["__norm__.mean"].reshape(-1), blobs["__norm__.std"].reshape(-1)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    records: List[dict]
    network: Module
    mean: np.ndarray
    std: np.ndarray

    @property
    def final(self) -> dict:
        return self.records[-1]


def train_run(cfg: RunConfig, out_dir: Optional[Path] = None,
              emit: Optional[Callable[[dict], None]] = None,
              datasets: Optional[Tuple[Dataset, Dataset]] = None) -> "RunResult":
    """Train per ``cfg``; records hold one entry per epoch (epoch 0 = before training).

    With ``out_dir`` set, writes ``run.cfg``, ``manifest.json``,
    ``metrics.jsonl`` and ``checkpoint.bin`` there. ``emit`` receives each
    record plus its ``wall_time`` (kept out of ``metrics.jsonl`` so that
    file is reproducible byte for byte).
    """
    K.set_precision(cfg.precision)
    dtype = K.get_dtype()
    rng = np.random.default_rng(cfg.seed)
    train_ds, val_ds = datasets if datasets is not None else load_datasets(cfg)
    spec = cfg.network_spec()
    if train_ds.images.shape[1] != spec.in_channels:
        raise ConfigError(f"dataset has {train_ds.images.shape[1]} channels, network expects {spec.in_channels}")
    net = build_network(spec, rng)
    mean, std = channel_stats(train_ds)
    std = np.where(std > 0, std, 1.0)
    opt = Optimizer(net.parameters(), cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.schedule_obj())

    metric_key = "val_miou" if cfg.task == "segment" else "val_accuracy"
    metrics_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.cfg").write_text(format_config(cfg))
        (out_dir / "manifest.json").write_text(json.dumps({
            "config": dataclasses.asdict(cfg),
            "network": spec.to_dict(),
            "parameters": net.num_parameters(),
            "train_samples": len(train_ds),
            "val_samples": len(val_ds),
            "channel_mean": mean.tolist(),
            "channel_std": std.tolist(),
        }, indent=2))
        metrics_file = open(out_dir / "metrics.jsonl", "w")

    records = []
    t0 = time.perf_counter()

    def record(rec):
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()
        if emit is not None:
            emit(dict(rec, wall_time=round(time.perf_counter() - t0, 3)))

    try:
        record({"epoch": 0, "train_loss": None, metric_key: evaluate(net, val_ds, cfg, mean, std),
                "lr": opt.set_epoch(0)})
        n = len(train_ds)
        for epoch in range(1, cfg.epochs + 1):
            lr = opt.set_epoch(epoch - 1)
            net.train()
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                x = _normalize(train_ds, idx, mean, std, dtype)
                target = _targets(train_ds, idx, cfg.task)
                if cfg.augment:
                    x, m = _augment(rng, x, target if cfg.task == "segment" else None)
                    if m is not None:
                        target = m
                opt.zero_grad()
                with A.Tape() as tape:
                    loss = A.softmax_cross_entropy(net(A.Var(x)), target)
                lv = float(loss.value.reshape(()))
                if not math.isfinite(lv):
                    raise Divergence(epoch, lv)
                tape.backward(loss)
                opt.step()
                losses.append(lv)
            train_loss = float(np.mean(losses)) if losses else float("nan")
            if not math.isfinite(train_loss):
                raise Divergence(epoch, train_loss)
            record({"epoch": epoch, "train_loss": train_loss,
                    metric_key: evaluate(net, val_ds, cfg, mean, std), "lr": lr})
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", net, mean, std)
    return RunResult(records, net, mean, std)


def collect_fusion_weights(net: Module, x: np.ndarray) -> List[Tuple[str, np.ndarray]]:
    """Eval-mode forward on ``x`` returning the attention map of every attentional fusion site."""
    sites = [(path, m) for path, m in net.modules() if isinstance(m, Fusion) and m.kind not in ("add", "concat")]
    for _, m in sites:
        m.capture = True
    try:
        net.eval()
        net(A.Var(K.as_tensor(x)))
        return [(path, m.captured) for path, m in sites]
    finally:
        for _, m in sites:
            m.capture = False
