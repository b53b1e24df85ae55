"""Deterministic training loop, checkpoints and the experiment matrix."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import FusionNet, ModelConfig
from .nncore import CyclicLrSchedule, NonFiniteGradient, OptimizerState, adam_step, cyclic_lr, load_arrays, save_arrays
from .synthdata import Dataset, perturb_rotations, read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    test_fold: int = 0
    mask_prob: float = 0.5
    mask_coverage: tuple[float, float] = (0.5, 0.6)
    mask_span: tuple[float, float] = (0.05, 0.3)
    noise_sigma: float = 0.01
    base_lr: float = 1e-6
    max_lr: float = 1e-3
    lr_decay: float = 0.5
    weight_decay: float = 1e-6
    rotation_noise: float = 0.0  # rad; > 0 trains on perturbed rotations (head-pose style)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")
        for lo, hi in (self.mask_coverage, self.mask_span):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("coverage/span ranges must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        for key in ("mask_coverage", "mask_span"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def config_digest(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_hash: str) -> str:
    payload = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "dataset": dataset_hash}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def mask_augment(
    obs: np.ndarray,
    rng: np.random.Generator,
    prob: float = 0.5,
    coverage: tuple[float, float] = (0.5, 0.6),
    span: tuple[float, float] = (0.05, 0.3),
) -> np.ndarray:
    """Random erasing on a feature vector.

    With probability ``prob``, contiguous spans (each ``span`` of the width)
    are zeroed until the union covers a fraction within ``coverage``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if rng.random() >= prob:
        return obs.copy()
    n = obs.shape[-1]
    lo = math.ceil(coverage[0] * n - 1e-9)
    hi = max(lo, math.floor(coverage[1] * n + 1e-9))
    min_len = max(1, round(span[0] * n))
    max_len = max(min_len, round(span[1] * n))
    covered: set[int] = set()
    while len(covered) < lo:
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, n - length + 1))
        new = [i for i in range(start, start + length) if i not in covered]
        # trim the new span so the union lands inside the coverage window
        excess = len(covered) + len(new) - hi
        covered.update(new[: len(new) - excess] if excess > 0 else new)
    mask = np.zeros(n, bool)
    mask[list(covered)] = True
    out = obs.copy()
    out[mask] = 0.0
    return out


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    block_loss: list[list[float]] = field(default_factory=list)
    checkpoint: str = ""
    wall_clock: float = 0.0
    config_hash: str = ""


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path, net: FusionNet, opt: OptimizerState, meta: dict) -> None:
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    meta = dict(meta)
    meta.update(
        version=CHECKPOINT_VERSION,
        model=net.config.to_dict(),
        optimizer={k: getattr(opt, k) for k in ("weight_decay", "beta1", "beta2", "eps", "step")},
    )
    save_arrays(path, meta, arrays)


def load_checkpoint(path) -> tuple[FusionNet, OptimizerState, dict]:
    meta, arrays = load_arrays(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    net = FusionNet(ModelConfig(**meta["model"]), params=params)
    opt = OptimizerState(**meta["optimizer"])
    opt.m = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return net, opt, meta


def train_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset | str | Path,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    fault_hook=None,
) -> tuple[FusionNet, TrainReport]:
    """Train on the ``train`` selection of ``dataset``.

    One cyclic-LR cycle spans one epoch. A checkpoint is written after every
    epoch when ``out_dir`` is given; ``resume`` continues from one of them.
    ``fault_hook(grads)`` lets tests inject gradient faults.
    """
    t0 = time.perf_counter()
    ds = dataset if isinstance(dataset, Dataset) else read_dataset(dataset)
    if ds.obs_dim != model_cfg.obs_dim:
        raise ValueError(f"model obs_dim {model_cfg.obs_dim} != dataset obs_dim {ds.obs_dim}")
    data = ds.arrays(ds.select("train", train_cfg.test_fold))
    n = len(data["obs_tgt"])
    if n == 0:
        raise ValueError("dataset has no training pairs")
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    schedule = CyclicLrSchedule(train_cfg.base_lr, train_cfg.max_lr, steps_per_epoch, train_cfg.lr_decay)
    digest = config_digest(model_cfg, train_cfg, ds.header["config_hash"])
    report = TrainReport(config_hash=digest)

    rng = np.random.default_rng([train_cfg.seed, 17])
    if resume is not None:
        net, opt, meta = load_checkpoint(resume)
        if meta["config_hash"] != digest:
            raise ValueError("checkpoint was produced by a different configuration")
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta["epoch"]
        report.epoch_loss = list(meta["epoch_loss"])
        report.block_loss = [list(b) for b in meta["block_loss"]]
    else:
        net = FusionNet(model_cfg, seed=train_cfg.seed)
        opt = OptimizerState(weight_decay=train_cfg.weight_decay)
        start_epoch = 0

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tc = train_cfg
    for epoch in range(start_epoch, tc.epochs):
        order = rng.permutation(n)
        loss_sum, block_sum, seen = 0.0, np.zeros(len(model_cfg_blocks(model_cfg))), 0
        for b in range(steps_per_epoch):
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            xt = np.stack([mask_augment(x, rng, tc.mask_prob, tc.mask_coverage, tc.mask_span) for x in data["obs_tgt"][idx]])
            xr = np.stack([mask_augment(x, rng, tc.mask_prob, tc.mask_coverage, tc.mask_span) for x in data["obs_ref"][idx]])
            if tc.noise_sigma:
                xt = xt + rng.standard_normal(xt.shape) * tc.noise_sigma
                xr = xr + rng.standard_normal(xr.shape) * tc.noise_sigma
            R = data["R"][idx]
            if tc.rotation_noise:
                R = perturb_rotations(R, tc.rotation_noise, rng)
            res, grads = net.loss_and_grads(xt, xr, R, data["g_tgt"][idx], data["g_ref"][idx])
            if fault_hook is not None:
                fault_hook(grads)
            if not math.isfinite(res.total):
                raise NonFiniteLoss(f"epoch {epoch} step {b}: loss is {res.total}")
            try:
                adam_step(opt, net.params, grads, cyclic_lr(schedule, opt.step))
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(f"epoch {epoch} step {b}: {exc}") from exc
            loss_sum += res.total * len(idx)
            block_sum += np.array(res.per_block) * len(idx)
            seen += len(idx)
        report.epoch_loss.append(loss_sum / seen)
        report.block_loss.append((block_sum / seen).tolist())
        log.info("epoch %d loss %.5f", epoch, report.epoch_loss[-1])
        if out is not None:
            path = out / f"epoch{epoch + 1:03d}.ckpt"
            save_checkpoint(
                path,
                net,
                opt,
                {
                    "config_hash": digest,
                    "train": asdict(tc),
                    "dataset_hash": ds.header["config_hash"],
                    "epoch": epoch + 1,
                    "rng_state": _rng_state(rng),
                    "epoch_loss": report.epoch_loss,
                    "block_loss": report.block_loss,
                },
            )
            report.checkpoint = str(path)
    report.wall_clock = time.perf_counter() - t0
    return net, report


def model_cfg_blocks(cfg: ModelConfig) -> list[int]:
    return [1] if cfg.variant == "concat" else list(range(1, cfg.blocks + 1))


# -- experiment matrix ---------------------------------------------------------


def parse_variant(spec: str, base: ModelConfig) -> ModelConfig:
    """``"proposed"``, ``"concat"``, ... or ``"proposed:l=2"`` for block-count ablations."""
    name, _, opts = spec.partition(":")
    changes = {"variant": name}
    for item in filter(None, opts.split(",")):
        key, _, value = item.partition("=")
        if key == "l":
            changes["blocks"] = int(value)
        else:
            raise ValueError(f"unknown variant option {key!r}")
    return replace(base, **changes)


def run_experiment_matrix(
    variants: list[str],
    seeds: list[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Train and evaluate every ``(variant, seed)``; rows hold seen/unseen mean error in degrees."""
    from .evalcli import evaluate

    rows = []
    for spec in variants:
        mcfg = parse_variant(spec, model_cfg)
        for seed in seeds:
            tcfg = replace(train_cfg, seed=seed)
            sub = Path(out_dir) / f"{spec.replace(':', '_')}_s{seed}" if out_dir else None
            net, rep = train_model(mcfg, tcfg, dataset, sub)
            seen = evaluate(net, dataset, "seen", tcfg.test_fold).mean
            unseen = evaluate(net, dataset, "unseen", tcfg.test_fold).mean
            rows.append({"variant": spec, "seed": seed, "seen": seen, "unseen": unseen, "train_s": rep.wall_clock})
            log.info("%s seed %d: seen %.3f unseen %.3f", spec, seed, seen, unseen)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    out = []
    for spec in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == spec]
        out.append(
            {
                "variant": spec,
                "seed": "mean",
                "seen": float(np.mean([r["seen"] for r in sel])),
                "unseen": float(np.mean([r["unseen"] for r in sel])),
            }
        )
    return out


def write_table(rows: list[dict], path, columns=("variant", "seed", "seen", "unseen"), delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])
