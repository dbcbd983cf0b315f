"""Training loop, optimizer, evaluation passes, and ablation pairing.

Determinism contract: everything consumed during training is a pure
function of the config. Parameter init draws from one seeded generator in
construction order; sample i of the stream is generated from its own seed;
the flip decision for (step, slot) comes from a dedicated SeedSequence.
Resuming from a checkpoint therefore replays the identical run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import SceneDataset, hflip_sample
from .errors import ConfigError, DataError, MetricError
from .losses import (LossConfig, area_downsample, attention_weight_loss,
                     ce_loss, decompose_gt, dice_loss, focal_ce_loss, focal_loss)
from .metrics import ConfusionMatrix, miou, pearson
from .model import SegmentationModel, multi_scale_inference
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    n_categories: int = 8
    channels: int = 32
    depth: int = 2
    heads: int = 4
    img_h: int = 64
    img_w: int = 64
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 7
    train_size: int = 512
    val_size: int = 128
    eval_every: int = 500
    flip_prob: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    # ablation switches
    disable_cross_scale: bool = False
    disable_attn_loss: bool = False
    single_scale_only: int | None = None
    prediction_average: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.single_scale_only is not None:
            if self.single_scale_only not in (8, 16, 32):
                raise ConfigError(
                    f"single_scale_only must be one of 8/16/32, got {self.single_scale_only}"
                )
            # a single scale has no cross-scale attention to run
            self.disable_cross_scale = True
        if self.disable_attn_loss:
            self.loss = replace(self.loss, lambda_attn=0.0)

    @property
    def scales(self) -> tuple[int, ...]:
        if self.single_scale_only is not None:
            return (self.single_scale_only,)
        return (8, 16, 32)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {})
        known_loss = {f for f in LossConfig.__dataclass_fields__}
        known = {f for f in TrainConfig.__dataclass_fields__}
        bad = (set(loss) - known_loss) | (set(d) - known)
        if bad:
            raise ConfigError(f"unknown config fields: {sorted(bad)}")
        return TrainConfig(loss=LossConfig(**loss), **d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_model(config: TrainConfig) -> SegmentationModel:
    return SegmentationModel(
        n_categories=config.n_categories,
        channels=config.channels,
        depth=config.depth,
        heads=config.heads,
        seed=config.seed,
        scales=config.scales,
        cross_scale=not config.disable_cross_scale,
    )


class AdamW:
    """Decoupled weight decay Adam; beta=(0.9, 0.999), eps=1e-8.

    update: m_hat = m/(1-b1^t), v_hat = v/(1-b2^t),
            theta -= lr_t * m_hat / (sqrt(v_hat) + eps) + lr_t * wd * theta
    Parameters with no gradient this step are left untouched.
    """

    def __init__(self, store, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self, lr_t: float):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {name!r} at t={self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr_t * update + lr_t * self.weight_decay * p.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        for k in self.m:
            self.m[k] = arrays[f"adam_m/{k}"].copy()
            self.v[k] = arrays[f"adam_v/{k}"].copy()
        self.t = t


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear decay from lr at step 0 down to lr/iterations at the last step."""
    return config.lr * (1.0 - step / config.iterations)


def _flip_decision(seed: int, step: int, slot: int, prob: float) -> bool:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED, step, slot)))
    return bool(rng.random() < prob)


def batch_samples(config: TrainConfig, dataset: SceneDataset, step: int):
    """The step'th training batch: deterministic draw plus flip augment."""
    out = []
    for slot in range(config.batch_size):
        idx = (step * config.batch_size + slot) % len(dataset)
        sample = dataset[idx]
        if _flip_decision(config.seed, step, slot, config.flip_prob):
            sample = hflip_sample(sample)
        out.append(sample)
    return out


LOSS_COLUMNS = ("step", "L_ce", "L_focal_ce", "L_focal", "L_dice", "L_attn", "total")


def _image_loss_terms(model: SegmentationModel, sample, config: TrainConfig,
                      step: int) -> dict[str, Tensor]:
    """Weighted loss components for one image, each scaled by 1/batch so
    that accumulated gradients equal the batch-mean gradient."""
    gt = decompose_gt(sample.label_map, config.n_categories)
    out = model.forward(Tensor(sample.image))
    inv_b = 1.0 / config.batch_size
    cfg = config.loss
    terms = {k: Tensor(0.0) for k in ("L_ce", "L_focal_ce", "L_focal", "L_dice", "L_attn")}
    for bundle in out.bundles:
        terms["L_ce"] = terms["L_ce"] + ce_loss(
            bundle.avg_prob_logits, gt, cfg.null_weight) * (cfg.lambda_ce * inv_b)
        terms["L_focal_ce"] = terms["L_focal_ce"] + focal_ce_loss(
            bundle.prob_logits_per_scale, gt, cfg.alpha, cfg.gamma) * (cfg.lambda_focal_ce * inv_b)
        if gt.present_indices().size:
            terms["L_focal"] = terms["L_focal"] + focal_loss(
                bundle.avg_mask_logits, gt, cfg.alpha, cfg.gamma) * (cfg.lambda_focal * inv_b)
            terms["L_dice"] = terms["L_dice"] + dice_loss(
                bundle.m, gt) * (cfg.lambda_dice * inv_b)
    if step < cfg.attn_detach_fraction * config.iterations and cfg.lambda_attn > 0:
        terms["L_attn"] = attention_weight_loss(
            out.decoder.attn_weights, gt, cfg) * inv_b
    return terms


def train_step(model: SegmentationModel, optimizer: AdamW, config: TrainConfig,
               dataset: SceneDataset, step: int) -> dict[str, float]:
    """One optimization step; returns the logged loss components."""
    model.store.zero_grad()
    logged = {k: 0.0 for k in ("L_ce", "L_focal_ce", "L_focal", "L_dice", "L_attn")}
    for sample in batch_samples(config, dataset, step):
        with T.fresh_tape():
            terms = _image_loss_terms(model, sample, config, step)
            total = None
            for v in terms.values():
                total = v if total is None else total + v
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            T.backward(total)
        for k, v in terms.items():
            logged[k] += v.item()
    optimizer.step(lr_at(config, step))
    logged["total"] = sum(logged.values())
    logged["step"] = step
    return logged


def evaluate_miou(model: SegmentationModel, dataset: SceneDataset,
                  config: TrainConfig, tta: bool = False) -> tuple[float, np.ndarray]:
    cm = ConfusionMatrix(config.n_categories)
    for i in range(len(dataset)):
        sample = dataset[i]
        if tta:
            pred = multi_scale_inference(
                model, sample.image, prediction_average=config.prediction_average)
        else:
            pred = model.predict(sample.image,
                                 prediction_average=config.prediction_average)
        cm.accumulate(pred, sample.label_map)
    return miou(cm)


def evaluate_pearson(model: SegmentationModel, dataset: SceneDataset,
                     config: TrainConfig) -> float:
    """Mean Pearson r between every (layer, scale) attention map of a
    present category and the fractional downsampled GT mask."""
    rs = []
    for i in range(len(dataset)):
        sample = dataset[i]
        gt = decompose_gt(sample.label_map, config.n_categories)
        with T.no_grad():
            out = model.forward(Tensor(sample.image))
        for layer_maps in out.decoder.attn_weights:
            for s, w in layer_maps.items():
                for k in gt.present_indices():
                    target = area_downsample(gt.masks[k], s)
                    try:
                        rs.append(pearson(w.data[k], target))
                    except MetricError:
                        continue
        T.tape().clear()
    if not rs:
        raise MetricError("no valid attention/mask pairs")
    return float(np.mean(rs))


def _checkpoint_arrays(model: SegmentationModel, optimizer: AdamW) -> dict[str, np.ndarray]:
    arrays = dict(model.store.state_arrays())
    arrays.update(optimizer.state_arrays())
    return arrays


def save_checkpoint(path, model: SegmentationModel, optimizer: AdamW,
                    config: TrainConfig, next_step: int):
    meta = {"next_step": next_step, "adam_t": optimizer.t, "config_hash": config.hash()}
    ckpt.save(path, _checkpoint_arrays(model, optimizer), meta)


def load_checkpoint(path, model: SegmentationModel, optimizer: AdamW,
                    config: TrainConfig) -> int:
    """Restore params and moments; returns the step to resume from."""
    arrays, meta = ckpt.load(path)
    if meta.get("config_hash") != config.hash():
        raise DataError(
            f"checkpoint config hash {meta.get('config_hash')} != current {config.hash()}"
        )
    params = {k: v for k, v in arrays.items() if not k.startswith("adam_")}
    model.store.load_state_arrays(params)
    optimizer.load_state_arrays(arrays, int(meta["adam_t"]))
    return int(meta["next_step"])


@dataclass
class TrainResult:
    final_miou: float
    per_class: np.ndarray
    checkpoint_path: str
    history: list[dict]
    eval_history: list[dict]


def train(config: TrainConfig, out_dir, resume_from=None,
          log_every: int = 25, quiet: bool = False) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    optimizer = AdamW(model.store, config.weight_decay)
    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint(resume_from, model, optimizer, config)
    train_set = SceneDataset("train", config.train_size, config.seed,
                             config.img_h, config.img_w, config.n_categories)
    val_set = SceneDataset("val", config.val_size, config.seed,
                           config.img_h, config.img_w, config.n_categories)
    ckpt_path = out_dir / "model.ckpt"
    csv_path = out_dir / "loss_log.csv"
    history: list[dict] = []
    eval_history: list[dict] = []
    mode = "a" if start_step > 0 and csv_path.exists() else "w"
    t0 = time.time()
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_COLUMNS)
        for step in range(start_step, config.iterations):
            try:
                logged = train_step(model, optimizer, config, train_set, step)
            except TrainingDiverged:
                save_checkpoint(out_dir / "last_good.ckpt", model, optimizer,
                                config, step)
                raise
            history.append(logged)
            writer.writerow([logged[c] for c in LOSS_COLUMNS])
            if not quiet and (step % log_every == 0 or step == config.iterations - 1):
                print(f"step {step:5d} total {logged['total']:.4f} "
                      f"attn {logged['L_attn']:.4f} lr {lr_at(config, step):.2e} "
                      f"[{time.time() - t0:.0f}s]", flush=True)
            if config.eval_every and (step + 1) % config.eval_every == 0 \
                    and step + 1 < config.iterations:
                m, _ = evaluate_miou(model, val_set, config)
                eval_history.append({"step": step + 1, "miou": m})
                if not quiet:
                    print(f"  eval @ {step + 1}: val mIoU {m:.4f}", flush=True)
    final_miou, per_class = evaluate_miou(model, val_set, config)
    eval_history.append({"step": config.iterations, "miou": final_miou})
    save_checkpoint(ckpt_path, model, optimizer, config, config.iterations)
    report = {
        "final_miou": final_miou,
        "per_class_iou": [None if math.isnan(x) else x for x in per_class],
        "eval_history": eval_history,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "wall_seconds": time.time() - t0,
    }
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2))
    return TrainResult(final_miou=final_miou, per_class=per_class,
                       checkpoint_path=str(ckpt_path), history=history,
                       eval_history=eval_history)


ABLATION_VARIANTS = ("no_cross_scale", "no_attn_loss", "attn_loss_no_null_target",
                     "single_scale_8", "single_scale_16", "single_scale_32",
                     "prediction_average")

_VARIANT_NOTES = {
    "no_cross_scale": "inter-scale query attention removed",
    "no_attn_loss": "attention-map supervision off (lambda_attn=0)",
    "attn_loss_no_null_target": "no uniform target for absent categories",
    "single_scale_8": "queries on the stride-8 level only",
    "single_scale_16": "queries on the stride-16 level only",
    "single_scale_32": "queries on the stride-32 level only",
    "prediction_average": "inference averages per-scale score maps, not logits",
}


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; "
                          f"choose from {ABLATION_VARIANTS}")
    d = config.to_dict()
    if variant == "no_cross_scale":
        d["disable_cross_scale"] = True
    elif variant == "no_attn_loss":
        d["disable_attn_loss"] = True
    elif variant == "attn_loss_no_null_target":
        d["loss"]["attn_null_target"] = False
    elif variant.startswith("single_scale_"):
        d["single_scale_only"] = int(variant.rsplit("_", 1)[1])
    elif variant == "prediction_average":
        d["prediction_average"] = True
    return TrainConfig.from_dict(d)


def ablate(config: TrainConfig, variant: str, out_dir, quiet: bool = False) -> dict:
    """Train baseline and variant on the same seed/data; report deltas."""
    out_dir = Path(out_dir)
    base = train(config, out_dir / "base", quiet=quiet)
    var_cfg = variant_config(config, variant)
    var = train(var_cfg, out_dir / variant, quiet=quiet)

    base_model = build_model(config)
    base_opt = AdamW(base_model.store, config.weight_decay)
    load_checkpoint(base.checkpoint_path, base_model, base_opt, config)
    var_model = build_model(var_cfg)
    var_opt = AdamW(var_model.store, var_cfg.weight_decay)
    load_checkpoint(var.checkpoint_path, var_model, var_opt, var_cfg)
    val_set = SceneDataset("val", config.val_size, config.seed,
                           config.img_h, config.img_w, config.n_categories)
    base_r = evaluate_pearson(base_model, val_set, config)
    var_r = evaluate_pearson(var_model, val_set, var_cfg)

    report = {
        "variant": variant,
        "note": _VARIANT_NOTES[variant],
        "baseline_miou": base.final_miou,
        "variant_miou": var.final_miou,
        "delta_miou": var.final_miou - base.final_miou,
        "baseline_pearson": base_r,
        "variant_pearson": var_r,
        "delta_pearson": var_r - base_r,
        "iterations": config.iterations,
        "seed": config.seed,
    }
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2))
    return report
