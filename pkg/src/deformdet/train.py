"""Deterministic SGD-with-momentum training loop and the ablation runner.

Outputs under ``cfg.out``:

* ``train.log``: ``step total_loss cls_loss box_loss`` per step
* ``eval.log``: ``step map50 map5095`` per periodic evaluation
* ``checkpoint/``: parameters, momentum buffers and config
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .evaluate import EvalReport, evaluate
from .head import Detection, assign_targets, compute_loss, decode
from .model import Detector, load_checkpoint, save_checkpoint
from .synth import CLASS_NAMES, Dataset, load_dataset

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@contextmanager
def blas_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    if batch_size >= n:
        return np.arange(n)
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        out.extend(perm[offset : offset + batch_size - len(out)].tolist())
    return np.array(out)


def predict(model: Detector, images: np.ndarray, score_thresh: float, iou_thresh: float,
            chunk: int = 32) -> list[list[Detection]]:
    out = []
    for s in range(0, len(images), chunk):
        pred = model.forward(images[s : s + chunk])
        out.extend(decode(pred, score_thresh, iou_thresh, image_size=images.shape[2:]))
    return out


def evaluate_model(model: Detector, data: Dataset, score_thresh: float = 0.05,
                   iou_thresh: float = 0.5, upper: float = 0.95) -> EvalReport:
    dets = predict(model, data.images, score_thresh, iou_thresh)
    return evaluate(dict(zip(data.ids, dets)), data.gt_map(),
                    range(model.config.num_classes), upper,
                    dict(enumerate(CLASS_NAMES)) if model.config.num_classes == 6 else None)


@dataclass
class Trainer:
    cfg: TrainConfig
    data: Dataset
    model: Detector = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.model is None:
            self.model = Detector(self.cfg.model, self.cfg.seed)
        if not self.velocity:
            self.velocity = {k: np.zeros_like(v) for k, v in self.model.store.items()}
        if len(self.data.ids) == 0:
            raise ConfigError(f"no training images in {self.data.root}")
        levels = self.cfg.model.neck.levels
        self.targets = assign_targets(self.data.boxes, levels, self.data.image_size,
                                      self.cfg.model.num_classes)

    def _batch_targets(self, idx):
        t = self.targets
        sub = dataclasses.replace(
            t, cls={k: v[idx] for k, v in t.cls.items()},
            box={k: v[idx] for k, v in t.box.items()},
            pos={k: v[idx] for k, v in t.pos.items()},
            assigned=[t.assigned[i] for i in idx])
        return sub

    def loss_and_grad(self, idx=None):
        if idx is None:
            idx = batch_indices(self.step_count, self.cfg.batch_size, len(self.data.ids),
                                self.cfg.seed)
        store = self.model.store
        store.zero_grad()
        pred = self.model.forward(self.data.images[idx])
        total, cls, box, d_cls, d_box = compute_loss(
            pred, self._batch_targets(idx), self.cfg.cls_weight, self.cfg.box_weight,
            with_grad=True)
        if not all(math.isfinite(v) for v in (total, cls, box)):
            raise DivergenceError(f"non-finite loss at step {self.step_count}: "
                                  f"total={total} cls={cls} box={box}")
        self.model.backward(d_cls, d_box)
        return total, cls, box

    def step(self) -> tuple[float, float, float]:
        losses = self.loss_and_grad()
        lr, mu = self.cfg.lr, self.cfg.momentum
        params = self.model.store.params
        for name, p in params.items():
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient for {name} at step {self.step_count}")
        scale = 1.0
        if self.cfg.grad_clip > 0:
            norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params.values()))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
        for name, p in params.items():
            v = self.velocity[name]
            v *= mu
            v += scale * p.grad
            rate = lr * self.cfg.offset_lr_mult if p.role.startswith("offset") else lr
            p.value -= rate * v
        self.step_count += 1
        return losses

    def save(self, path) -> None:
        extra = {f"momentum.{k}": v for k, v in self.velocity.items()}
        extra["trainer.step"] = np.array([float(self.step_count)])
        save_checkpoint(path, self.model, self.cfg, extra)

    @classmethod
    def resume(cls, path, data: Dataset, cfg: TrainConfig | None = None) -> Trainer:
        model, saved_cfg, extra = load_checkpoint(path)
        velocity = {k[len("momentum."):]: v for k, v in extra.items()
                    if k.startswith("momentum.")}
        step = int(extra.get("trainer.step", np.zeros(1))[0])
        return cls(cfg or saved_cfg, data, model, velocity, step)


def train(cfg: TrainConfig, data: Dataset | None = None, resume=None,
          write: bool = True) -> Trainer:
    """Run ``cfg.steps`` optimiser steps in total (counting resumed ones)."""
    if data is None:
        if not cfg.data or not Path(cfg.data, "manifest.txt").exists():
            raise FileNotFoundError(f"dataset not found at {cfg.data!r}")
        data = load_dataset(cfg.data, "train")
    trainer = Trainer.resume(resume, data, cfg) if resume else Trainer(cfg, data)
    out = Path(cfg.out)
    val = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume else "w"
        train_log = open(out / "train.log", mode)
        eval_log = open(out / "eval.log", mode)
    with blas_threads(cfg.threads):
        try:
            while trainer.step_count < cfg.steps:
                step = trainer.step_count
                total, cls, box = trainer.step()
                if write:
                    train_log.write(f"{step} {total:.10g} {cls:.10g} {box:.10g}\n")
                if cfg.eval_every and trainer.step_count % cfg.eval_every == 0:
                    if val is None:
                        val = _eval_data(cfg, data)
                    rep = evaluate_model(trainer.model, val, cfg.score_thresh, cfg.nms_iou)
                    log.info("step %d map50 %.4f map5095 %.4f", trainer.step_count,
                             rep.map50, rep.map5095)
                    if write:
                        eval_log.write(f"{trainer.step_count} {rep.map50:.10g} "
                                       f"{rep.map5095:.10g}\n")
        finally:
            if write:
                train_log.close()
                eval_log.close()
    if write:
        trainer.save(out / "checkpoint")
    return trainer


def _eval_data(cfg: TrainConfig, train_data: Dataset) -> Dataset:
    if cfg.eval_split == "train" or not cfg.data:
        return train_data
    data = load_dataset(cfg.data, cfg.eval_split)
    return data if data.ids else train_data


# ablation

@dataclass(frozen=True)
class Variant:
    name: str
    dc_stages: frozenset[int]
    neck: str


TABLE1_VARIANTS = (
    Variant("baseline", frozenset(), "pafpn"),
    Variant("dc", frozenset({4, 5}), "pafpn"),
    Variant("dfpn", frozenset(), "dfpn"),
    Variant("dc+dfpn", frozenset({4, 5}), "dfpn"),
)
TABLE2_VARIANTS = (
    Variant("dc2345", frozenset({2, 3, 4, 5}), "dfpn"),
    Variant("dc345", frozenset({3, 4, 5}), "dfpn"),
    Variant("dc45", frozenset({4, 5}), "dfpn"),
    Variant("dc5", frozenset({5}), "dfpn"),
)


def parse_variants(text: str) -> list[Variant]:
    """Lines of ``name dc_stages neck``; dc_stages is comma-separated or ``none``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError(f"variants line {lineno}: expected 'name dc_stages neck'")
        name, stages, neck = parts
        try:
            dcs = frozenset() if stages.lower() in ("none", "-") else frozenset(
                int(s) for s in stages.split(","))
        except ValueError:
            raise ConfigError(f"variants line {lineno}: bad stage list {stages!r}") from None
        if dcs - {2, 3, 4, 5}:
            raise ConfigError(f"variants line {lineno}: stages must be within 2..5")
        if neck not in ("pafpn", "dfpn"):
            raise ConfigError(f"variants line {lineno}: neck must be pafpn or dfpn")
        out.append(Variant(name, dcs, neck))
    if not out:
        raise ConfigError("variants file lists no variants")
    return out


def variant_config(base: TrainConfig, v: Variant) -> TrainConfig:
    backbone = dataclasses.replace(base.model.backbone, dc_stages=v.dc_stages)
    neck = dataclasses.replace(base.model.neck, kind=v.neck)
    model = dataclasses.replace(base.model, backbone=backbone, neck=neck)
    return dataclasses.replace(base, model=model, out=str(Path(base.out) / v.name))


def ablation_run(base: TrainConfig, variants, data: Dataset | None = None,
                 csv_path=None, write_runs: bool = False) -> list[dict]:
    """Train each variant from the same seed and data; one result row per variant."""
    if data is None:
        data = load_dataset(base.data, "train")
    rows = []
    for v in variants:
        cfg = variant_config(base, v)
        trainer = train(cfg, data, write=write_runs)
        rep = evaluate_model(trainer.model, _eval_data(base, data), base.score_thresh,
                             base.nms_iou)
        total, _, _ = trainer.loss_and_grad(np.arange(min(len(data.ids), base.batch_size)))
        row = {"variant": v.name,
               "dc_stages": ",".join(map(str, sorted(v.dc_stages))) or "none",
               "neck": v.neck,
               "params": trainer.model.param_count(),
               "final_loss": total,
               "mAP50": rep.map50,
               "mAP50_95": rep.map5095}
        for c in range(base.model.num_classes):
            name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
            ap = rep.per_class_ap.get(c)
            row[name] = ap[0.5] if ap is not None else float("nan")
        row["manifest"] = trainer.model.param_manifest()
        rows.append(row)
    if csv_path is not None:
        write_ablation_csv(csv_path, rows)
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = [k for k in rows[0] if k != "manifest"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for r in rows:
            writer.writerow([f"{r[k]:.6f}" if isinstance(r[k], float) else r[k] for k in keys])
