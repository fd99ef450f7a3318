"""Training loops for the distillation student and the completion net.

Batches accumulate per-sample gradients (each sample's graph is freed
right after its backward sweep, keeping memory flat), then take one Adam
step. Everything is driven by a single seeded generator, so loss curves
and checkpoints are bitwise reproducible on a machine.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import completion as cm
from . import metrics
from .optim import adam_init, adam_step
from .synth import load_manifest
from .volumes import TsdfVolume
from .vxl_io import read_volume

__all__ = [
    "TrainConfig",
    "SampleStore",
    "train_distill",
    "train_complete",
    "eval_distill",
    "eval_complete",
    "copy_input_baseline",
]


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay: float = 1.0  # per-epoch multiplier on lr
    loss_weights: cm.LossWeights = field(default_factory=cm.LossWeights)
    chunk_a: int = 4
    chunk_b: int = 8
    feat_dim: int = 16
    state_dim: int = 16
    fuse_dim: int = 64
    dec_dim: int = 8
    token_dim: int = 64
    truncation: float = 3.0
    use_dino: bool = True
    use_msm: bool = True
    student_mode: str = "finetune"  # finetune | frozen | random

    def __post_init__(self):
        if self.student_mode not in ("finetune", "frozen", "random"):
            raise ValueError(f"unknown student_mode {self.student_mode!r}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = cm.LossWeights(**self.loss_weights)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, path_or_text: str) -> "TrainConfig":
        text = path_or_text
        if os.path.exists(path_or_text):
            with open(path_or_text) as f:
                text = f.read()
        return cls(**json.loads(text))

    def completion_config(self) -> cm.CompletionConfig:
        return cm.CompletionConfig(
            feat_dim=self.feat_dim,
            fuse_dim=self.fuse_dim,
            dec_dim=self.dec_dim,
            state_dim=self.state_dim,
            token_dim=self.token_dim,
            chunk_a=self.chunk_a,
            chunk_b=self.chunk_b,
            truncation=self.truncation,
            use_dino=self.use_dino,
            use_msm=self.use_msm,
        )


class SampleStore:
    """Manifest-backed access to the dataset's VXL files."""

    def __init__(self, manifest_path: str, truncation: float = 3.0):
        self.manifest, self.base = load_manifest(manifest_path)
        self.truncation = truncation
        self.by_id = {e["id"]: e for e in self.manifest}

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.manifest if split is None or e["split"] == split]

    def split_of(self, sample_id: str) -> str:
        return self.by_id[sample_id]["split"]

    def path(self, sample_id: str, key: str) -> str:
        return os.path.join(self.base, self.by_id[sample_id]["files"][key])

    def volume(self, sample_id: str, key: str):
        return read_volume(self.path(sample_id, key), truncation=self.truncation)


def _param_list(named: dict[str, ad.DiffNode]):
    names = sorted(named)
    return names, [named[n] for n in names]


def _grad_arrays(params):
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _apply_update(params, new_values):
    for p, v in zip(params, new_values):
        p.data[...] = v


def _log_write(out_dir: str, name: str, payload) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as f:
        json.dump(payload, f, indent=1)


def train_distill(manifest_path: str, cfg: TrainConfig, out_dir: str):
    """Train the student against fused teacher features.

    Writes student.ckpt and distill_log.json under out_dir; returns
    (student, history) where history holds per-epoch mean losses.
    """
    store = SampleStore(manifest_path, cfg.truncation)
    train_ids = store.ids("train")
    if len(train_ids) < 2:
        raise ValueError("need at least 2 training samples")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    student = cm.build_student(cfg.feat_dim, rng)
    names, params = _param_list(student.named_params())
    state = adam_init([p.data for p in params])
    history = []
    t_start = time.time()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(len(train_ids))
        epoch_losses = []
        for i0 in range(0, len(order), cfg.batch_size):
            batch = [train_ids[j] for j in order[i0 : i0 + cfg.batch_size]]
            ad.zero_grads(params)
            batch_loss = 0.0
            for sid in batch:
                loss_node = _distill_sample_loss(store, student, sid, cfg)
                scaled = ad.mul(loss_node, ad.constant(1.0 / len(batch)))
                ad.backward(scaled)
                batch_loss += float(loss_node.data) / len(batch)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite distill loss at epoch {epoch}")
            _apply_update(params, adam_step([p.data for p in params], _grad_arrays(params), state, lr))
            epoch_losses.append(batch_loss)
        history.append(float(np.mean(epoch_losses)))
    cm.save_checkpoint(
        os.path.join(out_dir, "student.ckpt"),
        {n: p.data for n, p in zip(names, params)},
        meta={"kind": "student", "config": json.loads(cfg.to_json())},
    )
    _log_write(out_dir, "distill_log.json", {
        "epoch_loss": history, "seconds": time.time() - t_start,
        "config": json.loads(cfg.to_json()),
    })
    return student, history


def _distill_sample_loss(store: SampleStore, student: cm.StudentNet, sid: str, cfg: TrainConfig):
    partial = store.volume(sid, "partial")
    z_hat = store.volume(sid, "dino_gt").values.astype(np.float64)
    m_hat = store.volume(sid, "mask").values.astype(np.float64)
    xin = ad.constant(partial.values[None].astype(np.float64) / cfg.truncation)
    z, m = student.forward_node(xin)
    return cm.distill_loss_node(z, z_hat, m, m_hat, cfg.loss_weights)


def eval_distill(store: SampleStore, student: cm.StudentNet, split: str,
                 w: cm.LossWeights | None = None) -> dict:
    """Masked cosine / mse / loss means over one split."""
    w = w or cm.LossWeights()
    cos_all, mse_all, loss_all = [], [], []
    for sid in store.ids(split):
        partial = store.volume(sid, "partial")
        z_hat = store.volume(sid, "dino_gt").values.astype(np.float64)
        m_hat = store.volume(sid, "mask").values.astype(np.float64)
        z, m = cm.student_forward(student, partial)
        zv = z.values.astype(np.float64)
        sel = m_hat.reshape(-1) > 0
        if sel.any():
            zf = zv.reshape(z.channels, -1)[:, sel]
            tf = z_hat.reshape(z.channels, -1)[:, sel]
            num = (zf * tf).sum(axis=0)
            den = np.linalg.norm(zf, axis=0) * np.linalg.norm(tf, axis=0) + 1e-12
            cos_all.append(float((num / den).mean()))
            mse_all.append(float(((zf - tf) ** 2).sum(axis=0).mean()))
        loss_all.append(cm.distill_loss(
            z, store.volume(sid, "dino_gt"), m, store.volume(sid, "mask"), w))
    return {
        "split": split,
        "cosine": float(np.mean(cos_all)) if cos_all else float("nan"),
        "mse": float(np.mean(mse_all)) if mse_all else float("nan"),
        "loss": float(np.mean(loss_all)) if loss_all else float("nan"),
        "count": len(loss_all),
    }


def train_complete(manifest_path: str, cfg: TrainConfig, out_dir: str,
                   student_ckpt: str | None = None):
    """Train the completion network with the sign-aware TSDF loss.

    The student branch starts from student_ckpt unless student_mode is
    "random"; "frozen" keeps it out of the optimizer. Writes
    complete.ckpt and complete_log.json; returns (net, history).
    """
    store = SampleStore(manifest_path, cfg.truncation)
    train_ids = store.ids("train")
    if len(train_ids) < 2:
        raise ValueError("need at least 2 training samples")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    net = cm.build_completion(cfg.completion_config(), rng)
    if cfg.use_dino and cfg.student_mode != "random":
        if student_ckpt is None:
            raise ValueError("student_mode requires a student checkpoint (or 'random')")
        stored, _ = cm.load_checkpoint(student_ckpt)
        cm.apply_checkpoint(net.student.named_params(), stored)
    names, params = _param_list(net.named_params(include_student=cfg.student_mode != "frozen"))
    state = adam_init([p.data for p in params])
    history = []
    t_start = time.time()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(len(train_ids))
        epoch_losses = []
        for i0 in range(0, len(order), cfg.batch_size):
            batch = [train_ids[j] for j in order[i0 : i0 + cfg.batch_size]]
            ad.zero_grads(params)
            batch_loss = 0.0
            for sid in batch:
                partial = store.volume(sid, "partial")
                gt = store.volume(sid, "gt")
                xin = ad.constant(partial.values[None].astype(np.float64))
                pred = net.forward_node(xin)
                loss_node = cm.tsdf_loss_node(
                    ad.reshape(pred, gt.values.shape), gt.values.astype(np.float64), cfg.loss_weights
                )
                ad.backward(ad.mul(loss_node, ad.constant(1.0 / len(batch))))
                batch_loss += float(loss_node.data) / len(batch)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite completion loss at epoch {epoch}")
            _apply_update(params, adam_step([p.data for p in params], _grad_arrays(params), state, lr))
            epoch_losses.append(batch_loss)
        history.append(float(np.mean(epoch_losses)))
    all_named = net.named_params(include_student=True) if cfg.use_dino else net.named_params()
    cm.save_checkpoint(
        os.path.join(out_dir, "complete.ckpt"),
        {n: p.data for n, p in all_named.items()},
        meta={"kind": "completion", "config": json.loads(cfg.to_json())},
    )
    _log_write(out_dir, "complete_log.json", {
        "epoch_loss": history, "seconds": time.time() - t_start,
        "config": json.loads(cfg.to_json()),
    })
    return net, history


def load_completion(ckpt_path: str):
    """Rebuild a completion net from a checkpoint."""
    stored, meta = cm.load_checkpoint(ckpt_path)
    cfg = TrainConfig(**meta["config"])
    net = cm.build_completion(cfg.completion_config(), np.random.default_rng(cfg.seed))
    cm.apply_checkpoint(net.named_params(include_student=True) if cfg.use_dino
                        else net.named_params(), stored)
    return net, cfg


def load_student(ckpt_path: str):
    stored, meta = cm.load_checkpoint(ckpt_path)
    cfg = TrainConfig(**meta["config"])
    student = cm.build_student(cfg.feat_dim, np.random.default_rng(cfg.seed))
    cm.apply_checkpoint(student.named_params(), stored)
    return student, cfg


def eval_complete(store: SampleStore, net: cm.CompletionNet, split: str) -> metrics.EvalReport:
    report = metrics.EvalReport(config={"split": split})
    for sid in store.ids(split):
        partial = store.volume(sid, "partial")
        gt = store.volume(sid, "gt")
        pred = cm.complete_forward(net, partial)
        report.add(sid, split, metrics.chamfer(pred, gt), metrics.iou(pred, gt),
                   metrics.l1_error(pred, gt))
    return report


def copy_input_baseline(store: SampleStore, split: str) -> metrics.EvalReport:
    """Score the partial scan itself as the prediction."""
    report = metrics.EvalReport(config={"split": split, "baseline": "copy-input"})
    for sid in store.ids(split):
        partial = store.volume(sid, "partial")
        gt = store.volume(sid, "gt")
        report.add(sid, split, metrics.chamfer(partial, gt), metrics.iou(partial, gt),
                   metrics.l1_error(partial, gt))
    return report
