"""Seeded, resumable training loop."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, capture, restore
from .codec import pretrain_autoencoder
from .config import ExperimentConfig
from .datasets import MiniScene, MiniShapes, batch_at
from .losses import total_loss
from .model import VCT, to_tensor
from .nn import NumericError, adam_step, cosine_lr, make_adam, set_determinism

logger = logging.getLogger(__name__)

LOG_HEADER = "step,rec,dis,total,swap_accuracy,lr"


def build_dataset(cfg: ExperimentConfig):
    if cfg.dataset == "minishapes":
        return MiniShapes(cfg.image_size)
    return MiniScene(cfg.image_size, cfg.min_objects, cfg.max_objects)


def dataset_batches(cfg: ExperimentConfig, dataset=None) -> Callable[[int], torch.Tensor]:
    dataset = dataset if dataset is not None else build_dataset(cfg)

    def batch(step: int) -> torch.Tensor:
        images, _ = batch_at(dataset, cfg.seed, cfg.batch_size, step)
        return to_tensor(images)

    return batch


def array_batches(images: np.ndarray, batch_size: int, seed: int) -> Callable[[int], torch.Tensor]:
    """Seeded epoch-shuffled batches over an in-memory ``(n, H, W, 3)`` array."""
    n = len(images)
    if n < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} images, got {n}")
    per_epoch = n // batch_size

    def batch(step: int) -> torch.Tensor:
        epoch, offset = divmod(step, per_epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        return to_tensor(images[perm[offset * batch_size:(offset + 1) * batch_size]])

    return batch


class Trainer:
    """Owns one model + optimizer; every step is a pure function of ``(config, step)``."""

    def __init__(self, cfg: ExperimentConfig, batches: Callable[[int], torch.Tensor] | None = None,
                 out_dir: str | Path | None = None):
        set_determinism()
        self.cfg = cfg
        self.batches = batches or dataset_batches(cfg)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.model = VCT.from_config(cfg)
        self.step = 0
        self.history: list[str] = []
        self.frozen_codec = False
        if cfg.codec == "pretrained-conv-ae":
            self._pretrain_codec()
        self.optimizer = make_adam(self.trainable_parameters(), lr=cfg.lr)

    def _pretrain_codec(self) -> None:
        cfg = self.cfg
        gen_seed = cfg.seed + 1_000_003

        def images(step, bs):
            return self.batches(step + gen_seed)[:bs]

        losses = pretrain_autoencoder(self.model.codec, images, cfg.pretrain_steps, batch_size=cfg.batch_size)
        logger.info("codec pretraining: final mse %.5f", losses[-1] if losses else float("nan"))
        if cfg.freeze_codec:
            for name, p in self.model.codec.named_parameters():
                if name != "pos":
                    p.requires_grad_(False)
            self.frozen_codec = True

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def named_trainable(self):
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]

    @property
    def config_hash(self) -> str:
        return self.cfg.hash()

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        return cosine_lr(step, cfg.lr, cfg.steps, cfg.warmup_steps, cfg.min_lr_ratio)

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        step = self.step
        x = self.batches(step)
        rng = np.random.default_rng([cfg.seed, step, 7])
        report = total_loss(
            self.model,
            x,
            rng,
            lambda_dis=cfg.effective_lambda_dis,
            detach=not cfg.no_detach,
            grad_image_tokenizer=cfg.dis_updates_image_tokenizer,
            grad_prototypes=cfg.dis_updates_prototypes,
            rec_weight=cfg.rec_weight,
        )
        if not torch.isfinite(report.total):
            raise NumericError(f"non-finite loss at step {step}")
        report.total.backward()
        lr = self.lr_at(step)
        adam_step(self.optimizer, self.named_trainable(), lr=lr, clip=self.cfg.grad_clip)
        self.step += 1
        out = report.as_floats()
        out["lr"] = lr
        return out

    def run(self, until: int | None = None, log: Callable[[str], None] | None = None) -> list[str]:
        """Train to step ``until`` (default ``cfg.steps``), checkpointing periodically.

        Returns the CSV log rows produced by this call. On a numeric failure the
        last good checkpoint on disk is kept and ``NumericError`` propagates.
        """
        until = self.cfg.steps if until is None else until
        rows = []
        if self.out_dir is not None and self.step == 0:
            self.save()
        try:
            while self.step < until:
                rec = self.train_step()
                row = format_log_row(self.step - 1, rec)
                rows.append(row)
                self.history.append(row)
                if log is not None and ((self.step - 1) % self.cfg.log_every == 0 or self.step == until):
                    log(row)
                if self.out_dir is not None and (self.step % self.cfg.checkpoint_every == 0 or self.step == until):
                    self.save()
        finally:
            if self.out_dir is not None:
                self.append_log(rows)
        return rows

    # persistence

    def checkpoint(self) -> Checkpoint:
        return capture(self.model, self.optimizer, self.config_hash, self.cfg.to_text(False),
                       self.step, self.cfg.seed)

    def save(self, path: str | Path | None = None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValueError("no output directory configured")
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / f"{self.config_hash}-{self.cfg.seed}-latest.ckpt"
        return self.checkpoint().save(path)

    def append_log(self, rows: list[str]) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{self.config_hash}-{self.cfg.seed}-train.csv"
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write(f"# config_hash = {self.config_hash}\n{LOG_HEADER}\n")
            for row in rows:
                fh.write(row + "\n")

    @classmethod
    def resume(cls, ckpt: Checkpoint, cfg: ExperimentConfig | None = None,
               batches: Callable[[int], torch.Tensor] | None = None,
               out_dir: str | Path | None = None, force: bool = False) -> "Trainer":
        cfg = cfg or ExperimentConfig.from_text(ckpt.config_text)
        if ckpt.config_hash != cfg.hash() and not force:
            raise ValueError(f"checkpoint hash {ckpt.config_hash} != config hash {cfg.hash()}")
        cfg = cfg.replace(pretrain_steps=0) if cfg.codec == "pretrained-conv-ae" else cfg
        trainer = cls.__new__(cls)
        set_determinism()
        trainer.cfg = cfg
        trainer.batches = batches or dataset_batches(cfg)
        trainer.out_dir = Path(out_dir) if out_dir is not None else None
        trainer.model = VCT.from_config(cfg)
        trainer.history = []
        trainer.frozen_codec = cfg.codec == "pretrained-conv-ae" and cfg.freeze_codec
        if trainer.frozen_codec:
            for name, p in trainer.model.codec.named_parameters():
                if name != "pos":
                    p.requires_grad_(False)
        trainer.optimizer = make_adam(trainer.trainable_parameters(), lr=cfg.lr)
        restore(ckpt, trainer.model, trainer.optimizer)
        trainer.step = ckpt.step
        return trainer


def format_log_row(step: int, rec: dict[str, float]) -> str:
    return ",".join([str(step)] + [repr(float(rec[k])) for k in ("rec", "dis", "total", "swap_accuracy", "lr")])


def load_model(path: str | Path, expected_hash: str | None = None, force: bool = False) -> tuple[VCT, ExperimentConfig, Checkpoint]:
    ckpt = Checkpoint.load(path, expected_hash, force)
    cfg = ExperimentConfig.from_text(ckpt.config_text)
    model = VCT.from_config(cfg)
    restore(ckpt, model)
    model.eval()
    return model, cfg, ckpt
