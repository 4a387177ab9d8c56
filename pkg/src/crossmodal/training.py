"""EO pretraining, per-modality bootstrap and joint multi-modal training."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import MODALITIES, RunConfig
from .diffusion import batch_denoise_loss, cosine_schedule
from .errors import ConfigurationError, DataError, NumericalError, UsageError
from .nn import ModuleRegistry
from .scenes import MultiModalDataset, Rig, SceneViewRecord

log = logging.getLogger(__name__)


@dataclass
class TrainingTask:
    sources: list[SceneViewRecord]
    target: SceneViewRecord

    def descriptor(self) -> str:
        src = "+".join(s.modality for s in self.sources)
        return f"S={len(self.sources)}:{src}->{self.target.modality}"

    def to_json(self) -> dict:
        return {
            "scene": self.target.scene_id,
            "sources": [[s.view_id, s.modality] for s in self.sources],
            "target": [self.target.view_id, self.target.modality],
        }

    @classmethod
    def from_json(cls, dataset: MultiModalDataset, d: dict) -> "TrainingTask":
        sources = [dataset.record(d["scene"], v, m) for v, m in d["sources"]]
        return cls(sources, dataset.record(d["scene"], *d["target"]))


def sample_training_task(dataset: MultiModalDataset, rng: np.random.Generator, allowed_modalities=MODALITIES,
                         s_max: int = 3, split: str | None = "train") -> TrainingTask:
    """Uniform scene, S ~ U{1..s_max}, distinct views, independent uniform modalities."""
    allowed = list(allowed_modalities)
    if not allowed or s_max < 1:
        raise UsageError("need at least one modality and s_max >= 1")
    ids = dataset.splits.get(split, []) if split else dataset.scene_ids
    if not ids:
        raise DataError(f"dataset split {split!r} is empty")
    scene = ids[rng.integers(len(ids))]
    s = int(rng.integers(1, s_max + 1))
    n_views = dataset.n_views(scene)
    if n_views < s + 1:
        raise DataError(f"scene {scene} has {n_views} views; a task with S={s} needs {s + 1}")
    views = rng.choice(n_views, size=s + 1, replace=False)
    mods = [allowed[i] for i in rng.integers(len(allowed), size=s + 1)]
    sources = [dataset.record(scene, int(v), m) for v, m in zip(views[:s], mods[:s])]
    return TrainingTask(sources, dataset.record(scene, int(views[s]), mods[s]))


class Trainer:
    """Owns the optimizer, the task/noise generator and the step counter."""

    def __init__(self, registry: ModuleRegistry, dataset: MultiModalDataset, config: RunConfig | None = None,
                 allowed_modalities=None, rng: np.random.Generator | None = None):
        self.registry = registry
        self.dataset = dataset
        self.config = config or registry.config
        self.rig = Rig(self.config)
        self.sched = cosine_schedule(self.config.timesteps)
        self.allowed = tuple(allowed_modalities or registry.modalities)
        missing = set(self.allowed) - set(registry.modalities)
        if missing:
            raise ConfigurationError(f"registry lacks modules for {sorted(missing)}")
        self.rng = rng or np.random.default_rng(self.config.seed)
        self.optimizer = torch.optim.Adam(registry.parameters(), lr=self.config.lr, betas=self.config.betas)
        self.step_count = 0
        self.losses: list[float] = []
        self.descriptors: list[str] = []

    def step(self) -> float:
        """One optimizer update on a freshly sampled batch of tasks."""
        torch.set_num_threads(self.config.threads)
        tasks = [
            sample_training_task(self.dataset, self.rng, self.allowed, self.config.s_max)
            for _ in range(self.config.batch_size)
        ]
        self.optimizer.zero_grad(set_to_none=True)
        loss = batch_denoise_loss(self.registry, tasks, self.rng, self.rig, self.sched)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss at step {self.step_count}; tasks: "
                + json.dumps([t.to_json() for t in tasks])
            )
        loss.backward()
        # Adam skips parameters whose grad is None, so untouched modules stay bit-identical
        self.optimizer.step()
        self.step_count += 1
        self.losses.append(value)
        self.descriptors.append(";".join(t.descriptor() for t in tasks))
        return value

    def run(self, n_steps: int, log_every: int = 100, csv_path=None) -> list[float]:
        writer = None
        fh = None
        if csv_path is not None:
            path = Path(csv_path)
            new = not path.exists()
            fh = open(path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "task", "loss"])
        try:
            for _ in range(n_steps):
                value = self.step()
                if writer:
                    writer.writerow([self.step_count, self.descriptors[-1], repr(value)])
                if log_every and self.step_count % log_every == 0:
                    recent = self.losses[-log_every:]
                    log.info("step %d loss %.4f", self.step_count, sum(recent) / len(recent))
        finally:
            if fh:
                fh.close()
        return self.losses

    def state_header(self) -> dict:
        return {"step": self.step_count, "rng_state": self.rng.bit_generator.state, "allowed": list(self.allowed)}

    def save(self, path, extra: dict | None = None):
        from .persistence import save_registry

        save_registry(path, self.registry, self.optimizer, {"trainer": self.state_header(), **(extra or {})})

    @classmethod
    def resume(cls, path, dataset: MultiModalDataset) -> "Trainer":
        from .persistence import load_registry, restore_optimizer

        registry, header, adam = load_registry(path)
        state = header.get("trainer")
        if state is None:
            raise DataError(f"checkpoint {path} carries no trainer state")
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng_state"]
        trainer = cls(registry, dataset, registry.config, state["allowed"], rng)
        restore_optimizer(trainer.optimizer, registry, adam)
        trainer.step_count = state["step"]
        return trainer


def pretrain_eo(registry_init: ModuleRegistry | None, dataset: MultiModalDataset, config: RunConfig,
                steps: int | None = None, checkpoint=None, csv_path=None):
    """Train the EO encoder, shared MLP and EO denoiser on EO-only tasks."""
    registry = registry_init if registry_init is not None else ModuleRegistry(config, ("EO",))
    if "EO" not in registry.modalities:
        raise ConfigurationError("EO pretraining needs an EO encoder and denoiser")
    trainer = Trainer(registry, dataset, config, ("EO",), np.random.default_rng([config.seed, 0]))
    trainer.run(config.pretrain_steps if steps is None else steps, csv_path=csv_path)
    if checkpoint is not None:
        trainer.save(checkpoint, {"stage": "pretrain"})
    return registry, trainer.losses


def bootstrap_from_eo(eo_registry: ModuleRegistry, modalities=MODALITIES) -> ModuleRegistry:
    """Deep-clone the EO encoder/denoiser into every other modality; the MLP stays single."""
    if "EO" not in eo_registry.encoders or "EO" not in eo_registry.denoisers:
        raise ConfigurationError("bootstrap needs trained EO modules")
    for m in modalities:
        if m != "EO":
            eo_registry.clone_modality("EO", m)
    return eo_registry


def train_joint(registry: ModuleRegistry, dataset: MultiModalDataset, config: RunConfig,
                steps: int | None = None, checkpoint=None, csv_path=None, trainer: Trainer | None = None):
    """Joint training with random source/target modalities; returns (registry, losses)."""
    if trainer is None:
        trainer = Trainer(registry, dataset, config, MODALITIES, np.random.default_rng([config.seed, 1]))
    trainer.run(config.joint_steps if steps is None else steps, csv_path=csv_path)
    if checkpoint is not None:
        trainer.save(checkpoint, {"stage": "joint"})
    return trainer.registry, trainer.losses


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def gradient_reachability(registry: ModuleRegistry, task: TrainingTask, rng: np.random.Generator,
                          rig: Rig | None = None, sched=None) -> dict:
    """Backpropagate one task's loss and report which parameter blocks receive a non-zero gradient."""
    rig = rig or Rig(registry.config)
    sched = sched or cosine_schedule(registry.config.timesteps)
    registry.zero_grad(set_to_none=True)
    loss = batch_denoise_loss(registry, [task], rng, rig, sched)
    loss.backward()
    out = {}
    for name, block in registry.blocks().items():
        grads = [p.grad for p in block.parameters() if p.grad is not None]
        out[name] = any(bool(torch.any(g != 0)) for g in grads)
    registry.zero_grad(set_to_none=True)
    return out


def expected_blocks(task: TrainingTask) -> set:
    """Blocks a task's loss should touch: the shared MLP, the source encoders and the target denoiser."""
    return {"mlp", f"denoiser:{task.target.modality}"} | {f"encoder:{s.modality}" for s in task.sources}
