"""Unified generation/editing training with modality dropout.

Even steps train generation and odd steps editing (in ``unified`` mode).
Batches are rendered on a worker thread into a bounded queue; each step's
batch depends only on (seed, step), so resumed runs see the same data.
"""

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from core.autodiff import Tensor
from core.conditioning import Conditioning, DropFlags, Vocabulary, conditioning_from_scene
from core.edit_filter import make_edit_pair
from core.errors import ConfigError, ContractError
from core.rdit import RDiT, flow_match_loss
from core.scene_world import SceneSpec, WorldConfig, render_scene, sample_scene

logger = logging.getLogger(__name__)

GENERATION = "generation"
EDITING = "editing"
TASK_MODES = ("unified", GENERATION, EDITING)


# ---------------------------------------------------------------- modality dropout

@dataclass
class DropoutConfig:
    p_layout: float = 0.25
    p_hoi: float = 0.25
    p_txt: float = 0.30
    policy: str = "rebalance"

    def validate(self):
        for name in ("p_layout", "p_hoi", "p_txt"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout.{name} must be in [0, 1), got {p}")
        if self.policy not in ("rebalance", "resample"):
            raise ConfigError(f"dropout.policy must be 'rebalance' or 'resample', got {self.policy!r}")
        if self.policy == "rebalance" and (self.outcome_probabilities() < 0).any():
            raise ConfigError("dropout rates too high to rebalance without the all-dropped event; use policy 'resample'")

    def outcome_probabilities(self) -> np.ndarray:
        """Probabilities of the 8 drop patterns (bit 0 layout, bit 1 hoi, bit 2 prompt).

        Independent rates, then the all-dropped mass m moved so every single-modality
        marginal is kept: patterns with k drops shift by -m * (-1)^(3-k).
        """
        p = np.array([self.p_layout, self.p_hoi, self.p_txt])
        bits = (np.arange(8)[:, None] >> np.arange(3)[None, :]) & 1
        probs = np.prod(np.where(bits == 1, p, 1.0 - p), axis=1)
        if self.policy == "rebalance":
            m = float(np.prod(p))
            k = bits.sum(axis=1)
            probs = probs - m * (-1.0) ** (3 - k)
        return probs


def sample_drop_decisions(config: DropoutConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """(size, 3) booleans: drop layout, drop HOI labels, drop prompt. Never all three."""
    if config.policy == "rebalance":
        probs = np.clip(config.outcome_probabilities(), 0.0, None)
        outcomes = rng.choice(8, size=size, p=probs / probs.sum())
        return ((outcomes[:, None] >> np.arange(3)[None, :]) & 1).astype(bool)
    p = np.array([config.p_layout, config.p_hoi, config.p_txt])
    draws = rng.random((size, 3)) < p
    bad = draws.all(axis=1)
    while bad.any():
        draws[bad] = rng.random((int(bad.sum()), 3)) < p
        bad = draws.all(axis=1)
    return draws


def modality_dropout(cond: Conditioning, config: DropoutConfig, rng: np.random.Generator) -> Tuple[Conditioning, DropFlags]:
    layout, hoi, prompt = sample_drop_decisions(config, rng, 1)[0]
    flags = DropFlags(bool(layout), bool(hoi), bool(prompt))
    return flags.apply(cond), flags


# ---------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay over a named parameter table."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype, copy=False)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"t": np.array([self.t], dtype=np.float32)}
        for name in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        for name, p in self.params.items():
            self.m[name] = np.asarray(state[f"m.{name}"], dtype=p.dtype).reshape(p.shape).copy()
            self.v[name] = np.asarray(state[f"v.{name}"], dtype=p.dtype).reshape(p.shape).copy()


# ---------------------------------------------------------------- data

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    task_mode: str = "unified"
    p_null: float = 0.1
    log_interval: int = 50
    checkpoint_interval: int = 500
    queue_size: int = 4

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.lr < 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"train.task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if not 0.0 <= self.p_null < 1.0:
            raise ConfigError(f"train.p_null must be in [0, 1), got {self.p_null}")
        if self.queue_size < 1:
            raise ConfigError("train.queue_size must be at least 1")


@dataclass
class DatasetConfig:
    p_identity_edit: float = 0.3
    edit_relayout: bool = False
    eval_targets: int = 200
    eval_seed: int = 10_000

    def validate(self):
        if not 0.0 <= self.p_identity_edit <= 1.0:
            raise ConfigError(f"dataset.p_identity_edit must be in [0, 1], got {self.p_identity_edit}")
        if self.eval_targets < 1:
            raise ConfigError("dataset.eval_targets must be positive")


@dataclass
class Batch:
    step: int
    task: str
    targets: List[np.ndarray]
    conds: List[Conditioning]
    sources: List[Optional[np.ndarray]]
    scenes: List[SceneSpec] = field(default_factory=list)


def expected_task(step: int, task_mode: str = "unified") -> str:
    if task_mode == "unified":
        return GENERATION if step % 2 == 0 else EDITING
    return task_mode


def make_batch(step: int, task: str, batch_size: int, world: WorldConfig, dataset: DatasetConfig,
               vocab: Vocabulary, seed: int, prompt_len: Optional[int] = None, bank=None) -> Batch:
    rng = np.random.default_rng([seed, step])
    batch = Batch(step, task, [], [], [])
    for _ in range(batch_size):
        scene = sample_scene(rng, world)
        if task == GENERATION:
            target, source = scene, None
        else:
            target = make_edit_pair(scene, rng, bank=bank if dataset.edit_relayout else None,
                                    p_identity=dataset.p_identity_edit)
            source = render_scene(scene).values
        batch.targets.append(render_scene(target).values)
        batch.conds.append(conditioning_from_scene(target, vocab, prompt_len=prompt_len))
        batch.sources.append(source)
        batch.scenes.append(target)
    return batch


class BatchStream:
    """Renders batches for steps [start, stop) on a worker thread, in step order."""

    def __init__(self, start: int, stop: int, make: Callable[[int], Batch], queue_size: int = 4):
        self.start, self.stop = start, stop
        self.make = make
        self.queue: "queue.Queue" = queue.Queue(maxsize=queue_size)
        self._halt = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="batch-stream", daemon=True)

    def _produce(self):
        try:
            for step in range(self.start, self.stop):
                if self._halt.is_set():
                    return
                self._put(self.make(step))
        except Exception as exc:
            self._put(exc)

    def _put(self, item):
        while not self._halt.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Batch]:
        self._thread.start()
        try:
            for _ in range(self.start, self.stop):
                item = self.queue.get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self):
        self._halt.set()


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    step: int
    optimizer: AdamW
    rng: np.random.Generator
    skipped: int = 0


def new_train_state(model: RDiT, config: TrainConfig, seed: int) -> TrainState:
    optimizer = AdamW(model.named_parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                      eps=config.eps, weight_decay=config.weight_decay)
    return TrainState(step=0, optimizer=optimizer, rng=np.random.default_rng([seed, 1]))


def train_step(model: RDiT, batch: Batch, state: TrainState, config: TrainConfig,
               dropout: DropoutConfig) -> Tuple[float, TrainState]:
    """One optimizer step on the batch's mean flow-matching loss."""
    expected = expected_task(state.step, config.task_mode)
    if batch.task != expected:
        raise ContractError(f"step {state.step} expects a {expected} batch, got {batch.task}")
    model.zero_grad()
    total = None
    for x0, cond, source in zip(batch.targets, batch.conds, batch.sources):
        cond, _ = modality_dropout(cond, dropout, state.rng)
        if state.rng.random() < config.p_null:
            cond = Conditioning.null()
        loss = flow_match_loss(model, x0, cond, state.rng, source=source)
        total = loss if total is None else total + loss
    loss = total * (1.0 / len(batch.targets))
    loss.backward()

    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in model.named_parameters().items()}
    if all(np.all(np.isfinite(g)) for g in grads.values()):
        state.optimizer.step(grads)
    else:
        state.skipped += 1
        logger.warning(f"step {state.step}: non-finite gradients, update skipped ({state.skipped} so far)")
    state.step += 1
    return float(loss.data), state


def train(model: RDiT, state: TrainState, config: TrainConfig, dropout: DropoutConfig, world: WorldConfig,
          dataset: DatasetConfig, vocab: Vocabulary, seed: int, out_dir: Optional[Path] = None,
          checkpoint: Optional[Callable[[TrainState], None]] = None, bank=None) -> List[float]:
    """Run until ``config.steps``; appends step,loss,task,skipped rows to progress.csv."""
    losses = []
    start = state.step
    if start >= config.steps:
        return losses

    def make(step: int) -> Batch:
        return make_batch(step, expected_task(step, config.task_mode), config.batch_size, world, dataset,
                          vocab, seed, prompt_len=model.config.prompt_len, bank=bank)

    progress = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "progress.csv"
        fresh = start == 0 or not path.exists()
        progress = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(progress)
        if fresh:
            writer.writerow(["step", "loss", "task", "skipped"])
    logger.info(f"training steps {start}..{config.steps} in {config.task_mode} mode")
    try:
        bar = tqdm(BatchStream(start, config.steps, make, config.queue_size),
                   total=config.steps - start, desc="train", disable=None)
        for batch in bar:
            loss, state = train_step(model, batch, state, config, dropout)
            losses.append(loss)
            if writer is not None:
                writer.writerow([batch.step, f"{loss:.6f}", batch.task, state.skipped])
            if state.step % config.log_interval == 0:
                bar.set_postfix(loss=f"{loss:.4f}")
                logger.debug(f"step {batch.step} {batch.task} loss {loss:.5f}")
            if checkpoint is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                checkpoint(state)
    finally:
        if progress is not None:
            progress.close()
    logger.info(f"training finished at step {state.step}; {state.skipped} steps skipped")
    return losses
