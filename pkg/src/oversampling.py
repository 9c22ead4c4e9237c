"""
Over-sampling Trainer
Training loop that pools hard (or easy, or random) batches during an epoch and
replays each pooled batch once before the epoch ends
"""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from src.config import TrainConfig
from src.dataset import collate_detections
from src.losses import batch_loss, detection_loss

REPORT_COLUMNS = ['epoch', 'batch_id', 'loss', 'pooled', 'replayed', 'replay_loss', 'pool_size']


@dataclass(frozen=True)
class PoolEntry:
    """A pooled batch: its position in the epoch, dataset indices and loss"""
    batch_id: int
    indices: Tuple[int, ...]
    loss: Optional[float]
    arrival: int


class SamplePool:
    """Bounded set of batches selected for replay"""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError(f"Pool capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.entries = []
        self._arrivals = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, batch_id):
        return any(entry.batch_id == batch_id for entry in self.entries)

    @property
    def full(self):
        return len(self.entries) >= self.capacity

    @property
    def batch_ids(self):
        return sorted(entry.batch_id for entry in self.entries)

    def make_entry(self, batch, loss):
        batch_id, indices = batch
        entry = PoolEntry(batch_id, tuple(indices), loss, self._arrivals)
        self._arrivals += 1
        return entry

    def clear(self):
        self.entries = []
        self._arrivals = 0


def pool_update_hard(pool, batch, loss, threshold):
    """
    Offer a batch to the hard pool

    Not full: insert when loss > threshold. Full: replace the lowest-loss
    entry when loss is strictly greater than it. Among entries tied at the
    lowest loss the most recent one is replaced, so earlier batches win ties.

    Args:
        pool (SamplePool): Pool to update in place
        batch (tuple): (batch_id, dataset indices)
        loss (float): Batch loss L_i
        threshold (float): Admission threshold L

    Returns:
        SamplePool: The same pool
    """
    if not pool.full:
        if loss > threshold:
            pool.entries.append(pool.make_entry(batch, loss))
        return pool
    victim = max(range(len(pool.entries)), key=lambda i: (-pool.entries[i].loss, pool.entries[i].arrival))
    if loss > pool.entries[victim].loss:
        pool.entries[victim] = pool.make_entry(batch, loss)
    return pool


def pool_update_easy(pool, batch, loss, threshold):
    """Mirror of pool_update_hard keeping the lowest losses below threshold"""
    if not pool.full:
        if loss < threshold:
            pool.entries.append(pool.make_entry(batch, loss))
        return pool
    victim = max(range(len(pool.entries)), key=lambda i: (pool.entries[i].loss, pool.entries[i].arrival))
    if loss < pool.entries[victim].loss:
        pool.entries[victim] = pool.make_entry(batch, loss)
    return pool


def pool_fill_random(batches, capacity, seed=None, pool=None):
    """
    Fill a pool with a uniform sample of batches, without replacement

    Args:
        batches (dict): batch_id -> dataset indices
        capacity (int): Pool capacity N_S
        seed: Seed or numpy Generator

    Returns:
        SamplePool
    """
    pool = pool if pool is not None else SamplePool(capacity)
    rng = np.random.default_rng(seed)
    batch_ids = list(batches)
    chosen = rng.choice(len(batch_ids), size=min(capacity, len(batch_ids)), replace=False)
    for position in chosen:
        batch_id = batch_ids[int(position)]
        pool.entries.append(pool.make_entry((batch_id, batches[batch_id]), None))
    return pool


@dataclass
class BatchRecord:
    epoch: int
    batch_id: int
    loss: float
    pooled: bool = False
    replayed: bool = False
    replay_loss: Optional[float] = None
    pool_size: int = 0


@dataclass
class EpochReport:
    """Per-batch losses, pool history and replays of one epoch"""
    epoch: int
    strategy: str
    threshold: Optional[float]
    batches: List[BatchRecord] = field(default_factory=list)
    pool_history: List[List[int]] = field(default_factory=list)
    optimizer_steps: int = 0

    @property
    def mean_loss(self):
        return float(np.mean([b.loss for b in self.batches])) if self.batches else float('nan')

    @property
    def replay_count(self):
        return sum(b.replayed for b in self.batches)

    def to_frame(self):
        return pd.DataFrame([asdict(b) for b in self.batches], columns=REPORT_COLUMNS)


def write_epoch_reports(path, reports):
    """Write every batch of every report as JSON lines"""
    frames = [report.to_frame() for report in reports]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=REPORT_COLUMNS)
    frame.to_json(path, orient='records', lines=True)


class OversamplingTrainer:
    """
    SGD training with per-epoch sample-pool replay

    Every batch takes its normal optimizer step. Depending on the strategy
    the batch is also offered to the pool; after the last batch each pooled
    batch is run once more (forward, backward, step) and the pool is cleared.
    """

    def __init__(self, model, dataset, config=None, seed=0):
        if len(dataset) == 0:
            raise ValueError("Training set is empty")
        self.model = model
        self.dataset = dataset
        self.config = config or TrainConfig()
        self.seed = seed
        self.optimizer = torch.optim.SGD(
            model.parameters(),
            lr=self.config.learning_rate,
            momentum=self.config.momentum,
            weight_decay=self.config.weight_decay,
        )
        self.pool = SamplePool(self.config.pool_size)
        self.epoch = 0
        self.optimizer_steps = 0
        self.previous_mean = None
        self.reports = []

    @property
    def focal_gamma(self):
        return self.config.focal_gamma if self.config.strategy == 'focal' else None

    def threshold(self):
        """Fixed threshold when configured, else last epoch's mean batch loss"""
        if self.config.threshold is not None:
            return self.config.threshold
        return self.previous_mean

    def epoch_batches(self, epoch):
        """Dataset index batches of an epoch, shuffled by (seed, epoch)"""
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
        size = self.config.batch_size
        return [tuple(int(i) for i in order[start:start + size]) for start in range(0, len(order), size)]

    def compute_loss(self, indices):
        images, boxes, labels, _ = collate_detections([self.dataset[i] for i in indices])
        output = self.model(images)
        anchors = self.model.anchors
        pairs = [detection_loss(output.loc[b], output.conf[b], anchors, boxes[b], labels[b],
                                focal_gamma=self.focal_gamma)
                 for b in range(images.shape[0])]
        return batch_loss(pairs)

    def step(self, indices, epoch, batch_id):
        self.model.train()
        self.optimizer.zero_grad()
        loss = self.compute_loss(indices)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"Non-finite loss {value} at epoch {epoch}, batch {batch_id}")
        loss.backward()
        self.optimizer.step()
        self.optimizer_steps += 1
        return value

    def train_epoch(self):
        """
        Run one epoch including the replay of pooled batches

        Returns:
            EpochReport
        """
        epoch = self.epoch
        strategy = self.config.strategy
        batches = self.epoch_batches(epoch)
        threshold = self.threshold()
        steps_before = self.optimizer_steps
        report = EpochReport(epoch, strategy, threshold)
        self.pool.clear()

        if strategy == 'random':
            pool_fill_random(dict(enumerate(batches)), self.config.pool_size,
                             np.random.default_rng([self.seed, epoch, 1]), pool=self.pool)
        update = {'hard': pool_update_hard, 'easy': pool_update_easy}.get(strategy)

        for batch_id, indices in enumerate(batches):
            loss = self.step(indices, epoch, batch_id)
            record = BatchRecord(epoch, batch_id, loss)
            if update is not None and threshold is not None:
                update(self.pool, (batch_id, indices), loss, threshold)
            record.pooled = batch_id in self.pool
            record.pool_size = len(self.pool)
            report.batches.append(record)
            report.pool_history.append(self.pool.batch_ids)

        # Pool is frozen while replaying
        for entry in sorted(self.pool.entries, key=lambda e: e.batch_id):
            record = report.batches[entry.batch_id]
            record.replayed = True
            record.replay_loss = self.step(entry.indices, epoch, entry.batch_id)
        self.pool.clear()

        report.optimizer_steps = self.optimizer_steps - steps_before
        self.previous_mean = report.mean_loss
        self.reports.append(report)
        self.epoch += 1
        return report

    def fit(self, epochs=None, on_epoch_end=None):
        """
        Train for several epochs

        Args:
            epochs (int): Defaults to config.epochs
            on_epoch_end (callable): Called with each EpochReport

        Returns:
            list[EpochReport]
        """
        epochs = epochs or self.config.epochs
        reports = []
        for _ in range(epochs):
            report = self.train_epoch()
            reports.append(report)
            print(f"✓ Epoch {report.epoch + 1}/{epochs}: mean loss {report.mean_loss:.4f}, "
                  f"replayed {report.replay_count} batches")
            if on_epoch_end is not None:
                on_epoch_end(report)
        return reports
