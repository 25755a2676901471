"""Minibatch training and evaluation.

Batches are drawn from a seeded shuffle that reshuffles every epoch and
drops the ragged tail, so a (seed, batch_size) pair pins the exact
sequence of examples seen.  Fractional epoch budgets resolve to
max(1, floor(frac * steps_per_epoch)) optimizer steps.
"""

from __future__ import annotations

import csv
import os

import numpy as np


class EmptySplit(ValueError):
    pass


class DivergedLoss(RuntimeError):
    pass


class Batcher:
    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, rng):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        if len(x) == 0:
            raise EmptySplit("no examples")
        if len(x) < batch_size:
            raise EmptySplit(f"{len(x)} examples cannot fill a batch of {batch_size}")
        self.x = x
        self.y = y
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(len(x))
        self._pos = 0

    @property
    def steps_per_epoch(self) -> int:
        return len(self.x) // self.batch_size

    def next_batch(self):
        if self._pos + self.batch_size > len(self.x) - (len(self.x) % self.batch_size):
            self._order = self.rng.permutation(len(self.x))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], self.y[idx]


def steps_for_fraction(n: int, batch_size: int, epochs: float) -> int:
    per = n // batch_size
    if per == 0:
        raise EmptySplit(f"{n} examples cannot fill a batch of {batch_size}")
    return max(1, int(epochs * per))


def train_steps(net, batcher: Batcher, steps: int, optimizer, record_every: int = 1):
    """Run optimizer steps; returns one record per logged step.

    Raises DivergedLoss the moment the loss stops being finite.
    """
    records = []
    for step in range(steps):
        xb, yb = batcher.next_batch()
        optimizer.zero_grad()
        loss = net.loss(xb, yb, training=True)
        val = float(loss.data)
        if not np.isfinite(val):
            raise DivergedLoss(f"loss {val} at step {step}")
        loss.backward()
        optimizer.step()
        if step % record_every == 0 or step == steps - 1:
            records.append({"step": step, "loss": val})
    return records


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def evaluate(net, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """Eval-mode mean loss and accuracy over the whole split (tail kept)."""
    if len(x) == 0:
        raise EmptySplit("no examples to evaluate")
    total_loss = 0.0
    hits = 0
    from . import autodiff as ad
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = net.forward(xb, training=False)
        loss = ad.softmax_cross_entropy(logits, yb)
        total_loss += float(loss.data) * len(xb)
        hits += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total_loss / len(x), hits / len(x)


# ---------------------------------------------------------------------------
# delimited output

def write_rows(path: str, fieldnames, rows) -> None:
    """CSV with repr-exact floats so identical runs give identical bytes."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_cell(row[k]) for k in fieldnames])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_rows(path: str):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
