"""SGD training loop for the sequential CNN.

Reference mode is strictly sequential; the shuffle stream is owned by the
trainer and independent of the weight-init seed, so data order and init
randomness never entangle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPES, Tape, Tensor, backward, sgd_step, softmax_cross_entropy, zero_grads
from .network import NetworkParams, NetworkSpec, forward
from .poison import Dataset


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "acc"])
            for i, (loss, acc) in enumerate(zip(self.losses, self.accuracies)):
                writer.writerow([i, repr(loss), repr(acc)])


class DivergenceError(RuntimeError):
    def __init__(self, step: int, epoch: int):
        super().__init__(f"non-finite loss at step {step} (epoch {epoch}); training aborted")
        self.step = step
        self.epoch = epoch


def train(spec: NetworkSpec, params: NetworkParams, dataset: Dataset,
          config: TrainConfig):
    """Run epochs * ceil(N / batch_size) SGD steps with seeded reshuffling.

    Batch norm runs in train mode throughout. Returns the trained params (the
    same object, updated in place) and the per-epoch history.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    dt = DTYPES[params.precision]
    rng = np.random.default_rng(config.seed)
    trainables = params.trainables()
    velocity = [np.zeros_like(p.data) for p in trainables]
    history = TrainHistory()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Tensor(dataset.images[idx], dtype=dt)
            labels = dataset.labels[idx]
            tape = Tape()
            logits, _, _ = forward(spec, params, batch, mode="train", tape=tape)
            loss = softmax_cross_entropy(logits, labels, tape=tape)
            if not np.isfinite(loss.data):
                raise DivergenceError(step, epoch)
            backward(tape, loss)
            grads = [p.grad for p in trainables]
            sgd_step(trainables, grads, config.learning_rate, config.momentum, velocity)
            zero_grads(trainables)
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            step += 1
        history.losses.append(total_loss / n)
        history.accuracies.append(correct / n)
    return params, history
