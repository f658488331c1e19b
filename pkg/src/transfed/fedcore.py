"""Federated-averaging engine: local training, weighted aggregation and the
synchronous round loop, all runnable in process.

One round broadcasts the global parameters to every client, trains each
client for ``epochs`` local epochs of minibatch Adam, and aggregates the
returned parameter sets weighted by training-set size:

    global = sum_k (n_k / n) * params_k,   n = sum_k n_k

All clients participate in every round and aggregation waits for all of
them. Optimizer state is not aggregated; each round starts with fresh Adam
accumulators. Every source of randomness is an explicit seed, so identical
configurations reproduce bit-identical histories and parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import metrics as _metrics
from .data import AugmentConfig, Dataset, augment_batch, feature_std, split
from .layers import ShapeError, cross_entropy
from .model import Model, ModelConfig, build
from .optim import Adam
from .params import ParameterSet

# Per-round training seed for client k: client_seeds[k] + stride * round.
# Round 0 therefore trains with the bare client seed, which keeps a
# single-client round interchangeable with a centralized run.
ROUND_SEED_STRIDE = 100003

EVAL_BATCH = 256


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the owning client id when federated."""

    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


@dataclass
class RoundConfig:
    """Hyper-parameters for local training and the round loop."""

    rounds: int = 5
    epochs: int = 100
    batch_size: int = 30
    n_clients: int = 5
    lr: float = 0.01
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    augment: bool = False
    seed: int = 0
    client_seeds: list[int] | None = None  # default: seed + k
    wire_rounding: bool = False  # float32-round params at broadcast/update

    def __post_init__(self):
        if self.rounds < 1 or self.batch_size < 1 or self.n_clients < 1:
            raise ValueError("rounds, batch_size and n_clients must be >= 1")
        # epochs == 0 makes a round a no-op, which tests rely on
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def base_seed_for(self, client_id: int) -> int:
        if self.client_seeds is not None:
            return self.client_seeds[client_id]
        return self.seed + client_id

    def seed_for(self, client_id: int, round_index: int) -> int:
        return self.base_seed_for(client_id) + ROUND_SEED_STRIDE * round_index

    def make_optimizer(self) -> Adam:
        return Adam(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, weight_decay=self.weight_decay)


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    params: ParameterSet
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError("n_k must be at least 1")


@dataclass
class EpochRecord:
    round: int
    client: int
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None


@dataclass
class RoundRecord:
    round: int
    test_acc: float
    test_loss: float
    test_acc_ovr: float


@dataclass
class TrainingHistory:
    """Per-client per-epoch curves plus per-round global test metrics."""

    epochs: list[EpochRecord] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)

    def write_client_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "client", "epoch", "train_loss", "train_acc",
                        "val_loss", "val_acc"])
            for r in self.epochs:
                w.writerow([
                    r.round, r.client, r.epoch, repr(r.train_loss),
                    repr(r.train_acc),
                    "" if r.val_loss is None else repr(r.val_loss),
                    "" if r.val_acc is None else repr(r.val_acc),
                ])

    def write_global_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "test_acc", "test_loss", "test_acc_ovr"])
            for r in self.rounds:
                w.writerow([r.round, repr(r.test_acc), repr(r.test_loss),
                            repr(r.test_acc_ovr)])


def evaluate(model: Model, dataset: Dataset):
    """Loss, overall accuracy and macro one-vs-rest accuracy on a dataset."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    losses = []
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, EVAL_BATCH):
        xb = dataset.x[start : start + EVAL_BATCH]
        yb = dataset.y[start : start + EVAL_BATCH]
        probs = model.forward(xb)
        losses.append(cross_entropy(probs, yb) * len(yb))
        preds[start : start + len(yb)] = probs.argmax(axis=1)
    loss = float(sum(losses) / n)
    acc = float((preds == dataset.y).mean())
    cm = _metrics.confusion(preds, dataset.y, model.config.n_classes)
    return loss, acc, _metrics.macro_ovr_accuracy(cm)


def _train_epochs(model: Model, train: Dataset, val: Dataset | None,
                  config: RoundConfig, seed: int, *, round_index: int,
                  client_id: int, history: list[EpochRecord]) -> None:
    """Run ``config.epochs`` epochs of minibatch Adam on the model in place."""
    rng = np.random.default_rng(seed)
    optimizer = config.make_optimizer()
    aug = None
    if config.augment:
        aug = AugmentConfig(
            jitter=model.config.jitter,
            scale_range=model.config.scale_range,
            feature_std=feature_std(train),
        )
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = train.x[idx]
            yb = train.y[idx]
            if aug is not None:
                xb = augment_batch(xb, rng, aug)
            loss, probs, grads = model.loss_and_gradients(xb, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at round {round_index} epoch {epoch}",
                    client_id=client_id,
                )
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
            optimizer.step(model.params, grads)
        val_loss = val_acc = None
        if val is not None and len(val):
            val_loss, val_acc, _ = evaluate(model, val)
        history.append(EpochRecord(
            round=round_index, client=client_id, epoch=epoch,
            train_loss=loss_sum / n, train_acc=correct / n,
            val_loss=val_loss, val_acc=val_acc,
        ))


def train_centralized(model_config: ModelConfig, train: Dataset,
                      val: Dataset | None, hyper: RoundConfig,
                      seed: int | None = None):
    """Plain minibatch training; returns (Model, TrainingHistory).

    An empty or missing validation set simply omits the validation columns.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    model = build(model_config)
    history = TrainingHistory()
    _train_epochs(model, train, val, hyper,
                  hyper.seed if seed is None else seed,
                  round_index=0, client_id=0, history=history.epochs)
    return model, history


def local_round(global_params: ParameterSet, local_dataset: Dataset,
                model_config: ModelConfig, config: RoundConfig,
                client_id: int, round_index: int,
                history: list[EpochRecord] | None = None,
                seed: int | None = None) -> ClientUpdate:
    """One client's work for one round: adopt the global parameters, train
    ``config.epochs`` epochs, report the result.

    ``n_k`` is the training-set size after the local validation holdout.
    ``seed`` overrides the derived per-round seed; networked clients pass it
    because they know only their own base seed.
    """
    if len(local_dataset) == 0:
        raise ValueError(f"client {client_id} has an empty dataset")
    if seed is None:
        seed = config.seed_for(client_id, round_index)
    if config.val_fraction > 0.0:
        train, val, _ = split(local_dataset, 1.0 - config.val_fraction,
                              config.val_fraction, 0.0, seed=seed)
    else:
        train, val = local_dataset, None
    model = build(model_config)
    model.set_params(global_params)
    records: list[EpochRecord] = []
    try:
        _train_epochs(model, train, val, config, seed,
                      round_index=round_index, client_id=client_id,
                      history=records)
    except TrainingDivergedError as exc:
        exc.client_id = client_id
        raise
    if history is not None:
        history.extend(records)
    return ClientUpdate(client_id=client_id, round=round_index,
                        params=model.params, n_k=len(train))


def fedavg(updates: list[ClientUpdate]) -> ParameterSet:
    """Sample-count-weighted mean of client parameter sets.

    Summation runs in ascending client_id order so results are
    bit-reproducible regardless of arrival order.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ValueError(f"updates span multiple rounds: {sorted(rounds)}")
    names = updates[0].params.names
    shapes = updates[0].params.shapes()
    for u in updates[1:]:
        if u.params.names != names or u.params.shapes() != shapes:
            raise ShapeError(
                f"client {u.client_id} parameters do not match client "
                f"{updates[0].client_id}"
            )
    n = sum(u.n_k for u in updates)
    out = [(name, np.zeros(shapes[name])) for name in names]
    acc = dict(out)
    for u in updates:
        w = u.n_k / n
        for name, t in u.params:
            acc[name] += w * t
    return ParameterSet([(name, acc[name]) for name in names])


def run_simulation(model_config: ModelConfig, round_config: RoundConfig,
                   partitions: list[Dataset],
                   test_set: Dataset | None = None):
    """Synchronous federated averaging over in-process clients.

    Returns (final global ParameterSet, TrainingHistory). With
    ``wire_rounding`` set, parameters pass through float32 at every
    broadcast and update, matching what the networked deployment computes
    bit for bit.
    """
    if len(partitions) != round_config.n_clients:
        raise ValueError(
            f"expected {round_config.n_clients} partitions, got {len(partitions)}"
        )
    history = TrainingHistory()
    global_params = build(model_config).params
    for round_index in range(round_config.rounds):
        broadcast = (
            global_params.quantized_f32()
            if round_config.wire_rounding else global_params
        )
        updates = []
        for client_id, part in enumerate(partitions):
            update = local_round(broadcast, part, model_config, round_config,
                                 client_id, round_index, history.epochs)
            if round_config.wire_rounding:
                update.params = update.params.quantized_f32()
            updates.append(update)
        global_params = fedavg(updates)
        if test_set is not None and len(test_set):
            model = build(model_config)
            model.set_params(global_params)
            loss, acc, ovr = evaluate(model, test_set)
            history.rounds.append(RoundRecord(
                round=round_index, test_acc=acc, test_loss=loss,
                test_acc_ovr=ovr,
            ))
    return global_params, history
