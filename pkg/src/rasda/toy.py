"""Data-parallel SGD/Adam on small synthetic least-squares problems.

Workers are simulated inside one process: every step, each of the N workers
computes the gradient of the *mean* squared error over its own local batch,
the N gradients are averaged, and one optimiser update is applied. Because
the loss is a mean over samples and all local batches have the same size,
the averaged gradient equals the gradient over the union batch, which makes
training at a fixed global batch size independent of N up to rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from rasda.core import Configuration, TrialResult
from rasda.dynamics import scaled_lr

CHECKPOINT_FORMAT = "rasda-toy-checkpoint/1"


class ToyTrainerError(RuntimeError):
    pass


class TooManyWorkers(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class DivergedNaN(ToyTrainerError):
    pass


class ZeroGradient(ArithmeticError):
    pass


@dataclass(frozen=True)
class ToyDataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.shape != (self.inputs.shape[0],):
            raise DimensionMismatch(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx: np.ndarray) -> "ToyDataset":
        return ToyDataset(self.inputs[idx], self.targets[idx])


@dataclass(frozen=True)
class ToyProblemConfig:
    n_train: int = 4096
    n_val: int = 1024
    dim: int = 16
    kind: str = "linear"
    label_noise: float = 0.5
    # feature scales fall geometrically to this value (sets the conditioning)
    min_feature_scale: float = 0.1
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown toy problem kind {self.kind!r}")
        if self.n_train < 1 or self.n_val < 1 or self.dim < 1:
            raise ValueError("toy problem sizes must be positive")


@dataclass(frozen=True)
class ToyProblem:
    train: ToyDataset
    val: ToyDataset
    w_true: np.ndarray


def make_problem(cfg: ToyProblemConfig, seed: int) -> ToyProblem:
    """Seeded ground truth plus independent train and validation draws."""
    rng = np.random.default_rng([seed, 7919])
    scales = np.geomspace(1.0, cfg.min_feature_scale, cfg.dim)
    n_features = cfg.dim if cfg.kind == "linear" else 2 * cfg.dim
    w_true = rng.normal(size=n_features)

    def draw(n: int) -> ToyDataset:
        x = rng.normal(size=(n, cfg.dim)) * scales
        if cfg.kind == "quadratic":
            x = np.hstack([x, (x * x - scales**2) / np.sqrt(2.0)])
        y = x @ w_true + cfg.label_noise * rng.normal(size=n)
        return ToyDataset(x, y)

    return ToyProblem(draw(cfg.n_train), draw(cfg.n_val), w_true)


def shard_indices(n_samples: int, n: int, seed: Optional[int] = None) -> List[np.ndarray]:
    """Strided shards of a seeded permutation; sizes differ by at most one.

    Worker i owns positions i, i+N, i+2N, ... so that the i-th slice of every
    local batch, taken together, is one contiguous block of the permutation.
    """
    if n < 1:
        raise ValueError(f"need at least one worker, got {n}")
    if n > n_samples:
        raise TooManyWorkers(f"{n} workers for {n_samples} samples")
    order = np.arange(n_samples) if seed is None else np.random.default_rng(seed).permutation(n_samples)
    return [order[i::n] for i in range(n)]


def shard_dataset(dataset: ToyDataset, n: int, seed: Optional[int] = None) -> List[ToyDataset]:
    return [dataset.subset(idx) for idx in shard_indices(len(dataset), n, seed)]


def allreduce_average(local_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the worker gradients, summed sequentially in worker order."""
    if len(local_grads) == 0:
        raise ValueError("no gradients to average")
    first = np.asarray(local_grads[0], dtype=np.float64)
    total = first.copy()
    for g in local_grads[1:]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != first.shape:
            raise DimensionMismatch(f"gradient shapes {first.shape} and {g.shape}")
        total += g
    return total / len(local_grads)


def mse_loss(w: np.ndarray, data: ToyDataset) -> float:
    r = data.inputs @ w - data.targets
    return 0.5 * float(np.mean(r * r))


def mse_grad(w: np.ndarray, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    r = inputs @ w - targets
    return inputs.T @ r / inputs.shape[0]


def per_sample_grads(w: np.ndarray, data: ToyDataset) -> np.ndarray:
    r = data.inputs @ w - data.targets
    return data.inputs * r[:, None]


@dataclass(frozen=True)
class GnsEstimate:
    trace_sigma: float
    grad_norm_sq: float
    gns: float


def estimate_gns(
    w: np.ndarray,
    dataset: ToyDataset,
    probe_size: int = 256,
    seed: int = 0,
    loss_scale: float = 1.0,
) -> GnsEstimate:
    """Gradient noise scale ``tr(Sigma) / |G|^2`` on a random probe.

    G is the mean per-sample gradient over the probe and tr(Sigma) the
    unbiased (m-1) estimate of the per-sample covariance trace.
    """
    if probe_size < 2:
        raise ValueError(f"probe_size must be >= 2, got {probe_size}")
    m = min(probe_size, len(dataset))
    if m < 2:
        raise ValueError("dataset too small for a GNS probe")
    idx = np.random.default_rng(seed).permutation(len(dataset))[:m]
    grads = loss_scale * per_sample_grads(w, dataset.subset(idx))
    return gns_from_grads(grads)


def gns_from_grads(grads: np.ndarray) -> GnsEstimate:
    m = grads.shape[0]
    if m < 2:
        raise ValueError("need at least two per-sample gradients")
    mean = grads.mean(axis=0)
    norm_sq = float(mean @ mean)
    dev = grads - mean
    trace = float(np.sum(dev * dev)) / (m - 1)
    if norm_sq < 1e-30:
        raise ZeroGradient(f"mean gradient norm^2 {norm_sq:.3g} is zero")
    return GnsEstimate(trace, norm_sq, trace / norm_sq)


@dataclass
class ModelState:
    w: np.ndarray
    velocity: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def check_finite(self) -> None:
        for name in ("w", "velocity", "m", "v"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DivergedNaN(f"non-finite entries in {name}")


@dataclass
class LrState:
    """Anchor of the current warm-up segment."""

    scale: float = 1.0
    previous_lr: float = 0.0
    rescale_epoch: float = 0.0
    warmup_epochs: float = 0.0
    last_lr: float = 0.0


class ToyTrainer:
    """One trial trained data-parallel on a :class:`ToyProblem`.

    Exactly one of ``local_batch_size`` (global batch grows with the worker
    count) or ``global_batch_size`` (split evenly across workers) is fixed.
    Learning-rate scale = global batch / global batch at first launch.
    """

    def __init__(
        self,
        config: Union[Configuration, Mapping],
        problem: ToyProblem,
        workers: int = 1,
        local_batch_size: Optional[int] = None,
        global_batch_size: Optional[int] = None,
        seed: int = 0,
        momentum: float = 0.9,
    ):
        if (local_batch_size is None) == (global_batch_size is None):
            raise ValueError("fix exactly one of local_batch_size or global_batch_size")
        self.config = dict(config.to_dict() if isinstance(config, Configuration) else config)
        self.lr = float(self.config["lr"])
        self.optimizer = str(self.config.get("optimizer", "sgd"))
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.weight_decay = float(self.config.get("weight_decay", 0.0))
        self.rescale_warmup = int(self.config.get("rescale_warmup", 1))
        self.problem = problem
        self.local_batch_size = local_batch_size
        self.fixed_global = global_batch_size
        self.seed = seed
        self.momentum = momentum
        self.epoch = 0
        self.workers = 0
        self.lr_history: List[float] = []
        dim = problem.train.inputs.shape[1]
        self.state = ModelState(w=np.zeros(dim))
        if self.optimizer == "sgd":
            self.state.velocity = np.zeros(dim)
        else:
            self.state.m = np.zeros(dim)
            self.state.v = np.zeros(dim)
        self._set_workers(workers)
        self.initial_global = self.global_batch_size
        self.lr_state = LrState(
            scale=1.0,
            previous_lr=0.0,
            rescale_epoch=0.0,
            warmup_epochs=float(self.config.get("initial_warmup", 0)),
        )

    @property
    def global_batch_size(self) -> int:
        if self.fixed_global is not None:
            return self.fixed_global
        return self.local_batch_size * self.workers

    def _set_workers(self, workers: int) -> None:
        if workers < 1:
            raise ValueError(f"need at least one worker, got {workers}")
        if workers > len(self.problem.train):
            raise TooManyWorkers(f"{workers} workers for {len(self.problem.train)} samples")
        if self.fixed_global is not None and self.fixed_global % workers:
            raise ValueError(f"global batch {self.fixed_global} not divisible by {workers} workers")
        self.workers = workers
        if self.global_batch_size > len(self.problem.train):
            raise ValueError(f"global batch {self.global_batch_size} exceeds the training set")

    def set_workers(self, workers: int) -> None:
        """Relaunch on a new worker count; re-scales the LR with a warm-up."""
        if workers == self.workers:
            return
        self._set_workers(workers)
        scale = self.global_batch_size / self.initial_global
        if scale != self.lr_state.scale:
            self.lr_state = LrState(
                scale=scale,
                previous_lr=self.lr_state.last_lr,
                rescale_epoch=float(self.epoch),
                warmup_epochs=float(self.rescale_warmup),
                last_lr=self.lr_state.last_lr,
            )

    def current_lr(self, epoch_position: float) -> float:
        s = self.lr_state
        return scaled_lr(
            self.lr,
            s.scale,
            self.optimizer,
            s.warmup_epochs,
            epoch_position - s.rescale_epoch,
            s.previous_lr,
        )

    def _step(self, grad: np.ndarray, lr: float) -> None:
        st = self.state
        if self.weight_decay:
            grad = grad + self.weight_decay * st.w
        if self.optimizer == "sgd":
            st.velocity = self.momentum * st.velocity + grad
            st.w = st.w - lr * st.velocity
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            st.t += 1
            st.m = b1 * st.m + (1 - b1) * grad
            st.v = b2 * st.v + (1 - b2) * grad * grad
            m_hat = st.m / (1 - b1**st.t)
            v_hat = st.v / (1 - b2**st.t)
            st.w = st.w - lr * m_hat / (np.sqrt(v_hat) + eps)

    def run_epoch(self) -> float:
        """One pass over the training set; returns the validation loss."""
        train = self.problem.train
        n = self.workers
        bs = self.global_batch_size
        lb = bs // n
        steps = len(train) // bs
        perm = np.random.default_rng([self.seed, self.epoch]).permutation(len(train))
        shards = [perm[i::n] for i in range(n)]
        for s in range(steps):
            local = []
            for shard in shards:
                idx = shard[s * lb : (s + 1) * lb]
                local.append(mse_grad(self.state.w, train.inputs[idx], train.targets[idx]))
            grad = allreduce_average(local)
            lr = self.current_lr(self.epoch + (s + 1) / steps)
            self.lr_state.last_lr = lr
            self.lr_history.append(lr)
            self._step(grad, lr)
        self.epoch += 1
        self.state.check_finite()
        loss = mse_loss(self.state.w, self.problem.val)
        if not math.isfinite(loss):
            raise DivergedNaN(f"validation loss {loss} at epoch {self.epoch}")
        return loss

    # -- checkpoints -------------------------------------------------------

    def checkpoint(self) -> str:
        """JSON checkpoint: parameters, optimiser state, epoch and LR anchor."""
        st = self.state

        def arr(a):
            return None if a is None else [float(x) for x in a]

        doc = {
            "format": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "workers": self.workers,
            "initial_global_batch": self.initial_global,
            "w": arr(st.w),
            "optimizer": {
                "name": self.optimizer,
                "velocity": arr(st.velocity),
                "m": arr(st.m),
                "v": arr(st.v),
                "t": st.t,
            },
            "lr_state": vars(self.lr_state).copy(),
        }
        return json.dumps(doc, sort_keys=True)

    def restore(self, text: str) -> None:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ToyTrainerError(f"unsupported checkpoint format {doc.get('format')!r}")
        if doc["optimizer"]["name"] != self.optimizer:
            raise ToyTrainerError("checkpoint optimiser does not match the configuration")

        def arr(a):
            return None if a is None else np.array(a, dtype=np.float64)

        opt = doc["optimizer"]
        self.state = ModelState(
            w=arr(doc["w"]), velocity=arr(opt["velocity"]), m=arr(opt["m"]), v=arr(opt["v"]), t=opt["t"]
        )
        self.epoch = doc["epoch"]
        self._set_workers(doc["workers"])
        self.initial_global = doc["initial_global_batch"]
        self.lr_state = LrState(**doc["lr_state"])


WorkerSchedule = Union[int, Mapping[int, int], Callable[[int], int]]


def _workers_for(schedule: WorkerSchedule, epoch: int) -> int:
    """Workers for 0-based ``epoch``; mappings list the epoch of each change."""
    if isinstance(schedule, int):
        return schedule
    if callable(schedule):
        return schedule(epoch)
    changes = sorted(schedule.items())
    current = changes[0][1]
    for start, w in changes:
        if start <= epoch:
            current = w
    return current


def train(
    config: Union[Configuration, Mapping],
    problem: ToyProblem,
    workers: WorkerSchedule,
    epochs: int,
    local_batch_size: Optional[int] = None,
    global_batch_size: Optional[int] = None,
    seed: int = 0,
    trial_id: int = 0,
    momentum: float = 0.9,
    on_epoch: Optional[Callable[[ToyTrainer, TrialResult], bool]] = None,
) -> List[TrialResult]:
    """Train for ``epochs`` epochs following a worker schedule.

    ``on_epoch`` is called after every epoch and may return False to stop
    early (the hook a scheduler uses). A divergence ends training with a
    final NaN-metric result.
    """
    trainer = ToyTrainer(
        config,
        problem,
        workers=_workers_for(workers, 0),
        local_batch_size=local_batch_size,
        global_batch_size=global_batch_size,
        seed=seed,
        momentum=momentum,
    )
    results = []
    for e in range(epochs):
        trainer.set_workers(_workers_for(workers, e))
        bs = trainer.global_batch_size
        try:
            loss = trainer.run_epoch()
        except DivergedNaN:
            results.append(TrialResult(trial_id, e + 1, float("nan"), 0.0, bs))
            break
        result = TrialResult(trial_id, e + 1, loss, 0.0, bs)
        results.append(result)
        if on_epoch is not None and on_epoch(trainer, result) is False:
            break
    return results
