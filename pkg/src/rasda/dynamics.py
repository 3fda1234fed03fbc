"""Synthetic training dynamics for the cluster simulator.

Each configuration maps to an exponential learning curve in *effective*
epochs. An epoch trained at a global batch larger than the reference batch
counts for less than one effective epoch; how much less is set by a gradient
noise scale that grows as training progresses, so large batches are cheap
late in training and expensive early on.

Learning-rate scaling for data-parallel relaunches also lives here since both
backends share it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from rasda.core import Configuration, ParamKind, ParamSpec

LR_NAMES = ("lr", "learning_rate")


def stable_hash64(*parts) -> int:
    """64-bit BLAKE2b digest of the canonical JSON encoding of ``parts``.

    The encoding is ``json.dumps(list(parts), sort_keys=True,
    separators=(",", ":"))`` in UTF-8, and the digest is read big-endian.
    Any implementation that reproduces the encoding reproduces the hash.
    """
    text = json.dumps(list(parts), sort_keys=True, separators=(",", ":"))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def unit_hash(*parts) -> float:
    """Map parts to [0, 1) via :func:`stable_hash64` (53 high bits)."""
    return (stable_hash64(*parts) >> 11) / float(1 << 53)


@dataclass(frozen=True)
class CurveParams:
    f_init: float
    f_final: float
    rate: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.f_init > self.f_final >= 0:
            raise ValueError(f"need f_init > f_final >= 0, got {self.f_init}, {self.f_final}")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def loss(self, e_effective: float) -> float:
        return self.f_final + (self.f_init - self.f_final) * math.exp(-self.rate * e_effective)


@dataclass(frozen=True)
class CurveFamily:
    """Coefficients of the configuration -> learning-curve mapping."""

    f_init: float = 2.5
    f_floor: float = 0.1
    rate0: float = 0.15
    lr_weight: float = 1.0
    other_weight: float = 0.2
    category_spread: float = 0.25
    jitter: float = 0.1
    noise_sigma: float = 0.005


def _distance(p: ParamSpec, value: float, optimum_u: float) -> float:
    if p.kind is ParamKind.LOG_FLOAT:
        # decades between the value and a log-uniform optimum
        lo, hi = math.log10(p.lo), math.log10(p.hi)
        return math.log10(value) - (lo + optimum_u * (hi - lo))
    return 2.0 * ((value - p.lo) / (p.hi - p.lo) - optimum_u)


def curve_params(
    config: Configuration,
    space: Sequence[ParamSpec],
    seed: int,
    family: CurveFamily = CurveFamily(),
) -> CurveParams:
    """Deterministic curve for ``config`` under experiment ``seed``.

    Numeric parameters sit in a quadratic bowl around a per-seed optimum
    (the learning rate weighted most); every choice value carries a per-seed
    multiplicative penalty on the final loss.
    """
    bowl = 0.0
    offsets = 1.0
    for p in space:
        v = config[p.name]
        if p.kind in (ParamKind.LOG_FLOAT, ParamKind.FLOAT):
            d = _distance(p, float(v), unit_hash(seed, "optimum", p.name))
            w = family.lr_weight if p.name in LR_NAMES else family.other_weight
            bowl += w * d * d
        else:
            offsets *= 1.0 + family.category_spread * unit_hash(seed, "choice", p.name, str(v))
    key = config.canonical()
    jitter = 1.0 + family.jitter * (2.0 * unit_hash(seed, "jitter", key) - 1.0)
    f_final = min(family.f_floor * (1.0 + bowl) * offsets * jitter, 0.95 * family.f_init)
    speed = 0.8 + 0.4 * unit_hash(seed, "speed", key)
    rate = family.rate0 * speed / (1.0 + 0.5 * bowl)
    return CurveParams(family.f_init, f_final, rate, family.noise_sigma)


@dataclass(frozen=True)
class NoiseScaleModel:
    """Noise scale ``b0 * (1 + growth * e)`` after ``e`` effective epochs."""

    b0: float = 256.0
    growth: float = 1.0

    def __post_init__(self):
        if self.b0 <= 0 or self.growth < 0:
            raise ValueError(f"need b0 > 0 and growth >= 0, got {self.b0}, {self.growth}")

    def b_noise(self, e_effective: float) -> float:
        return self.b0 * (1.0 + self.growth * e_effective)


def statistical_efficiency(bs_global: float, b_noise: float, bs_ref: float) -> float:
    """Progress per sample at ``bs_global`` relative to ``bs_ref``, in (0, 1]."""
    if bs_global <= 0 or b_noise <= 0 or bs_ref <= 0:
        raise ValueError("batch sizes and noise scale must be positive")
    if bs_global < bs_ref:
        raise ValueError(f"global batch {bs_global} below reference batch {bs_ref}")
    if bs_global == bs_ref:
        return 1.0
    return (b_noise + bs_ref) / (b_noise + bs_global)


def advance_curve(
    curve: CurveParams,
    e_effective: float,
    bs_global: float,
    noise: NoiseScaleModel,
    bs_ref: float,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """Train one epoch; returns ``(new_e_effective, observed_loss)``."""
    if e_effective < 0:
        raise ValueError("e_effective must be >= 0")
    e_new = e_effective + statistical_efficiency(bs_global, noise.b_noise(e_effective), bs_ref)
    loss = curve.loss(e_new)
    if curve.noise_sigma > 0 and rng is not None:
        loss += float(rng.normal(0.0, curve.noise_sigma))
    return e_new, loss


def run_batch_schedule(
    curve: CurveParams,
    batch_sizes: Iterable[float],
    noise: NoiseScaleModel,
    bs_ref: float,
    rng: Optional[np.random.Generator] = None,
) -> List[float]:
    """Observed loss after each epoch of a per-epoch batch-size schedule."""
    e = 0.0
    losses = []
    for bs in batch_sizes:
        e, loss = advance_curve(curve, e, bs, noise, bs_ref, rng)
        losses.append(loss)
    return losses


def doubling_schedule(milestones: Sequence[int], max_t: int, bs_ref: int, sf: int = 2) -> List[int]:
    """Per-epoch global batch size of a trial promoted at every milestone."""
    out = []
    level = 0
    for epoch in range(1, max_t + 1):
        out.append(bs_ref * sf**level)
        if epoch in milestones and level < len(milestones) - 1:
            level += 1
    return out


def equal_wallclock_losses(
    curve: CurveParams,
    batch_sizes: Sequence[float],
    epoch_seconds: Sequence[float],
    reference_epoch_seconds: float,
    noise: NoiseScaleModel,
    bs_ref: float,
) -> Tuple[float, float]:
    """Noiseless final losses of a batch schedule and of constant ``bs_ref``
    training given the same wall-clock budget.

    ``epoch_seconds[i]`` is the duration of epoch i under the schedule; the
    constant-batch run gets ``sum(epoch_seconds) / reference_epoch_seconds``
    (possibly fractional) unit-efficiency epochs.
    """
    if len(batch_sizes) != len(epoch_seconds):
        raise ValueError("one duration per scheduled epoch is required")
    if reference_epoch_seconds <= 0:
        raise ValueError("reference_epoch_seconds must be positive")
    e = 0.0
    for bs in batch_sizes:
        e, _ = advance_curve(curve, e, bs, noise, bs_ref)
    budget_epochs = math.fsum(epoch_seconds) / reference_epoch_seconds
    return curve.loss(e), curve.loss(budget_epochs)


# --------------------------------------------------------------------------
# Learning-rate scaling
# --------------------------------------------------------------------------


def target_lr(base_lr: float, n: float, optimizer: str) -> float:
    """Linear scaling for SGD, square-root scaling for Adam."""
    if base_lr <= 0:
        raise ValueError(f"base_lr must be positive, got {base_lr}")
    if n < 1:
        raise ValueError(f"scale factor must be >= 1, got {n}")
    if optimizer == "sgd":
        return base_lr * n
    if optimizer == "adam":
        return base_lr * math.sqrt(n)
    raise ValueError(f"unknown optimizer {optimizer!r}")


def scaled_lr(
    base_lr: float,
    n: float,
    optimizer: str,
    warmup_epochs: float,
    epochs_since_rescale: float,
    previous_lr: float = 0.0,
) -> float:
    """Learning rate ``epochs_since_rescale`` epochs after moving to scale ``n``.

    ``n`` is the data-parallel scale relative to the trial's first launch
    (equal to the worker ratio at a fixed local batch size). During the
    warm-up the rate moves linearly from ``previous_lr`` (the rate in use at
    the rescale; 0 at trial start) to the target; afterwards it equals the
    target exactly.
    """
    target = target_lr(base_lr, n, optimizer)
    if warmup_epochs <= 0 or epochs_since_rescale >= warmup_epochs:
        return target
    frac = max(epochs_since_rescale, 0.0) / warmup_epochs
    return previous_lr + (target - previous_lr) * frac
