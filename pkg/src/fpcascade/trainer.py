"""Initialisation, AdamW, cosine annealing, slice sampling and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadEpoch, InsufficientSlices, MissingGrad, NonFiniteLoss, TrainerError


def he_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean normal weights with variance 2 / fan_in."""
    if fan_in < 1:
        raise TrainerError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass(frozen=True)
class AdamWConfig:
    lr_max: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimState:
    hyper: AdamWConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def create(cls, params: dict, hyper: AdamWConfig | None = None) -> "OptimState":
        hyper = hyper or AdamWConfig()
        return cls(
            hyper,
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(params: dict, state: OptimState, lr_t: float) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``params`` maps names to tensors holding ``.data`` and ``.grad``.
    """
    if lr_t < 0:
        raise TrainerError(f"learning rate must be >= 0, got {lr_t}")
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(f"parameter {name} has no gradient")
    h = state.hyper
    state.t += 1
    c1 = 1.0 - h.beta1 ** state.t
    c2 = 1.0 - h.beta2 ** state.t
    for name, p in params.items():
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= h.beta1
        m += (1.0 - h.beta1) * p.grad
        v *= h.beta2
        v += (1.0 - h.beta2) * p.grad * p.grad
        update = (m / c1) / (np.sqrt(v / c2) + h.eps) + h.weight_decay * p.data
        p.data -= lr_t * update


def cosine_lr(t: float, total: int, lr_max: float) -> float:
    """Half-cosine decay from ``lr_max`` at t=0 to 0 at t=total."""
    if total < 1 or not 0 <= t <= total:
        raise BadEpoch(f"epoch {t} outside [0, {total}]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * t / total))


# slice sampling --------------------------------------------------------------

def sample_slices(corpus: list, module_kind: str, rng: np.random.Generator,
                  shuffle: bool = True) -> list:
    """Slices for one epoch, shuffled.

    GSM: every tumor slice.  LRM: every tumor slice plus an equal number of
    tumor-free slices drawn without replacement.
    """
    tumor = [s for s in corpus if s.has_tumor]
    if not tumor:
        raise InsufficientSlices("corpus has no tumor slices")
    kind = module_kind.upper()
    if kind == "GSM":
        chosen = list(tumor)
    elif kind == "LRM":
        healthy = [s for s in corpus if not s.has_tumor]
        if len(healthy) < len(tumor):
            raise InsufficientSlices(
                f"LRM needs {len(tumor)} tumor-free slices, corpus has {len(healthy)}")
        picks = rng.choice(len(healthy), size=len(tumor), replace=False)
        chosen = tumor + [healthy[i] for i in sorted(picks)]
    else:
        raise TrainerError(f"unknown module kind {module_kind!r}")
    if not shuffle:
        return chosen
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


# training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainPlan:
    module_kind: str = "GSM"
    batch_size: int = 8
    total_epochs: int = 160
    seed: int = 0
    optim: AdamWConfig = AdamWConfig()
    augment: bool = True
    shuffle: bool = True
    stop_window: int = 10
    stop_tol: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.total_epochs < 1:
            raise TrainerError("total_epochs must be >= 1")
        if self.module_kind.upper() not in ("GSM", "LRM"):
            raise TrainerError(f"module_kind must be GSM or LRM, got {self.module_kind!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    components: dict

    def line(self) -> str:
        comps = " ".join(f"{k}={v!r}" for k, v in sorted(self.components.items()))
        return f"epoch={self.epoch} lr={self.lr!r} loss={self.loss!r} {comps}".rstrip()


@dataclass
class TrainResult:
    state: dict
    history: list
    stopped_early: bool = False

    def history_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


def converged(losses: list[float], window: int, tol: float) -> bool:
    """True once the epoch-mean loss moved less than ``tol`` (relative) over ``window`` epochs."""
    if len(losses) <= window:
        return False
    recent = losses[-(window + 1):]
    spread = max(recent) - min(recent)
    return spread < tol * max(abs(recent[-1]), 1e-12)


def _batch_arrays(batch, kind):
    # local import: networks imports he_init from this module
    from .networks import make_gsm_input, make_lrm_input

    pet = np.stack([s.pet for s in batch])
    ct = np.stack([s.ct for s in batch])
    if kind == "GSM":
        x = make_gsm_input(pet, ct)
    else:
        if any(s.prior is None for s in batch):
            raise TrainerError("LRM training slices need a first-stage probability prior")
        x = make_lrm_input(pet, ct, np.stack([s.prior for s in batch]))
    y = np.stack([s.mask for s in batch])[:, None].astype(np.float64)
    return x, y


def train(net, plan: TrainPlan, corpus: list, augment_fn=None, log=None) -> TrainResult:
    """Optimise ``net`` on ``corpus`` (a list of SlicePair) according to ``plan``.

    Learning rate follows per-epoch cosine annealing.  Training stops at
    ``plan.total_epochs`` or once the epoch-mean loss has converged.
    ``log`` is called with each EpochRecord.
    """
    from .losses import loss_gsm, loss_lrm
    from .preprocess import AugmentDraw, augment

    augment_fn = augment_fn or augment
    kind = plan.module_kind.upper()
    loss_fn = loss_gsm if kind == "GSM" else loss_lrm
    rng = np.random.default_rng(plan.seed)
    state = OptimState.create(net.params, plan.optim)
    history, means = [], []
    stopped = False
    for epoch in range(plan.total_epochs):
        lr = cosine_lr(epoch, plan.total_epochs, plan.optim.lr_max)
        slices = sample_slices(corpus, kind, rng, shuffle=plan.shuffle)
        totals, comps = [], {}
        for start in range(0, len(slices), plan.batch_size):
            batch = slices[start:start + plan.batch_size]
            if plan.augment:
                batch = [augment_fn(s, AugmentDraw.sample(rng)) for s in batch]
            x, y = _batch_arrays(batch, kind)
            loss = float(net.forward({"image": x, "target": y}))
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}")
            lv = loss_fn(net.value(net.outputs["prob"]), y)
            net.backward()
            adamw_step(net.params, state, lr)
            totals.append(loss)
            for k, v in lv.components.items():
                comps.setdefault(k, []).append(v)
        mean = math.fsum(totals) / len(totals)
        rec = EpochRecord(epoch, lr, mean,
                          {k: math.fsum(v) / len(v) for k, v in comps.items()})
        history.append(rec)
        means.append(mean)
        if log is not None:
            log(rec)
        if converged(means, plan.stop_window, plan.stop_tol):
            stopped = epoch + 1 < plan.total_epochs
            break
    return TrainResult(net.state(), history, stopped)
