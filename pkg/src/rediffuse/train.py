"""Training loop: epochs over a fixed set of pairs, Adam, step-decayed learning rate."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import dataio
from .diffusion import NoiseSchedule, dc_anchor, make_schedule, training_loss
from .unet import UNetConfig, init_params, unet_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch: int = 8
    lr: float = 2e-4
    lr_decay: float = 0.99
    decay_every: int = 1000
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient goes non-finite; carries the last good state."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    adam: ad.AdamState
    epoch: int  # completed epochs
    history: list[EpochRecord]


def init_state(cfg: UNetConfig, tcfg: TrainConfig, dtype=np.float32) -> TrainState:
    rng = np.random.default_rng([tcfg.seed, 0])
    return TrainState(init_params(cfg, rng, dtype), ad.AdamState(lr=tcfg.lr), 0, [])


def train_step(params, adam: ad.AdamState, cfg: UNetConfig, sched: NoiseSchedule,
               gt, a, b, rng) -> tuple[dict[str, np.ndarray], float]:
    tape = ad.Tape()
    P = tape.params(params)

    def model(I_A, I_B, F_t, t):
        return unet_forward(tape, P, I_A, I_B, F_t, t, cfg)

    if cfg.dc_anchor:
        model = dc_anchor(model, sched)
    loss = training_loss(model, gt, a, b, sched, rng)
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    grads = ad.backward(tape, loss)
    return ad.adam_step(adam, params, grads), value


def train(data, cfg: UNetConfig, tcfg: TrainConfig, sched: NoiseSchedule | None = None,
          state: TrainState | None = None,
          on_epoch: Callable[[EpochRecord, TrainState], None] | None = None) -> TrainState:
    """Train on ``data = (gt, a, b)``, each ``(N, H, W, 1)``, up to ``tcfg.epochs`` epochs.

    Passing a ``state`` resumes from its completed epoch count.  Every epoch
    draws its shuffling and noise from a generator keyed on ``(seed, epoch)``
    so a resumed run reproduces an uninterrupted one exactly.
    """
    sched = sched or make_schedule(cfg.T)
    if sched.T != cfg.T:
        raise ValueError(f"schedule has T={sched.T}, model config T={cfg.T}")
    gt, a, b = data
    n = gt.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    state = state or init_state(cfg, tcfg, gt.dtype)
    for epoch in range(state.epoch + 1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        lr = ad.lr_at(epoch - 1, tcfg.lr, tcfg.lr_decay, tcfg.decay_every)
        state.adam.lr = lr
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        params = state.params
        for s in range(0, n, tcfg.batch):
            idx = order[s:s + tcfg.batch]
            try:
                params, value = train_step(params, state.adam, cfg, sched, gt[idx], a[idx], b[idx], rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch starting at {s}: {exc}", state) from exc
            total += value * len(idx)
        state.params = params
        state.epoch = epoch
        rec = EpochRecord(epoch, total / n, lr, time.perf_counter() - t0)
        state.history.append(rec)
        log.info("epoch %d loss %.6f lr %.3g (%.1fs)", rec.epoch, rec.loss, rec.lr, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec, state)
    return state


# ---------------------------------------------------------------------------
# checkpoint glue

def state_to_checkpoint(state: TrainState, cfg: UNetConfig, sched: NoiseSchedule,
                        tcfg: TrainConfig, include_optimizer: bool = True):
    header = {
        "model": cfg.to_dict(),
        "schedule": sched.params(),
        "train": asdict(tcfg),
        "epoch": state.epoch,
        "adam_step": state.adam.step,
    }
    tensors = {f"param/{k}": v for k, v in state.params.items()}
    if include_optimizer:
        for k in state.params:
            if k in state.adam.m:
                tensors[f"adam_m/{k}"] = state.adam.m[k]
                tensors[f"adam_v/{k}"] = state.adam.v[k]
    return header, tensors


def config_from_header(header: dict) -> tuple[UNetConfig, NoiseSchedule]:
    try:
        cfg = UNetConfig(**header["model"])
        s = header["schedule"]
        sched = make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise dataio.CheckpointError(f"bad checkpoint header: {exc}") from None
    return cfg, sched


def state_from_checkpoint(header: dict, tensors: dict[str, np.ndarray]):
    cfg, sched = config_from_header(header)
    params = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
    expected = init_params(cfg, np.random.default_rng(0))
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))[:3]
        extra = sorted(set(params) - set(expected))[:3]
        raise dataio.CheckpointError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise dataio.CheckpointError(f"{k}: shape {params[k].shape} but config needs {v.shape}")
    adam = ad.AdamState(step=int(header.get("adam_step", 0)))
    for k in params:
        if f"adam_m/{k}" in tensors:
            adam.m[k] = tensors[f"adam_m/{k}"]
            adam.v[k] = tensors[f"adam_v/{k}"]
    state = TrainState(params, adam, int(header.get("epoch", 0)), [])
    return state, cfg, sched
