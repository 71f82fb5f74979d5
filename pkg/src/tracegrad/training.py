"""AdamW with per-group plans, the warmup/decay schedule and the continual phase loop.

Methods: ``vanilla`` (all parameters), ``lora`` (attention adapters only),
``mixreview`` (edits interleaved with replayed snapshot documents) and
``recadam`` (quadratic pull toward the phase-start weights). Any of them can
run under an :class:`~tracegrad.tgl.UpdatePlan`.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .model import Model, attach_lora, read_tensor_file, write_tensor_file
from .tensor_core import Tensor
from .tgl import UpdatePlan, identity_plan

log = logging.getLogger(__name__)

METHODS = ("vanilla", "lora", "mixreview", "recadam")
OPTIMIZER_MAGIC = b"TGLO"
OPTIMIZER_VERSION = 1


class TrainingError(RuntimeError):
    pass


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    epochs: float = 1.0
    total_steps: Optional[int] = None  # overrides epochs when set
    batch_size: int = 64
    micro_batch_size: int = 8
    seed: int = 0
    method: str = "vanilla"
    tgl_mode: str = "none"
    replay_ratio: float = 2.0
    replay_per_edit: bool = True  # 2:1 read as replay:edits
    recadam_lambda: float = 1e-2
    lora_rank: int = 4
    lora_alpha: Optional[float] = None

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise TrainingError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise TrainingError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.replay_ratio < 0:
            raise TrainingError("replay_ratio must be >= 0")
        if self.method not in METHODS:
            raise TrainingError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.batch_size <= 0 or self.micro_batch_size <= 0:
            raise TrainingError("batch sizes must be positive")
        if self.recadam_lambda < 0:
            raise TrainingError("recadam_lambda must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return int(round(warmup_fraction * total_steps))


def lr_at(step: int, base_lr: float, total_steps: int, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_fraction)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    anchor: Optional[Dict[str, np.ndarray]] = None


def adamw_step(
    model: Model,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    plan: Optional[UpdatePlan] = None,
) -> Dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place. Returns the applied deltas.

    Groups frozen by ``plan`` keep their values and moments. Every other
    parameter moves by ``lr * lr_scale[group]`` times the Adam direction.
    """
    plan = plan or identity_plan()
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    deltas = {}
    for name, p in model.trainable_parameters():
        g = grads.get(name)
        if g is None:
            continue
        group = model.group_of(name)
        if group in plan.frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in group {group} ({name}) at step {t}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        direction = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and p.data.ndim >= 2:
            direction = direction + cfg.weight_decay * p.data
        delta = (-(lr * plan.scale(group)) * direction).astype(p.dtype)
        p.data += delta
        deltas[name] = delta
    return deltas


def recadam_loss(base_loss: Tensor, params: Sequence[Tensor], anchor: Optional[Sequence[np.ndarray]], lam: float) -> Tensor:
    """``base_loss + lam * sum((theta - theta0)^2)`` over ``params``."""
    if anchor is None:
        raise TrainingError("RecAdam penalty needs the phase-start anchor weights")
    total = base_loss
    for p, a in zip(params, anchor):
        diff = p - Tensor(a)
        total = total + tc.sum_all(diff * diff) * lam
    return total


# ---------------------------------------------------------------------------
# data streams


def mixreview_stream(edits: Sequence, pool: Sequence, ratio: float, seed: int, replay_per_edit: bool = True) -> list:
    """All edit items once plus ``round(ratio * len(edits))`` replayed pool items, shuffled.

    With ``replay_per_edit=False`` the ratio is read the other way round
    (``round(len(edits) / ratio)`` replay items).
    """
    if replay_per_edit:
        n_replay = int(round(ratio * len(edits)))
    else:
        n_replay = 0 if ratio == 0 else int(round(len(edits) / ratio))
    if n_replay and not pool:
        raise StreamError("replay requested but the replay pool is empty")
    rng = random.Random(seed)
    if n_replay <= len(pool):
        replay = rng.sample(list(pool), n_replay)
    else:
        replay = [pool[rng.randrange(len(pool))] for _ in range(n_replay)]
    stream = list(edits) + replay
    rng.shuffle(stream)
    return stream


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


# ---------------------------------------------------------------------------
# phase loop


@dataclass
class PhaseResult:
    model: Model
    state: OptimizerState
    log: List[dict]
    total_steps: int


def steps_for(n_items: int, cfg: TrainConfig) -> int:
    if cfg.total_steps is not None:
        return cfg.total_steps
    per_epoch = max(1, -(-n_items // cfg.batch_size))
    return max(1, int(round(per_epoch * cfg.epochs)))


def _batches(n_items: int, cfg: TrainConfig, total: int) -> List[np.ndarray]:
    """Consecutive slices of concatenated per-epoch permutations."""
    rng = np.random.default_rng(cfg.seed)
    need = total * cfg.batch_size
    order = np.concatenate([rng.permutation(n_items) for _ in range(-(-need // n_items))])
    return [order[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(total)]


def prepare_model(model: Model, cfg: TrainConfig) -> Model:
    """Apply method-specific structure (LoRA adapters) to a copy of ``model``."""
    model = model.copy()
    if cfg.method == "lora" and not model.lora:
        attach_lora(model, rank=cfg.lora_rank, alpha=cfg.lora_alpha, seed=cfg.seed)
    return model


def run_phase(
    model: Model,
    sequences: Sequence[Sequence[int]],
    cfg: TrainConfig,
    plan: Optional[UpdatePlan] = None,
    pad_id: int = 0,
    state: Optional[OptimizerState] = None,
    log_every: int = 0,
    stop_at: Optional[int] = None,
) -> PhaseResult:
    """Train on tokenized ``sequences`` for ``cfg.epochs`` (or ``cfg.total_steps``) steps.

    ``model`` is not modified; the trained copy is returned. The sequence
    order is a pure function of ``cfg.seed``. For MixReview the caller passes
    the already mixed stream. Passing an ``OptimizerState`` with ``step > 0``
    resumes a phase; ``stop_at`` ends this call early at that step.
    """
    cfg.validate()
    if not sequences:
        raise TrainingError("empty training stream")
    plan = plan or identity_plan()
    model = prepare_model(model, cfg)
    plan.check_model(model)
    total = steps_for(len(sequences), cfg)
    batches = _batches(len(sequences), cfg, total)
    state = state or OptimizerState()
    named = model.trainable_parameters()
    by_tensor = {p: n for n, p in named}
    if cfg.method == "recadam" and state.anchor is None:
        state.anchor = {n: p.data.copy() for n, p in named}

    rows = []
    for step in range(state.step, total if stop_at is None else min(stop_at, total)):
        t0 = time.perf_counter()
        lr = lr_at(step, cfg.base_lr, total, cfg.warmup_fraction)
        idx = batches[step]
        chunks = [idx[i : i + cfg.micro_batch_size] for i in range(0, len(idx), cfg.micro_batch_size)]
        grads: Dict[str, np.ndarray] = {}
        loss_sum = 0.0
        for chunk in chunks:
            batch, lengths = pad_batch([sequences[i] for i in chunk], pad_id)
            loss = model.batch_lm_loss(batch, lengths)
            if len(chunks) > 1:
                loss = loss * (1.0 / len(chunks))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}; parameters left at the last good step")
            loss_sum += value
            for p, g in tc.backward(loss).items():
                name = by_tensor.get(p)
                if name is None:
                    continue
                grads[name] = grads[name] + g if name in grads else g
        if cfg.method == "recadam" and cfg.recadam_lambda > 0:
            params = [p for _, p in named]
            penalty = recadam_loss(Tensor(np.zeros((), dtype=model.dtype)), params, [state.anchor[n] for n, _ in named], cfg.recadam_lambda)
            for p, g in tc.backward(penalty).items():
                name = by_tensor[p]
                grads[name] = grads[name] + g if name in grads else g
        adamw_step(model, grads, state, lr, cfg, plan)
        row = {"step": step, "lr": lr, "train_loss": loss_sum, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        rows.append(row)
        if log_every and (step % log_every == 0 or step == total - 1):
            log.info("step %d/%d lr %.3g loss %.4f", step, total, lr, loss_sum)
    return PhaseResult(model, state, rows, total)


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "train_loss", "wall_ms"])
        w.writeheader()
        for r in rows:
            w.writerow({"step": r["step"], "lr": repr(r["lr"]), "train_loss": f"{r['train_loss']:.6f}", "wall_ms": r["wall_ms"]})


def save_optimizer_state(state: OptimizerState, path) -> None:
    tensors = [(f"m.{n}", a) for n, a in state.m.items()] + [(f"v.{n}", a) for n, a in state.v.items()]
    if state.anchor is not None:
        tensors += [(f"anchor.{n}", a) for n, a in state.anchor.items()]
    write_tensor_file(path, OPTIMIZER_MAGIC, OPTIMIZER_VERSION, {"step": state.step, "has_anchor": state.anchor is not None}, tensors)


def load_optimizer_state(path) -> OptimizerState:
    blob, tensors = read_tensor_file(path, OPTIMIZER_MAGIC, OPTIMIZER_VERSION)
    state = OptimizerState(step=int(blob["step"]))
    if blob.get("has_anchor"):
        state.anchor = {}
    for key, arr in tensors.items():
        kind, name = key.split(".", 1)
        if kind == "m":
            state.m[name] = arr.copy()
        elif kind == "v":
            state.v[name] = arr.copy()
        elif kind == "anchor":
            state.anchor[name] = arr.copy()
    return state
