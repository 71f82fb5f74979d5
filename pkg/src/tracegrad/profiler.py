"""Per-layer-group gradient norms and the relative gradient profile.

For each layer group the profile stores the mean gradient L2 norm of the
salient-span loss on probe examples, the mean gradient L2 norm of the
full-sequence LM loss on pretraining examples, and their ratio.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .model import ATTENTION, MLP, LayerGroupId, Model

PER_EXAMPLE = "per_example"
MEAN_GRADIENT = "mean_gradient"
CSV_COLUMNS = ["block", "component", "probe_norm", "baseline_norm", "relative_norm"]


class ProfilingError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileEntry:
    probe_norm: float
    baseline_norm: float
    relative_norm: float


@dataclass
class GradientProfile:
    entries: Dict[LayerGroupId, ProfileEntry]
    metadata: dict = field(default_factory=dict)

    def relative(self) -> Dict[LayerGroupId, float]:
        return {g: e.relative_norm for g, e in self.entries.items()}

    def fingerprint(self) -> str:
        return hashlib.sha256(profile_csv(self).encode()).hexdigest()[:16]

    def by_component(self) -> Dict[str, List[float]]:
        out: Dict[str, List[float]] = {ATTENTION: [], MLP: []}
        for g, e in sorted(self.entries.items(), key=lambda kv: kv[0].sort_key()):
            out[g.component].append(e.relative_norm)
        return out

    def summary(self) -> Dict[str, dict]:
        """min / mean / max relative norm per component."""
        out = {}
        for comp, vals in self.by_component().items():
            if vals:
                out[comp] = {"min": min(vals), "mean": sum(vals) / len(vals), "max": max(vals)}
        return out


@dataclass(frozen=True)
class ProfileConfig:
    n_probe_examples: int = 200
    n_baseline_examples: int = 2000
    convention: str = PER_EXAMPLE
    seed: int = 0

    def validate(self) -> None:
        if self.n_probe_examples < 1 or self.n_baseline_examples < 1:
            raise ProfilingError("profile example counts must be >= 1")
        if self.convention not in (PER_EXAMPLE, MEAN_GRADIENT):
            raise ProfilingError(f"unknown aggregation convention {self.convention!r}")


def group_grad_norms(
    loss_fn: Callable[[object], tc.Tensor],
    examples: Sequence,
    groups: Mapping[tc.Tensor, Hashable],
    convention: str = PER_EXAMPLE,
) -> Dict[Hashable, float]:
    """Mean over examples of each group's gradient L2 norm.

    ``groups`` maps every parameter tensor to its group. A group that an
    example's loss does not reach contributes a zero norm for that example.
    With ``convention="mean_gradient"`` the norm of the mean gradient is
    returned instead.
    """
    if not examples:
        raise ProfilingError("no examples to profile")
    names = list(dict.fromkeys(groups.values()))
    if convention == PER_EXAMPLE:
        totals = {g: 0.0 for g in names}
        for ex in examples:
            sq = {g: 0.0 for g in names}
            for p, grad in tc.backward(loss_fn(ex)).items():
                g = groups.get(p)
                if g is not None:
                    sq[g] += float(np.dot(grad.reshape(-1).astype(np.float64), grad.reshape(-1).astype(np.float64)))
            for g in names:
                totals[g] += math.sqrt(sq[g])
        return {g: totals[g] / len(examples) for g in names}
    if convention == MEAN_GRADIENT:
        acc: Dict[tc.Tensor, np.ndarray] = {}
        for ex in examples:
            for p, grad in tc.backward(loss_fn(ex)).items():
                if p in groups:
                    acc[p] = acc[p] + grad.astype(np.float64) if p in acc else grad.astype(np.float64)
        sq = {g: 0.0 for g in names}
        for p, total in acc.items():
            mean = total / len(examples)
            sq[groups[p]] += float(np.dot(mean.reshape(-1), mean.reshape(-1)))
        return {g: math.sqrt(v) for g, v in sq.items()}
    raise ProfilingError(f"unknown aggregation convention {convention!r}")


def combine(probe_norms: Mapping, baseline_norms: Mapping, layers: Sequence, metadata: Optional[dict] = None) -> GradientProfile:
    """Entrywise ratio of two norm maps over ``layers``."""
    entries = {}
    for g in layers:
        base = baseline_norms.get(g, 0.0)
        if not base > 0:
            raise ProfilingError(f"baseline gradient norm is zero for group {g}")
        probe = probe_norms.get(g, 0.0)
        entries[g] = ProfileEntry(probe, base, probe / base)
    return GradientProfile(entries, dict(metadata or {}))


def model_groups(model: Model) -> Dict[tc.Tensor, LayerGroupId]:
    return {p: model.group_of(n) for n, p in model.named_parameters() if p.requires_grad}


def relative_profile(
    model: Model,
    probes: Sequence,
    pretrain: Sequence,
    cfg: Optional[ProfileConfig] = None,
    probe_loss: Optional[Callable] = None,
    baseline_loss: Optional[Callable] = None,
) -> GradientProfile:
    """Relative gradient profile of ``model`` over its attention/MLP groups.

    ``probes`` are ``(token_ids, (start, end))`` pairs scored with the span
    loss; ``pretrain`` are token-id sequences scored with the full LM loss.
    Both lists are used as given (sampling is the caller's job, see
    :func:`sample_examples`). A model carrying LoRA adapters is profiled
    through its merged weights, since its frozen base layers have no
    trainable tensors of their own.
    """
    cfg = cfg or ProfileConfig()
    cfg.validate()
    if not probes or not pretrain:
        raise ProfilingError("both probe and pretraining examples are required")
    fp = model.fingerprint()
    if model.lora:
        model = model.merged()
    probe_loss = probe_loss or (lambda ex: model.span_loss(ex[0], ex[1]))
    baseline_loss = baseline_loss or model.lm_loss
    groups = model_groups(model)
    layers = [g for g in model.group_names() if g.in_layers]
    num = group_grad_norms(probe_loss, probes, groups, cfg.convention)
    den = group_grad_norms(baseline_loss, pretrain, groups, cfg.convention)
    meta = {
        "n_probe": len(probes),
        "n_baseline": len(pretrain),
        "seed": cfg.seed,
        "convention": cfg.convention,
        "model_fingerprint": fp,
    }
    return combine(num, den, layers, meta)


def sample_examples(items: Sequence, n: int, seed: int) -> list:
    """Deterministic sample of ``min(n, len(items))`` items, in original order."""
    if n >= len(items):
        return list(items)
    idx = sorted(random.Random(seed).sample(range(len(items)), n))
    return [items[i] for i in idx]


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def profile_csv(profile: GradientProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for g, e in sorted(profile.entries.items(), key=lambda kv: kv[0].sort_key()):
        w.writerow([g.block, g.component, _fmt(e.probe_norm), _fmt(e.baseline_norm), _fmt(e.relative_norm)])
    return buf.getvalue()


def export_profile(profile: GradientProfile, path) -> None:
    Path(path).write_text(profile_csv(profile), encoding="utf-8")


def parse_profile(text: str, source: str = "<profile>") -> GradientProfile:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_COLUMNS:
        raise ProfilingError(f"{source}:1: header must be {','.join(CSV_COLUMNS)}")
    entries = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ProfilingError(f"{source}:{lineno}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
        try:
            group = LayerGroupId(row[1], int(row[0]))
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ProfilingError(f"{source}:{lineno}: {exc}") from exc
        if group in entries:
            raise ProfilingError(f"{source}:{lineno}: duplicate group {group}")
        entries[group] = ProfileEntry(*vals)
    if not entries:
        raise ProfilingError(f"{source}: no profile rows")
    return GradientProfile(entries)


def import_profile(path) -> GradientProfile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ProfilingError(f"cannot read profile {path}: {exc}") from exc
    return parse_profile(text, str(path))


def validate_against(profile: GradientProfile, model: Model) -> None:
    expected = {g for g in model.group_names() if g.in_layers}
    if set(profile.entries) != expected:
        raise ProfilingError(
            f"profile has {len(profile.entries)} groups but the model has {len(expected)} attention/MLP groups"
        )


def plot_data_csv(profile: GradientProfile) -> str:
    """One row per block with the attention and MLP relative norms side by side."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "attention_relative_norm", "mlp_relative_norm"])
    blocks = sorted({g.block for g in profile.entries})
    for b in blocks:
        a = profile.entries.get(LayerGroupId(ATTENTION, b))
        m = profile.entries.get(LayerGroupId(MLP, b))
        w.writerow([b, _fmt(a.relative_norm) if a else "", _fmt(m.relative_norm) if m else ""])
    return buf.getvalue()
