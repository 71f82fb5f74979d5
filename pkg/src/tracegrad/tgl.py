"""Update plans derived from a relative gradient profile.

``fp`` freezes every layer group whose relative norm is strictly below the
mean over groups. ``alr`` scales each group's learning rate by its relative
norm divided by the largest one. ``fp+alr`` freezes first and scales the
survivors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Mapping, Optional

from .model import LayerGroupId

MODES = ("none", "fp", "alr", "fp+alr")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class UpdatePlan:
    mode: str = "none"
    frozen: FrozenSet[LayerGroupId] = frozenset()
    lr_scale: Mapping[LayerGroupId, float] = field(default_factory=dict)
    profile_fingerprint: Optional[str] = None

    def scale(self, group: LayerGroupId) -> float:
        return self.lr_scale.get(group, 1.0)

    def check_model(self, model) -> None:
        groups = set(model.group_names())
        unknown = [g for g in set(self.frozen) | set(self.lr_scale) if g not in groups or not g.in_layers]
        if unknown:
            raise PlanError(f"plan refers to groups the model does not have: {sorted(map(str, unknown))}")

    def to_json(self) -> dict:
        def key(g):
            return g.sort_key()

        return {
            "mode": self.mode,
            "frozen": [{"block": g.block, "component": g.component} for g in sorted(self.frozen, key=key)],
            "lr_scale": [
                {"block": g.block, "component": g.component, "scale": s} for g, s in sorted(self.lr_scale.items(), key=lambda kv: key(kv[0]))
            ],
            "profile_fingerprint": self.profile_fingerprint,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, d: dict) -> "UpdatePlan":
        try:
            if d["mode"] not in MODES:
                raise PlanError(f"unknown plan mode {d['mode']!r}")
            frozen = frozenset(LayerGroupId(e["component"], e["block"]) for e in d["frozen"])
            scales = {LayerGroupId(e["component"], e["block"]): float(e["scale"]) for e in d["lr_scale"]}
            return cls(d["mode"], frozen, scales, d.get("profile_fingerprint"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PlanError):
                raise
            raise PlanError(f"malformed plan: {exc}") from exc

    @classmethod
    def load(cls, path) -> "UpdatePlan":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc
        return cls.from_json(d)


def identity_plan() -> UpdatePlan:
    return UpdatePlan()


def _relative(profile) -> Dict[LayerGroupId, float]:
    rel = profile.relative() if hasattr(profile, "relative") else dict(profile)
    if not rel:
        raise PlanError("empty profile")
    return rel


def select_frozen(profile) -> FrozenSet[LayerGroupId]:
    """Groups whose relative norm is strictly below the mean over the profile."""
    rel = _relative(profile)
    mean = sum(rel.values()) / len(rel)
    return frozenset(g for g, r in rel.items() if r < mean)


def alr_scales(profile) -> Dict[LayerGroupId, float]:
    """Per-group learning-rate factor ``r / max(r)``; the argmax group gets exactly 1."""
    rel = _relative(profile)
    top = max(rel.values())
    if not top > 0:
        raise PlanError("adaptive learning rates need a positive maximum relative norm")
    return {g: r / top for g, r in rel.items()}


def make_plan(profile, mode: str, model=None) -> UpdatePlan:
    if mode not in MODES:
        raise PlanError(f"unknown TGL mode {mode!r}; expected one of {MODES}")
    fp = getattr(profile, "fingerprint", None)
    fp = fp() if callable(fp) else fp
    if model is not None:
        expected = {g for g in model.group_names() if g.in_layers}
        got = set(_relative(profile))
        if got != expected:
            raise PlanError(f"profile groups {sorted(map(str, got))} do not match model groups {sorted(map(str, expected))}")
    if mode == "none":
        return UpdatePlan("none", profile_fingerprint=fp)
    frozen: FrozenSet[LayerGroupId] = frozenset()
    scales: Dict[LayerGroupId, float] = {}
    if "fp" in mode:
        frozen = select_frozen(profile)
    if "alr" in mode:
        rel = _relative(profile)
        survivors = {g: r for g, r in rel.items() if g not in frozen}
        scales = alr_scales(survivors)
    return UpdatePlan(mode, frozen, scales, fp)


def plan_fingerprint(plan: UpdatePlan) -> str:
    return hashlib.sha256(json.dumps(plan.to_json(), sort_keys=True).encode()).hexdigest()[:16]
