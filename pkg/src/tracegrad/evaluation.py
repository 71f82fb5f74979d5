"""Salient-span perplexity on probe sets and method comparison tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .data import CATEGORIES, NEW_ENTITY, POPULAR, UPDATE, ProbeExample, Tokenizer, fingerprint
from .model import Model
from .training import pad_batch

log = logging.getLogger(__name__)

MACRO = "macro"
MICRO = "micro"
COLUMN_LABELS = {POPULAR: "Popular", NEW_ENTITY: "NewEntity", UPDATE: "Update"}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeScore:
    id: str
    category: str
    nll: float  # mean per-token NLL over the answer span
    n_tokens: int


@dataclass
class EvalResult:
    per_category: Dict[str, float]
    records: List[ProbeScore] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    flagged: List[str] = field(default_factory=list)
    model_fingerprint: str = ""
    probe_fingerprint: str = ""
    year: Optional[int] = None
    aggregation: str = MACRO

    def to_json(self) -> dict:
        return {
            "per_category": self.per_category,
            "records": [r.__dict__ for r in self.records],
            "skipped": [list(s) for s in self.skipped],
            "flagged": self.flagged,
            "model_fingerprint": self.model_fingerprint,
            "probe_fingerprint": self.probe_fingerprint,
            "year": self.year,
            "aggregation": self.aggregation,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalResult":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(
                per_category={k: float(v) for k, v in d["per_category"].items()},
                records=[ProbeScore(**r) for r in d["records"]],
                skipped=[tuple(s) for s in d["skipped"]],
                flagged=list(d["flagged"]),
                model_fingerprint=d["model_fingerprint"],
                probe_fingerprint=d["probe_fingerprint"],
                year=d["year"],
                aggregation=d["aggregation"],
            )
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise EvaluationError(f"cannot read eval result {path}: {exc}") from exc


def span_nll(model: Model, ids: Sequence[int], span: Tuple[int, int]) -> np.ndarray:
    """Per-token NLL of ``ids[start:end]`` given its left context."""
    start, end = span
    if not 0 < start < end <= len(ids):
        raise EvaluationError(f"invalid answer span {span} for {len(ids)} tokens")
    with tc.no_grad():
        logits = model.forward_logits(np.asarray(ids[: end - 1])).data
    logp = tc.log_softmax_np(logits.astype(np.float64))
    return -logp[np.arange(start - 1, end - 1), np.asarray(ids[start:end])]


def span_perplexity(model: Model, probe: ProbeExample, tokenizer: Tokenizer) -> Tuple[np.ndarray, float]:
    ids, span = tokenizer.encode_probe(probe)
    if len(ids) - 1 > model.cfg.context_length:
        raise EvaluationError(f"probe {probe.id} needs {len(ids) - 1} positions > context_length {model.cfg.context_length}")
    nll = span_nll(model, ids, span)
    return nll, math.exp(float(nll.mean()))


def skip_list(probes: Sequence[ProbeExample], tokenizer: Tokenizer, context_length: int) -> List[Tuple[str, str]]:
    """Probes that cannot be scored, with the reason."""
    out = []
    for p in probes:
        ids, _ = tokenizer.encode_probe(p)
        if len(ids) - 1 > context_length:
            out.append((p.id, f"needs {len(ids) - 1} positions, context_length is {context_length}"))
    return out


def aggregate(scores: Sequence[ProbeScore], aggregation: str = MACRO) -> float:
    if aggregation == MACRO:
        return math.exp(sum(s.nll for s in scores) / len(scores))
    if aggregation == MICRO:
        return math.exp(sum(s.nll * s.n_tokens for s in scores) / sum(s.n_tokens for s in scores))
    raise EvaluationError(f"unknown aggregation {aggregation!r}")


def evaluate(
    model: Model,
    probes: Sequence[ProbeExample],
    tokenizer: Tokenizer,
    aggregation: str = MACRO,
    skip: Optional[Sequence[Tuple[str, str]]] = None,
    batch_size: int = 64,
    year: Optional[int] = None,
) -> EvalResult:
    """Per-category span perplexity of ``model`` on ``probes``.

    Overlong probes are skipped and listed. Pass the same ``skip`` list to
    every model being compared so the comparison stays paired.
    """
    if not probes:
        raise EvaluationError("empty probe set")
    skip = list(skip) if skip is not None else skip_list(probes, tokenizer, model.cfg.context_length)
    for pid, reason in skip:
        log.warning("skipping probe %s: %s", pid, reason)
    skipped_ids = {pid for pid, _ in skip}
    todo = sorted((p for p in probes if p.id not in skipped_ids), key=lambda p: p.id)
    encoded = [tokenizer.encode_probe(p) for p in todo]

    records: List[ProbeScore] = []
    with tc.no_grad():
        for i in range(0, len(todo), batch_size):
            chunk = encoded[i : i + batch_size]
            inputs, _ = pad_batch([ids[: span[1] - 1] for ids, span in chunk], tokenizer.pad_id)
            logits = model.forward_logits(inputs).data
            logp = tc.log_softmax_np(logits.astype(np.float64))
            for j, (ids, (start, end)) in enumerate(chunk):
                nll = -logp[j, np.arange(start - 1, end - 1), np.asarray(ids[start:end])]
                p = todo[i + j]
                records.append(ProbeScore(p.id, p.category, float(nll.mean()), end - start))

    per_category: Dict[str, float] = {}
    flagged = []
    present = [c for c in CATEGORIES if any(p.category == c for p in probes)]
    for cat in present:
        scores = [r for r in records if r.category == cat]
        if not scores:
            flagged.append(cat)
            continue
        per_category[cat] = aggregate(scores, aggregation)
    return EvalResult(
        per_category=per_category,
        records=records,
        skipped=[tuple(s) for s in skip],
        flagged=flagged,
        model_fingerprint=model.fingerprint(),
        probe_fingerprint=fingerprint(sorted(probes, key=lambda p: p.id)),
        year=year,
        aggregation=aggregation,
    )


def forgetting(before: EvalResult, after: EvalResult, category: str = POPULAR) -> float:
    """Perplexity change on ``category`` (positive means worse)."""
    return after.per_category[category] - before.per_category[category]


# ---------------------------------------------------------------------------
# comparison tables


@dataclass
class Report:
    labels: List[str]
    columns: List[str]
    values: List[Dict[str, float]]
    baseline: Optional[str]
    deltas: List[Dict[str, float]]

    def best(self, column: str) -> Optional[str]:
        vals = [(v[column], lab) for lab, v in zip(self.labels, self.values) if column in v]
        return min(vals)[1] if vals else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["method"] + [COLUMN_LABELS[c] for c in self.columns]
        if self.baseline is not None:
            header += [f"delta_{COLUMN_LABELS[c]}" for c in self.columns]
        header += ["best"]
        w.writerow(header)
        best = {c: self.best(c) for c in self.columns}
        for lab, vals, delta in zip(self.labels, self.values, self.deltas):
            row = [lab] + [f"{vals[c]:.4f}" if c in vals else "" for c in self.columns]
            if self.baseline is not None:
                row += [f"{delta[c]:+.4f}" if c in delta else "" for c in self.columns]
            row.append(";".join(COLUMN_LABELS[c] for c in self.columns if best[c] == lab))
            w.writerow(row)
        return buf.getvalue()

    def to_text(self, title: str = "") -> str:
        best = {c: self.best(c) for c in self.columns}
        head = ["Method"] + [COLUMN_LABELS[c] for c in self.columns]
        if self.baseline is not None:
            head += [f"d{COLUMN_LABELS[c]}" for c in self.columns]
        body = []
        for lab, vals, delta in zip(self.labels, self.values, self.deltas):
            cells = [lab]
            for c in self.columns:
                mark = "*" if best[c] == lab and len(self.labels) > 1 else " "
                cells.append(f"{vals[c]:.2f}{mark}" if c in vals else "-")
            if self.baseline is not None:
                cells += [f"{delta[c]:+.2f}" if c in delta else "-" for c in self.columns]
            body.append(cells)
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = []
        if title:
            lines.append(title)
        lines.append("  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(head)))
        lines.append("-" * len(lines[-1]))
        for r in body:
            lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)))
        return "\n".join(lines) + "\n"


def compare_report(results: Sequence[Tuple[str, EvalResult]], baseline: Optional[str] = None) -> Report:
    """One row per method; deltas against ``baseline`` (default: first row when there are several)."""
    if not results:
        raise EvaluationError("nothing to compare")
    fps = {r.probe_fingerprint for _, r in results}
    if len(fps) > 1:
        raise EvaluationError(f"results come from different probe sets: {sorted(fps)}")
    years = {r.year for _, r in results}
    if len(years) > 1:
        raise EvaluationError(f"results mix probe years {sorted(years, key=str)}")
    labels = [lab for lab, _ in results]
    if len(set(labels)) != len(labels):
        raise EvaluationError("method labels must be unique")
    if baseline is None and len(results) > 1:
        baseline = labels[0]
    if baseline is not None and baseline not in labels:
        raise EvaluationError(f"baseline {baseline!r} is not among {labels}")
    columns = [c for c in CATEGORIES if any(c in r.per_category for _, r in results)]
    values = [dict(r.per_category) for _, r in results]
    if baseline is None:
        deltas = [{} for _ in results]
    else:
        ref = values[labels.index(baseline)]
        deltas = [{c: v[c] - ref[c] for c in columns if c in v and c in ref} for v in values]
    return Report(labels, columns, values, baseline, deltas)
