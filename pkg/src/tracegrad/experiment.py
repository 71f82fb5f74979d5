"""End-to-end experiment stages over one output directory.

Directory layout (``out`` below)::

    config.json  version.json
    data/        snapshot.jsonl edits_y{t}.jsonl probes_y{t}.jsonl tokenizer.json manifest.json
    pretrain/    model.ckpt metrics.csv eval_y{t}.json
    continual/y{t}/{run}/
                 model.ckpt optimizer.bin metrics.csv eval.json [profile.csv profile_plot.csv plan.json]
    profile/y{t}/profile.csv profile_plot.csv
    reports/     y{t}.csv y{t}.txt forgetting_y{t}.csv

``run`` names are ``{method}`` or ``{method}+{tgl_mode}``. Year ``t`` of a run
starts from year ``t-1`` of the same run, and year 1 from the domain-pretrained
checkpoint. Every stage reads its inputs from disk, so stages can be invoked
as separate processes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .data import (
    CATEGORIES,
    EDIT,
    NEW_ENTITY,
    POPULAR,
    SNAPSHOT,
    TEST,
    UPDATE,
    VALIDATION,
    DataError,
    ProbeExample,
    Tokenizer,
    WorldSpec,
    build_tokenizer,
    count_tokens,
    gen_probes,
    gen_world,
    load_corpus,
    load_probes,
    render_corpus,
    write_jsonl,
)
from .evaluation import COLUMN_LABELS, EvalResult, compare_report, evaluate, skip_list
from .model import ConfigError, Model, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .profiler import GradientProfile, ProfileConfig, export_profile, plot_data_csv, relative_profile, sample_examples
from .tgl import MODES, UpdatePlan, make_plan
from .training import METHODS, TrainConfig, TrainingError, mixreview_stream, run_phase, save_optimizer_state, write_metrics

log = logging.getLogger(__name__)

METHOD_LABELS = {"vanilla": "Vanilla", "lora": "LoRA", "mixreview": "MixReview", "recadam": "RecAdam"}
TGL_LABELS = {"fp": "+ TGL with FP", "alr": "+ TGL with ALR", "fp+alr": "+ TGL with FP+ALR"}
BASELINES = ("snapshot", "edits")


class MissingInputError(DataError):
    """A stage needs a file an earlier stage should have produced."""


class OutputExistsError(ConfigError):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ModelShape:
    """Model architecture without the vocabulary size, which comes from the tokenizer."""

    context_length: int = 128
    n_blocks: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    tie_embeddings: bool = True

    def build(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=seed, **dataclasses.asdict(self))


def default_pretrain() -> TrainConfig:
    return TrainConfig(base_lr=3e-3, epochs=20.0, batch_size=64, micro_batch_size=64)


def default_continual() -> TrainConfig:
    return TrainConfig(base_lr=3e-3, epochs=1.0, batch_size=64, micro_batch_size=64, recadam_lambda=1e-2)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelShape = field(default_factory=ModelShape)
    pretrain: TrainConfig = field(default_factory=default_pretrain)
    continual: TrainConfig = field(default_factory=default_continual)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    profile_category: str = UPDATE
    profile_baseline: str = "snapshot"
    recompute_plan_per_year: bool = True
    years: Tuple[int, ...] = (1, 2)
    methods: Tuple[str, ...] = ("vanilla",)
    tgl_modes: Tuple[str, ...] = ("none", "fp", "alr")

    def validate(self) -> None:
        try:
            self.world.validate()
            self.model.build(1, self.seed).validate()
            self.pretrain.validate()
            self.continual.validate()
            self.profile.validate()
        except ConfigError:
            raise
        except (ValueError, TypeError, TrainingError) as exc:
            raise ConfigError(str(exc)) from exc
        for y in self.years:
            if not 1 <= y <= self.world.n_years:
                raise ConfigError(f"year {y} outside 1..{self.world.n_years}")
        if list(self.years) != sorted(set(self.years)):
            raise ConfigError("years must be increasing and unique")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        for t in self.tgl_modes:
            if t not in MODES:
                raise ConfigError(f"unknown tgl mode {t!r}; expected one of {MODES}")
        if self.profile_category not in CATEGORIES:
            raise ConfigError(f"unknown profile_category {self.profile_category!r}")
        if self.profile_baseline not in BASELINES:
            raise ConfigError(f"profile_baseline must be one of {BASELINES}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` pushed into every stage."""
        return dataclasses.replace(
            self,
            seed=seed,
            world=dataclasses.replace(self.world, seed=seed),
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            continual=dataclasses.replace(self.continual, seed=seed),
            profile=dataclasses.replace(self.profile, seed=seed),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["years"] = list(self.years)
        d["methods"] = list(self.methods)
        d["tgl_modes"] = list(self.tgl_modes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        kw = dict(d)
        subs = {"world": WorldSpec, "model": ModelShape, "pretrain": TrainConfig, "continual": TrainConfig, "profile": ProfileConfig}
        for key, sub in subs.items():
            if key in kw:
                kw[key] = _strict(sub, kw[key], key)
        for key in ("years", "methods", "tgl_modes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        cfg = cls(**kw)
        if "seed" in d:
            cfg = cfg.with_seed(cfg.seed)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(d)


def run_name(method: str, tgl_mode: str) -> str:
    return method if tgl_mode == "none" else f"{method}+{tgl_mode}"


def run_label(method: str, tgl_mode: str) -> str:
    base = METHOD_LABELS[method]
    return base if tgl_mode == "none" else f"{base} {TGL_LABELS[tgl_mode]}"


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------


class Workspace:
    """Paths and cached inputs of one experiment directory."""

    def __init__(self, out, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self._tok: Optional[Tokenizer] = None

    # paths
    @property
    def data(self) -> Path:
        return self.out / "data"

    def edits_path(self, year: int) -> Path:
        return self.data / f"edits_y{year}.jsonl"

    def probes_path(self, year: int) -> Path:
        return self.data / f"probes_y{year}.jsonl"

    @property
    def pretrain_ckpt(self) -> Path:
        return self.out / "pretrain" / "model.ckpt"

    def run_dir(self, year: int, method: str, tgl_mode: str) -> Path:
        return self.out / "continual" / f"y{year}" / run_name(method, tgl_mode)

    def start_checkpoint(self, year: int, method: str, tgl_mode: str) -> Path:
        if year == self.cfg.years[0]:
            return self.pretrain_ckpt
        prev = self.cfg.years[self.cfg.years.index(year) - 1] if year in self.cfg.years else year - 1
        return self.run_dir(prev, method, tgl_mode) / "model.ckpt"

    # inputs
    def _require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingInputError(f"missing {path}; run `{hint}` first")
        return path

    def tokenizer(self) -> Tokenizer:
        if self._tok is None:
            path = self._require(self.data / "tokenizer.json", "gen-corpus")
            try:
                self._tok = Tokenizer.load(path)
            except (ValueError, KeyError, OSError) as exc:
                raise DataError(f"cannot read tokenizer {path}: {exc}") from exc
        return self._tok

    def snapshot(self):
        return load_corpus(self._require(self.data / "snapshot.jsonl", "gen-corpus"))

    def edits(self, year: int):
        return load_corpus(self._require(self.edits_path(year), "gen-corpus"))

    def probes(self, year: int, split: Optional[str] = None) -> List[ProbeExample]:
        probes = load_probes(self._require(self.probes_path(year), "gen-corpus"))
        return [p for p in probes if split is None or p.split == split]

    def load_model(self, path: Path, hint: str) -> Model:
        return load_checkpoint(self._require(path, hint))

    def write_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(self.cfg.to_json(), encoding="utf-8")
        version = {"package_version": __version__, "source_fingerprint": source_fingerprint()}
        (self.out / "version.json").write_text(json.dumps(version, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise OutputExistsError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# stages


def gen_corpus(ws: Workspace, force: bool = False) -> dict:
    """Generate the world, corpora, probes and tokenizer; return the manifest."""
    cfg = ws.cfg
    out = _fresh_dir(ws.data, force)
    ws.write_config()
    world = gen_world(cfg.world)
    snapshot = render_corpus(world, 0, SNAPSHOT)
    edits = {t: render_corpus(world, t, EDIT) for t in range(1, cfg.world.n_years + 1)}
    probes = {t: gen_probes(world, t) for t in range(1, cfg.world.n_years + 1)}
    texts = [d.text for d in snapshot] + [d.text for t in edits for d in edits[t]]
    texts += [f"{p.left_context} {p.answer}" for t in probes for p in probes[t]]
    tok = build_tokenizer(texts)

    write_jsonl(out / "snapshot.jsonl", snapshot)
    for t in edits:
        write_jsonl(ws.edits_path(t), edits[t])
        write_jsonl(ws.probes_path(t), probes[t])
    tok.save(out / "tokenizer.json")

    files = {}
    for path in sorted(out.glob("*")):
        files[path.name] = {"sha256": _sha(path)}
    files["snapshot.jsonl"].update(docs=len(snapshot), tokens=count_tokens(snapshot))
    for t in edits:
        files[ws.edits_path(t).name].update(docs=len(edits[t]), tokens=count_tokens(edits[t]))
        counts = {f"{c}/{s}": sum(p.category == c and p.split == s for p in probes[t]) for c in CATEGORIES for s in (VALIDATION, TEST)}
        files[ws.probes_path(t).name].update(probes=len(probes[t]), counts=counts)
    files["tokenizer.json"].update(vocab_size=len(tok))
    manifest = {"seed": cfg.world.seed, "world": cfg.world.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def pretrain(ws: Workspace, force: bool = False) -> Model:
    """Domain pretraining from scratch on the snapshot."""
    cfg = ws.cfg
    tok = ws.tokenizer()
    seqs = [tok.encode_document(d.text) for d in ws.snapshot()]
    out = _fresh_dir(ws.pretrain_ckpt.parent, force)
    model = init_model(cfg.model.build(len(tok), cfg.seed))
    result = run_phase(model, seqs, cfg.pretrain, pad_id=tok.pad_id, log_every=50)
    save_checkpoint(result.model, out / "model.ckpt")
    write_metrics(result.log, out / "metrics.csv")
    return result.model


def compute_profile(ws: Workspace, model: Model, year: int) -> GradientProfile:
    """Relative gradient profile of ``model`` on year-``year`` validation probes."""
    cfg = ws.cfg
    tok = ws.tokenizer()
    probes = [p for p in ws.probes(year, VALIDATION) if p.category == cfg.profile_category]
    skipped = {pid for pid, _ in skip_list(probes, tok, model.cfg.context_length)}
    probes = [p for p in probes if p.id not in skipped]
    if not probes:
        raise DataError(f"no {cfg.profile_category} validation probes for year {year} to profile with")
    docs = ws.snapshot() if cfg.profile_baseline == "snapshot" else ws.edits(year)
    baseline = [tok.encode_document(d.text) for d in docs]
    examples = [tok.encode_probe(p) for p in sample_examples(probes, cfg.profile.n_probe_examples, cfg.profile.seed)]
    pool = sample_examples(baseline, cfg.profile.n_baseline_examples, cfg.profile.seed)
    prof = relative_profile(model, examples, pool, cfg.profile)
    prof.metadata.update(year=year, probe_category=cfg.profile_category, baseline=cfg.profile_baseline)
    return prof


def write_profile(prof: GradientProfile, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    export_profile(prof, out / "profile.csv")
    (out / "profile_plot.csv").write_text(plot_data_csv(prof), encoding="utf-8")


def profile_summary(prof: GradientProfile) -> str:
    parts = []
    for comp, s in prof.summary().items():
        parts.append(f"{comp}: min {s['min']:.3f} mean {s['mean']:.3f} max {s['max']:.3f}")
    return "; ".join(parts)


def profile_stage(ws: Workspace, year: int, checkpoint: Optional[Path] = None, force: bool = False) -> GradientProfile:
    model = ws.load_model(Path(checkpoint) if checkpoint else ws.pretrain_ckpt, "pretrain")
    prof = compute_profile(ws, model, year)
    out = _fresh_dir(ws.out / "profile" / f"y{year}", force)
    write_profile(prof, out)
    return prof


def _plan_for(ws: Workspace, model: Model, year: int, method: str, tgl_mode: str, out: Path):
    if tgl_mode == "none":
        return None
    first = ws.cfg.years[0]
    if not ws.cfg.recompute_plan_per_year and year != first:
        src = ws.run_dir(first, method, tgl_mode)
        plan = UpdatePlan.load(ws._require(src / "plan.json", f"continual --year {first}"))
        plan.save(out / "plan.json")
        return plan
    prof = compute_profile(ws, model, year)
    write_profile(prof, out)
    plan = make_plan(prof, tgl_mode, model=model)
    plan.save(out / "plan.json")
    log.info("%s year %d: frozen %s", run_name(method, tgl_mode), year, sorted(map(str, plan.frozen)))
    return plan


def continual(ws: Workspace, year: int, method: str, tgl_mode: str = "none", force: bool = False) -> EvalResult:
    """One continual phase on the year's edits, followed by test-probe evaluation."""
    cfg = ws.cfg
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if tgl_mode not in MODES:
        raise ConfigError(f"unknown tgl mode {tgl_mode!r}")
    tok = ws.tokenizer()
    start = ws.start_checkpoint(year, method, tgl_mode)
    hint = "pretrain" if start == ws.pretrain_ckpt else f"continual --year {year - 1} --method {method} --tgl {tgl_mode}"
    model = ws.load_model(start, hint)
    seqs = [tok.encode_document(d.text) for d in ws.edits(year)]
    out = _fresh_dir(ws.run_dir(year, method, tgl_mode), force)

    plan = _plan_for(ws, model, year, method, tgl_mode, out)
    train_cfg = dataclasses.replace(cfg.continual, method=method, tgl_mode=tgl_mode)
    if method == "mixreview":
        pool = [tok.encode_document(d.text) for d in ws.snapshot()]
        seqs = mixreview_stream(seqs, pool, train_cfg.replay_ratio, train_cfg.seed + year, train_cfg.replay_per_edit)
    result = run_phase(model, seqs, train_cfg, plan, pad_id=tok.pad_id, log_every=50)
    save_checkpoint(result.model, out / "model.ckpt")
    save_optimizer_state(result.state, out / "optimizer.bin")
    write_metrics(result.log, out / "metrics.csv")
    res = evaluate_model(ws, result.model, year)
    res.save(out / "eval.json")
    return res


def evaluate_model(ws: Workspace, model: Model, year: int) -> EvalResult:
    tok = ws.tokenizer()
    probes = ws.probes(year, TEST)
    skip = skip_list(probes, tok, model.cfg.context_length)
    return evaluate(model, probes, tok, skip=skip, year=year)


def pretrain_eval(ws: Workspace, year: int) -> EvalResult:
    """Evaluation of the domain-pretrained checkpoint on year-``year`` probes (cached)."""
    path = ws.pretrain_ckpt.parent / f"eval_y{year}.json"
    if path.exists():
        return EvalResult.load(path)
    res = evaluate_model(ws, ws.load_model(ws.pretrain_ckpt, "pretrain"), year)
    res.save(path)
    return res


def report(ws: Workspace, year: int) -> Tuple[str, str]:
    """Comparison table for ``year`` over every run present; returns (csv, text)."""
    rows = []
    for method in ws.cfg.methods:
        for mode in ws.cfg.tgl_modes:
            path = ws.run_dir(year, method, mode) / "eval.json"
            if path.exists():
                rows.append((run_label(method, mode), EvalResult.load(path)))
    if not rows:
        raise MissingInputError(f"no continual results for year {year} under {ws.out / 'continual'}")
    rep = compare_report(rows)
    text = rep.to_text(f"Year {year} salient-span perplexity (lower is better)")
    out = ws.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"y{year}.csv").write_text(rep.to_csv(), encoding="utf-8")
    (out / f"y{year}.txt").write_text(text, encoding="utf-8")
    (out / f"forgetting_y{year}.csv").write_text(forgetting_csv(pretrain_eval(ws, year), rows), encoding="utf-8")
    return rep.to_csv(), text


def forgetting_csv(reference: EvalResult, rows: Sequence[Tuple[str, EvalResult]]) -> str:
    """Perplexities next to the domain-pretrained model's, with the change on every category."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [COLUMN_LABELS[c] for c in CATEGORIES] + [f"delta_{COLUMN_LABELS[c]}" for c in CATEGORIES])
    for label, res in [("Domain PT", reference)] + list(rows):
        values = [f"{res.per_category[c]:.4f}" if c in res.per_category else "" for c in CATEGORIES]
        deltas = []
        for c in CATEGORIES:
            ok = c in res.per_category and c in reference.per_category
            deltas.append(f"{res.per_category[c] - reference.per_category[c]:+.4f}" if ok else "")
        w.writerow([label] + values + deltas)
    return buf.getvalue()


def run_all(ws: Workspace, force: bool = False) -> Dict[int, str]:
    """gen-corpus, pretrain, then every (year, method, tgl mode) and the reports."""
    gen_corpus(ws, force)
    pretrain(ws, force)
    texts = {}
    for year in ws.cfg.years:
        for method in ws.cfg.methods:
            for mode in ws.cfg.tgl_modes:
                continual(ws, year, method, mode, force)
        texts[year] = report(ws, year)[1]
    return texts
