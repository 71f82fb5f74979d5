"""Synthetic temporal world, corpora, cloze probes and a word-level tokenizer.

A world has three kinds of subject entities:

* popular entities, whose facts never change;
* mutable entities, each of whose (subject, relation) objects changes at
  least once over the edit years;
* new entities, introduced in a given edit year and never mentioned before.

Year 0 is the snapshot. ``render_corpus(world, t, "edit")`` holds exactly the
facts that became valid in year ``t``. Probes are cloze prompts whose answer
is the object phrase of one fact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

SNAPSHOT = "snapshot"
EDIT = "edit"

UPDATE = "update"
NEW_ENTITY = "new_entity"
POPULAR = "popular"
CATEGORIES = (POPULAR, NEW_ENTITY, UPDATE)

VALIDATION = "validation"
TEST = "test"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class DataError(ValueError):
    pass


# Each relation: surface templates (object slot last) and word lists whose
# cartesian product gives 2-4 token object phrases.
RELATIONS: List[dict] = [
    {
        "name": "position",
        "templates": ["{s} holds the position of {o} .", "{s} currently serves as {o} .", "the post held by {s} is {o} ."],
        "parts": [["senior", "deputy", "acting", "chief", "junior", "principal"], ["minister", "director", "governor", "chancellor", "secretary", "warden"]],
    },
    {
        "name": "employer",
        "templates": ["{s} works for {o} .", "the employer of {s} is {o} .", "{s} is employed by {o} ."],
        "parts": [["the"], ["northern", "eastern", "coastal", "central", "upper", "western"], ["trading", "mining", "shipping", "printing", "milling"], ["company"]],
    },
    {
        "name": "residence",
        "templates": ["{s} lives in {o} .", "the home of {s} is {o} .", "{s} resides in {o} ."],
        "parts": [["the", "old", "new"], ["town", "port", "village", "valley", "harbor", "quarter"], ["of"], ["ardel", "brisk", "calder", "dunmore", "evenfall", "fenwick"]],
    },
    {
        "name": "team",
        "templates": ["{s} plays for {o} .", "the team of {s} is {o} .", "{s} is a member of {o} ."],
        "parts": [["red", "blue", "grey", "gold", "green", "silver"], ["falcons", "lions", "rovers", "wolves", "hornets", "otters"]],
    },
    {
        "name": "spouse",
        "templates": ["{s} is married to {o} .", "the spouse of {s} is {o} .", "{s} shares a household with {o} ."],
        "parts": [["lady", "lord", "dame", "sir"], ["amara", "belen", "corin", "delia", "elric", "faron", "galen"], ["of"], ["hollow", "ridge", "marsh"]],
    },
    {
        "name": "owner",
        "templates": ["{s} is owned by {o} .", "the owner of {s} is {o} .", "{s} belongs to {o} ."],
        "parts": [["the"], ["rowan", "tarrow", "quill", "ostrand", "pellam", "merrow"], ["holding", "family", "trust", "guild"]],
    },
    {
        "name": "language",
        "templates": ["{s} mainly speaks {o} .", "the language of {s} is {o} .", "{s} writes in {o} ."],
        "parts": [["old", "low", "high", "common"], ["vesic", "tarnic", "ombric", "pallic", "sorvic", "dunic"]],
    },
    {
        "name": "coach",
        "templates": ["{s} is coached by {o} .", "the coach of {s} is {o} .", "{s} trains under {o} ."],
        "parts": [["coach", "master", "trainer"], ["hale", "irwin", "jorah", "kessel", "lanner", "morrow", "nyle"], ["the"], ["elder", "younger"]],
    },
    {
        "name": "headquarters",
        "templates": ["{s} is headquartered in {o} .", "the headquarters of {s} is {o} .", "{s} has its main office in {o} ."],
        "parts": [["the"], ["tower", "hall", "court", "house"], ["of"], ["brightwater", "stonegate", "highmoor", "lowfield", "ashford", "kingsreach"]],
    },
    {
        "name": "leader",
        "templates": ["{s} is led by {o} .", "the leader of {s} is {o} .", "{s} answers to {o} ."],
        "parts": [["captain", "elder", "regent", "prefect", "marshal"], ["oren", "pavel", "quinta", "rhosyn", "soren", "tamsin"]],
    },
    {
        "name": "award",
        "templates": ["{s} recently received {o} .", "the latest award of {s} is {o} .", "{s} was honored with {o} ."],
        "parts": [["the"], ["bronze", "crystal", "ivory", "jade", "copper"], ["star", "laurel", "medal", "crest"]],
    },
    {
        "name": "sponsor",
        "templates": ["{s} is sponsored by {o} .", "the sponsor of {s} is {o} .", "{s} is funded by {o} ."],
        "parts": [["the"], ["harbor", "river", "summit", "meadow", "forest"], ["bank", "fund", "league", "union"]],
    },
]

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "ou"]
_CODAS = ["", "n", "r", "l", "s", "x", "k"]


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_popular_entities: int = 200
    n_mutable_entities: int = 200
    n_new_entities_per_year: int = 100
    n_relations: int = 10
    n_years: int = 2
    sentences_per_fact: int = 2
    change_prob: float = 0.5
    validation_fraction: float = 0.3

    def validate(self) -> None:
        if self.n_relations <= 0:
            raise DataError("n_relations must be positive")
        if self.n_relations > len(RELATIONS):
            raise DataError(f"n_relations={self.n_relations} exceeds the {len(RELATIONS)} available relations")
        if self.n_years <= 0:
            raise DataError("n_years must be positive")
        if self.n_popular_entities <= 0 or self.n_mutable_entities <= 0 or self.n_new_entities_per_year < 0:
            raise DataError("entity counts must be positive (new entities per year may be zero)")
        if not 1 <= self.sentences_per_fact <= 3:
            raise DataError("sentences_per_fact must be in [1, 3]")
        if not 0.0 < self.change_prob <= 1.0:
            raise DataError("change_prob must be in (0, 1]")
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError("validation_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown world spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Entity:
    name: str
    kind: str  # "popular" | "mutable" | "new"
    intro_year: int = 0


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str
    valid_from: int
    valid_to: Optional[int] = None  # exclusive; None = still valid

    def valid_at(self, year: int) -> bool:
        return self.valid_from <= year and (self.valid_to is None or year < self.valid_to)


@dataclass(frozen=True)
class Document:
    id: str
    year: int
    kind: str
    text: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ProbeExample:
    id: str
    year: int
    category: str
    split: str
    left_context: str
    answer: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class World:
    spec: WorldSpec
    entities: List[Entity]
    relations: List[dict]
    facts: List[Fact]
    splits: Dict[str, str] = field(default_factory=dict)  # subject -> split

    def entity(self, name: str) -> Entity:
        return self._by_name[name]

    def __post_init__(self):
        self._by_name = {e.name: e for e in self.entities}
        self._templates = {r["name"]: r["templates"] for r in self.relations}

    def templates(self, relation: str) -> List[str]:
        return self._templates[relation]


def _entity_names(rng: random.Random, n: int, reserved: set) -> List[str]:
    names: List[str] = []
    seen = set(reserved)
    while len(names) < n:
        k = rng.choice((2, 2, 3))
        name = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(k)) + rng.choice(_CODAS)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _object_pool(rel: dict) -> List[str]:
    pool = [""]
    for part in rel["parts"]:
        pool = [f"{p} {w}".strip() for p in pool for w in part]
    return sorted(pool)


def gen_world(spec: WorldSpec) -> World:
    """Entities, facts and validity intervals; a pure function of ``spec``."""
    spec.validate()
    rng = random.Random(spec.seed)
    relations = RELATIONS[: spec.n_relations]
    reserved = {w for r in RELATIONS for t in r["templates"] for w in t.split()}
    reserved |= {w for r in RELATIONS for part in r["parts"] for w in part}
    n_total = spec.n_popular_entities + spec.n_mutable_entities + spec.n_new_entities_per_year * spec.n_years
    names = _entity_names(rng, n_total, reserved)

    entities: List[Entity] = []
    it = iter(names)
    entities += [Entity(next(it), "popular") for _ in range(spec.n_popular_entities)]
    entities += [Entity(next(it), "mutable") for _ in range(spec.n_mutable_entities)]
    for year in range(1, spec.n_years + 1):
        entities += [Entity(next(it), "new", year) for _ in range(spec.n_new_entities_per_year)]

    pools = {r["name"]: _object_pool(r) for r in relations}
    facts: List[Fact] = []
    for ent in entities:
        for rel in relations:
            pool = pools[rel["name"]]
            obj = rng.choice(pool)
            if ent.kind != "mutable":
                facts.append(Fact(ent.name, rel["name"], obj, ent.intro_year))
                continue
            changes = [rng.random() < spec.change_prob for _ in range(spec.n_years)]
            if not any(changes):
                changes[rng.randrange(spec.n_years)] = True
            start = 0
            for year, changed in enumerate(changes, start=1):
                if not changed:
                    continue
                facts.append(Fact(ent.name, rel["name"], obj, start, year))
                obj = rng.choice([o for o in pool if o != obj])
                start = year
            facts.append(Fact(ent.name, rel["name"], obj, start))

    splits = {}
    for ent in entities:
        splits[ent.name] = VALIDATION if rng.random() < spec.validation_fraction else TEST
    return World(spec, entities, list(relations), facts, splits)


def _render_fact(world: World, fact: Fact) -> str:
    templates = world.templates(fact.relation)[: world.spec.sentences_per_fact]
    return " ".join(t.format(s=fact.subject, o=fact.object) for t in templates)


def new_facts(world: World, year: int) -> List[Fact]:
    """Facts that start being valid in ``year`` (year 0: everything valid at 0)."""
    if year == 0:
        return [f for f in world.facts if f.valid_at(0)]
    return [f for f in world.facts if f.valid_from == year]


def render_corpus(world: World, year: int, kind: str) -> List[Document]:
    """One document per fact: the snapshot (year 0) or the edits of ``year``."""
    if kind == SNAPSHOT:
        if year != 0:
            raise DataError("the snapshot is year 0")
        facts = new_facts(world, 0)
        prefix = "snap"
    elif kind == EDIT:
        if not 1 <= year <= world.spec.n_years:
            raise DataError(f"edit corpus needs 1 <= year <= {world.spec.n_years}, got {year} (year 0 has no predecessor)")
        facts = new_facts(world, year)
        prefix = f"edit-y{year}"
    else:
        raise DataError(f"unknown corpus kind {kind!r}")
    return [Document(f"{prefix}-{i:06d}", year, kind, _render_fact(world, f)) for i, f in enumerate(facts)]


def _cloze(world: World, fact: Fact) -> Tuple[str, str]:
    template = world.templates(fact.relation)[0]
    left = template.split("{o}")[0].format(s=fact.subject).strip()
    return left, fact.object


def gen_probes(world: World, year: int, allow_empty: bool = False) -> List[ProbeExample]:
    """Cloze probes for ``year`` in all three categories, split by subject."""
    if not 1 <= year <= world.spec.n_years:
        raise DataError(f"probes need 1 <= year <= {world.spec.n_years}, got {year}")
    by_cat: Dict[str, List[Fact]] = {c: [] for c in CATEGORIES}
    for f in world.facts:
        kind = world.entity(f.subject).kind
        if kind == "popular":
            by_cat[POPULAR].append(f)
        elif f.valid_from == year and kind == "mutable":
            by_cat[UPDATE].append(f)
        elif f.valid_from == year and kind == "new":
            by_cat[NEW_ENTITY].append(f)
    counts = {c: len(v) for c, v in by_cat.items()}
    if not allow_empty and any(n == 0 for n in counts.values()):
        raise DataError(f"empty probe category for year {year}: counts={counts}")
    probes = []
    for cat in CATEGORIES:
        for i, f in enumerate(by_cat[cat]):
            left, answer = _cloze(world, f)
            probes.append(ProbeExample(f"y{year}-{cat}-{i:05d}", year, cat, world.splits[f.subject], left, answer))
    return probes


# ---------------------------------------------------------------------------
# tokenizer


@dataclass
class Tokenizer:
    vocab: List[str]  # index == id; specials first

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> List[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def encode_document(self, text: str) -> List[int]:
        return [self.bos_id] + self.encode(text) + [self.eos_id]

    def encode_probe(self, probe: ProbeExample) -> Tuple[List[int], Tuple[int, int]]:
        """Token ids of ``<bos> context answer`` and the answer's [start, end)."""
        left = [self.bos_id] + self.encode(probe.left_context)
        ans = self.encode(probe.answer)
        return left + ans, (len(left), len(left) + len(ans))

    def to_json(self) -> dict:
        return {"specials": list(SPECIALS), "vocab": self.vocab}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read tokenizer {path}: {exc}") from exc
        if d.get("specials") != list(SPECIALS) or d.get("vocab", [])[: len(SPECIALS)] != list(SPECIALS):
            raise DataError(f"tokenizer {path}: specials must be {list(SPECIALS)} at the start of vocab")
        return cls(list(d["vocab"]))


def build_tokenizer(texts: Iterable[str]) -> Tokenizer:
    """Closed vocabulary; ids by descending frequency, ties lexicographic."""
    counts = Counter()
    for t in texts:
        counts.update(t.split())
    if not counts:
        raise DataError("cannot build a tokenizer from empty corpora")
    for s in SPECIALS:
        counts.pop(s, None)
    words = sorted(counts, key=lambda w: (-counts[w], w))
    return Tokenizer(list(SPECIALS) + words)


# ---------------------------------------------------------------------------
# files


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r, sort_keys=True) + "\n")


def _read_jsonl(path, fields: Sequence[str]) -> Iterator[dict]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = [f for f in fields if f not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            yield rec


def load_corpus(path) -> List[Document]:
    out = []
    for rec in _read_jsonl(path, ("id", "year", "kind", "text")):
        out.append(Document(str(rec["id"]), int(rec["year"]), str(rec["kind"]), str(rec["text"])))
    return out


def load_probes(path) -> List[ProbeExample]:
    """Read a probe file; externally produced files in the same format are accepted."""
    out = []
    for rec in _read_jsonl(path, ("id", "year", "category", "split", "left_context", "answer")):
        if rec["category"] not in CATEGORIES:
            raise DataError(f"{path}: probe {rec['id']}: unknown category {rec['category']!r}")
        if rec["split"] not in (VALIDATION, TEST):
            raise DataError(f"{path}: probe {rec['id']}: unknown split {rec['split']!r}")
        if not str(rec["left_context"]).strip() or not str(rec["answer"]).strip():
            raise DataError(f"{path}: probe {rec['id']}: empty context or answer")
        out.append(ProbeExample(str(rec["id"]), int(rec["year"]), rec["category"], rec["split"], str(rec["left_context"]), str(rec["answer"])))
    return out


def fingerprint(records: Iterable) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r.to_json() if hasattr(r, "to_json") else r, sort_keys=True).encode("utf-8"))
    return h.hexdigest()[:16]


def count_tokens(docs: Iterable[Document]) -> int:
    return sum(len(d.text.split()) for d in docs)
