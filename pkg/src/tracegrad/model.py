"""GPT-2 style decoder with parameters partitioned into layer groups.

Parameter names follow the usual GPT-2 layout (``wte``, ``wpe``,
``blocks.{b}.ln_1.gamma``, ``blocks.{b}.attn.w_qkv``, ...). Each name maps to
exactly one :class:`LayerGroupId`; the pre-norm of a sublayer belongs to that
sublayer's group.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

EMBEDDING = "embedding"
ATTENTION = "attention"
MLP = "mlp"
FINAL_NORM = "final_norm"
LM_HEAD = "lm_head"
COMPONENTS = (EMBEDDING, ATTENTION, MLP, FINAL_NORM, LM_HEAD)

CHECKPOINT_MAGIC = b"TGLC"
CHECKPOINT_VERSION = 1
_NEG_INF = -1e9


class ConfigError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 128
    n_blocks: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    tie_embeddings: bool = True
    seed: int = 0

    def validate(self) -> None:
        for field in ("vocab_size", "context_length", "n_blocks", "d_model", "n_heads", "d_ff"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, order=True)
class LayerGroupId:
    """A parameter group: one component, optionally tied to a block index."""

    component: str
    block: Optional[int] = None

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ConfigError(f"unknown component {self.component!r}")
        per_block = self.component in (ATTENTION, MLP)
        if per_block != (self.block is not None):
            raise ConfigError(f"component {self.component!r} with block={self.block!r}")

    @property
    def in_layers(self) -> bool:
        """True for groups that take part in relative-norm profiling and TGL."""
        return self.component in (ATTENTION, MLP)

    def sort_key(self) -> tuple:
        rank = {EMBEDDING: (0, 0), FINAL_NORM: (2, 0), LM_HEAD: (3, 0)}
        if self.block is not None:
            return (1, self.block, 0 if self.component == ATTENTION else 1)
        return rank[self.component] + (0,)

    def __str__(self) -> str:
        return self.component if self.block is None else f"{self.component}[{self.block}]"


def Attention(b: int) -> LayerGroupId:
    return LayerGroupId(ATTENTION, b)


def Mlp(b: int) -> LayerGroupId:
    return LayerGroupId(MLP, b)


def layer_groups(n_blocks: int) -> List[LayerGroupId]:
    """The groups that relative-norm profiles and update plans are defined over."""
    out = []
    for b in range(n_blocks):
        out += [Attention(b), Mlp(b)]
    return out


@dataclass
class LoraAdapter:
    target: str  # name of the adapted weight
    host: LayerGroupId
    rank: int
    alpha: float
    A: Tensor  # (rank, d_in)
    B: Tensor  # (d_out, rank)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Weight update in the (d_in, d_out) layout of the host weight."""
        return self.scaling * (self.B.data @ self.A.data).T


class Model:
    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.groups: Dict[str, LayerGroupId] = {name: _group_for(name) for name in params}
        self.lora: Dict[str, LoraAdapter] = {}

    # -- parameter bookkeeping -------------------------------------------

    @property
    def dtype(self):
        return self.params["wte"].dtype

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """All parameters including adapters, in a fixed order."""
        out = list(self.params.items())
        for target, ad in self.lora.items():
            out.append((f"{target}.lora_A", ad.A))
            out.append((f"{target}.lora_B", ad.B))
        return out

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def group_of(self, name: str) -> LayerGroupId:
        if name.endswith(".lora_A") or name.endswith(".lora_B"):
            return self.lora[name.rsplit(".", 1)[0]].host
        return self.groups[name]

    def group_names(self) -> List[LayerGroupId]:
        seen = sorted({self.group_of(n) for n, _ in self.named_parameters()}, key=LayerGroupId.sort_key)
        return seen

    def group_param_counts(self) -> Dict[LayerGroupId, int]:
        counts: Dict[LayerGroupId, int] = {}
        for name, p in self.named_parameters():
            g = self.group_of(name)
            counts[g] = counts.get(g, 0) + p.size
        return counts

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def astype(self, dtype) -> "Model":
        """A detached copy with every tensor cast to ``dtype``."""
        other = self.copy()
        for _, p in other.named_parameters():
            p.data = p.data.astype(dtype)
        return other

    def copy(self) -> "Model":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()}
        other = Model(self.cfg, params)
        for target, ad in self.lora.items():
            other.lora[target] = dataclasses.replace(
                ad,
                A=Tensor(ad.A.data.copy(), requires_grad=ad.A.requires_grad, name=ad.A.name),
                B=Tensor(ad.B.data.copy(), requires_grad=ad.B.requires_grad, name=ad.B.name),
            )
        return other

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def merged(self) -> "Model":
        """A plain model with every adapter folded into its host weight."""
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        for target, ad in self.lora.items():
            params[target].data = (params[target].data + ad.delta()).astype(params[target].dtype)
        return Model(self.cfg, params)

    # -- forward -----------------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        w = f"{prefix}.w"
        out = x @ self.params[w]
        ad = self.lora.get(w)
        if ad is not None:
            low = (x @ tc.transpose(ad.A)) @ tc.transpose(ad.B)
            out = out + low * ad.scaling
        return out + self.params[f"{prefix}.b"]

    def forward_logits(self, tokens) -> Tensor:
        """Causal logits for ``tokens`` of shape ``(T,)`` or ``(B, T)``."""
        ids = np.asarray(tokens)
        if ids.dtype.kind not in "iu":
            raise ModelInputError(f"token ids must be integers, got dtype {ids.dtype}")
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ModelInputError(f"expected token ids of shape (T,) or (B, T), got {np.shape(tokens)}")
        cfg = self.cfg
        n, t = ids.shape
        if t > cfg.context_length:
            raise ModelInputError(f"sequence length {t} exceeds context_length {cfg.context_length}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ModelInputError(f"token id out of range [0, {cfg.vocab_size})")

        x = tc.embedding(self.params["wte"], ids) + tc.embedding(self.params["wpe"], np.arange(t))
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)
        for b in range(cfg.n_blocks):
            p = f"blocks.{b}"
            a = tc.layernorm(x, self.params[f"{p}.ln_1.gamma"], self.params[f"{p}.ln_1.beta"])
            qkv = self._linear(a, f"{p}.attn.qkv")
            qkv = qkv.reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = (q @ k.transpose(0, 1, 3, 2)) * scale
            att = tc.softmax(tc.masked_fill(att, causal, _NEG_INF), axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(n, t, cfg.d_model)
            x = x + self._linear(y, f"{p}.attn.proj")
            m = tc.layernorm(x, self.params[f"{p}.ln_2.gamma"], self.params[f"{p}.ln_2.beta"])
            m = self._linear(tc.gelu(self._linear(m, f"{p}.mlp.fc")), f"{p}.mlp.proj")
            x = x + m
        x = tc.layernorm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        head = self.params["wte"] if cfg.tie_embeddings else self.params["lm_head"]
        logits = x @ tc.transpose(head)
        return logits[0] if squeeze else logits

    # -- losses ------------------------------------------------------------

    def span_loss(self, tokens, span: Tuple[int, int]) -> Tensor:
        """Mean NLL of ``tokens[start:end]`` given everything before each position."""
        ids = np.asarray(tokens)
        start, end = span
        if not (0 < start < end <= len(ids)):
            raise ModelInputError(f"span {span} invalid for sequence of length {len(ids)} (needs 0 < start < end <= T)")
        logits = self.forward_logits(ids[: end - 1])
        mask = np.zeros(end - 1, dtype=bool)
        mask[start - 1 :] = True
        return tc.cross_entropy_masked(logits, ids[1:end], mask)

    def lm_loss(self, tokens) -> Tensor:
        ids = np.asarray(tokens)
        if len(ids) < 2:
            raise ModelInputError("lm_loss needs at least two tokens")
        return self.span_loss(ids, (1, len(ids)))

    def batch_lm_loss(self, batch: np.ndarray, lengths: Sequence[int]) -> Tensor:
        """Token-mean NLL over a right-padded ``(B, T)`` batch."""
        batch = np.asarray(batch)
        lengths = np.asarray(lengths)
        logits = self.forward_logits(batch[:, :-1])
        pos = np.arange(1, batch.shape[1])
        mask = pos[None, :] < lengths[:, None]
        return tc.cross_entropy_masked(logits, batch[:, 1:], mask)


def _group_for(name: str) -> LayerGroupId:
    if name in ("wte", "wpe"):
        return LayerGroupId(EMBEDDING)
    if name.startswith("ln_f."):
        return LayerGroupId(FINAL_NORM)
    if name == "lm_head":
        return LayerGroupId(LM_HEAD)
    parts = name.split(".")
    if parts[0] == "blocks":
        b = int(parts[1])
        if parts[2] in ("ln_1", "attn"):
            return Attention(b)
        if parts[2] in ("ln_2", "mlp"):
            return Mlp(b)
    raise ConfigError(f"parameter {name!r} has no layer group")


def _param_shapes(cfg: ModelConfig) -> List[Tuple[str, tuple, str]]:
    """(name, shape, init kind) in initialization order."""
    d, f = cfg.d_model, cfg.d_ff
    spec = [("wte", (cfg.vocab_size, d), "normal"), ("wpe", (cfg.context_length, d), "normal")]
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}"
        spec += [
            (f"{p}.ln_1.gamma", (d,), "ones"),
            (f"{p}.ln_1.beta", (d,), "zeros"),
            (f"{p}.attn.qkv.w", (d, 3 * d), "normal"),
            (f"{p}.attn.qkv.b", (3 * d,), "zeros"),
            (f"{p}.attn.proj.w", (d, d), "residual"),
            (f"{p}.attn.proj.b", (d,), "zeros"),
            (f"{p}.ln_2.gamma", (d,), "ones"),
            (f"{p}.ln_2.beta", (d,), "zeros"),
            (f"{p}.mlp.fc.w", (d, f), "normal"),
            (f"{p}.mlp.fc.b", (f,), "zeros"),
            (f"{p}.mlp.proj.w", (f, d), "residual"),
            (f"{p}.mlp.proj.b", (d,), "zeros"),
        ]
    spec += [("ln_f.gamma", (d,), "ones"), ("ln_f.beta", (d,), "zeros")]
    if not cfg.tie_embeddings:
        spec.append(("lm_head", (cfg.vocab_size, d), "normal"))
    return spec


def init_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Fresh model: N(0, 0.02) weights, residual projections scaled by 1/sqrt(2 n_blocks)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_blocks)
    params = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "normal":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif kind == "residual":
            arr = rng.normal(0.0, resid_std, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(cfg, params)


def lora_targets(cfg: ModelConfig, blocks: Optional[Iterable[int]] = None) -> List[str]:
    blocks = range(cfg.n_blocks) if blocks is None else blocks
    return [f"blocks.{b}.attn.{proj}.w" for b in blocks for proj in ("qkv", "proj")]


def attach_lora(
    model: Model,
    rank: int = 4,
    alpha: Optional[float] = None,
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
    freeze_base: bool = True,
) -> Model:
    """Add low-rank adapters to attention projection weights, in place.

    Host weights stop receiving gradients. With ``freeze_base`` every other
    base parameter is frozen as well, so only adapters train.
    """
    if rank <= 0:
        raise ConfigError(f"LoRA rank must be positive, got {rank}")
    alpha = float(rank if alpha is None else alpha)
    targets = lora_targets(model.cfg) if targets is None else list(targets)
    rng = np.random.default_rng(seed)
    for target in targets:
        if target not in model.params:
            raise ConfigError(f"no weight named {target!r}")
        host = model.groups[target]
        if host.component != ATTENTION or not target.endswith(".w"):
            raise ConfigError(f"LoRA host must be an attention weight, got {target!r} in {host}")
        w = model.params[target]
        d_in, d_out = w.shape
        a = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in)).astype(w.dtype)
        model.lora[target] = LoraAdapter(
            target=target,
            host=host,
            rank=rank,
            alpha=alpha,
            A=Tensor(a, requires_grad=True, name=f"{target}.lora_A"),
            B=Tensor(np.zeros((d_out, rank), dtype=w.dtype), requires_grad=True, name=f"{target}.lora_B"),
        )
        w.requires_grad = False
    if freeze_base:
        for p in model.params.values():
            p.requires_grad = False
    return model


# ---------------------------------------------------------------------------
# binary checkpoint framing


def write_tensor_file(path, magic: bytes, version: int, blob: dict, tensors: Sequence[Tuple[str, np.ndarray]]) -> None:
    payload = json.dumps(blob, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", version, len(payload)))
        fh.write(payload)
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_file(path, magic: bytes, version: int) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != magic:
        raise CheckpointError(f"{path}: bad magic, expected {magic!r}")
    got_version, blob_len = struct.unpack_from("<IQ", data, 4)
    if got_version != version:
        raise CheckpointError(f"{path}: unsupported format version {got_version} (expected {version})")
    pos = 16
    if pos + blob_len > len(data):
        raise CheckpointError(f"{path}: truncated config blob")
    try:
        blob = json.loads(data[pos : pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config blob: {exc}") from exc
    pos += blob_len
    tensors: Dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt tensor record: {exc}") from exc
    return blob, tensors


def save_checkpoint(model: Model, path) -> None:
    blob = model.cfg.to_dict()
    if model.lora:
        first = next(iter(model.lora.values()))
        blob["lora"] = {"rank": first.rank, "alpha": first.alpha, "targets": list(model.lora)}
    write_tensor_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, blob, [(n, p.data) for n, p in model.named_parameters()])


def load_checkpoint(path) -> Model:
    blob, tensors = read_tensor_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    lora = blob.pop("lora", None)
    try:
        cfg = ModelConfig.from_dict(blob)
        model = init_model(cfg)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    if lora:
        attach_lora(model, rank=lora["rank"], alpha=lora["alpha"], targets=lora["targets"])
    expected = dict(model.named_parameters())
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing={missing[:5]}, unexpected={extra[:5]})")
    for name, p in expected.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].copy()
    return model
