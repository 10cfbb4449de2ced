"""Small post-norm transformer encoder classifier with mixup hook points."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError

EMBEDDING = "Embedding"
MHA_OUTPUT = "MhaOutput"
BLOCK_OUTPUT = "BlockOutput"
POOLED = "Pooled"
SITE_KINDS = (EMBEDDING, MHA_OUTPUT, BLOCK_OUTPUT, POOLED)


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    max_len: int = 256
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_layers: int = 2
    n_classes: int = 2
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for the class token")


@dataclass(frozen=True)
class HookSite:
    kind: str
    layer_index: int | None = None

    def validate(self, n_layers: int) -> None:
        if self.kind not in SITE_KINDS:
            raise ConfigError(f"unknown hook site kind {self.kind!r}")
        if self.kind in (MHA_OUTPUT, BLOCK_OUTPUT):
            if self.layer_index is None or not 0 <= self.layer_index < n_layers:
                raise ConfigError(f"{self.kind} needs a layer_index in [0, {n_layers}), got {self.layer_index}")
        elif self.layer_index is not None:
            raise ConfigError(f"{self.kind} takes no layer_index")

    def __str__(self):
        return self.kind if self.layer_index is None else f"{self.kind}[{self.layer_index}]"


@dataclass(frozen=True)
class HookRecord:
    site: HookSite
    lam: float
    index_r: tuple


@dataclass
class ForwardTrace:
    # attention_maps[layer] has shape [batch, heads, seq, seq]
    attention_maps: list = field(default_factory=list)
    hook_log: list = field(default_factory=list)


Mixer = Callable[[Tensor], Tensor]


class Module:
    """Parameter container; attributes that are Parameters, Modules or lists of Modules are walked."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, std: float):
        self.weight = Parameter(_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng, std: float):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(d_model, d_model, rng, std)
        self.k = Linear(d_model, d_model, rng, std)
        self.v = Linear(d_model, d_model, rng, std)
        self.out = Linear(d_model, d_model, rng, std)

    def _split(self, x: Tensor) -> Tensor:
        l, L, _ = x.shape
        return ag.transpose(ag.reshape(x, (l, L, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, pad_mask: np.ndarray):
        """Return the output projection (before any residual) and the attention weights."""
        l, L, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        bias = np.where(pad_mask, 0.0, -1e9)[:, None, None, :]
        attn = ag.softmax(ag.add_constant(scores, np.broadcast_to(bias, scores.shape)), axis=-1)
        ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (l, L, d))
        return self.out(ctx), attn.data


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        std = cfg.init_std
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, std)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng, std)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng, std)
        self.ln2 = LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def __call__(self, x, pad_mask, mixer: Mixer | None = None, training=False, rng=None):
        h, attn = self.attn(x, pad_mask)
        if mixer is not None:
            h = mixer(h)
        x = self.ln1(ag.add(x, ag.dropout(h, self.p, rng, training)))
        f = self.ff2(ag.gelu(self.ff1(x)))
        x = self.ln2(ag.add(x, ag.dropout(f, self.p, rng, training)))
        return x, attn


class TransformerClassifier(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        std = cfg.init_std
        self.tok_emb = Parameter(_normal(rng, (cfg.vocab_size, cfg.d_model), std))
        self.pos_emb = Parameter(_normal(rng, (cfg.max_len, cfg.d_model), std))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.head = Linear(cfg.d_model, cfg.n_classes, rng, std)
        for name, p in self.named_parameters():
            p.name = name

    def embed(self, token_ids) -> Tensor:
        token_ids = np.asarray(token_ids)
        L = token_ids.shape[1]
        if L > self.config.max_len:
            raise ConfigError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        tok = ag.embedding(token_ids, self.tok_emb)
        pos = ag.embedding(np.broadcast_to(np.arange(L), token_ids.shape), self.pos_emb)
        return ag.add(tok, pos)

    def forward(self, batch, plan=None, trace: bool = False, training: bool = False, rng=None,
                mixers: dict | None = None):
        """Logits ``[l, n_classes]`` and, when ``trace`` is set, a ForwardTrace.

        ``plan`` is any object with a ``mixers(n_layers)`` method returning a
        ``{HookSite: callable}`` map (see ``mixup.MixPlan``); an explicit
        ``mixers`` map may be passed instead.
        """
        n_layers = self.config.n_layers
        if plan is not None:
            mixers = plan.mixers(n_layers)
        mixers = dict(mixers or {})
        for site in mixers:
            site.validate(n_layers)
        if training and self.config.dropout > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")

        tr = ForwardTrace() if trace or mixers else None

        def hook(site, h):
            fn = mixers.get(site)
            if fn is None:
                return h
            out = fn(h)
            rec = getattr(fn, "record", None)
            if tr is not None and rec is not None:
                tr.hook_log.append(HookRecord(site, *rec))
            return out

        x = hook(HookSite(EMBEDDING), self.embed(batch.token_ids))
        for i, block in enumerate(self.blocks):
            site = HookSite(MHA_OUTPUT, i)
            mixer = (lambda h, s=site: hook(s, h)) if site in mixers else None
            x, attn = block(x, batch.pad_mask, mixer, training, rng)
            if trace:
                tr.attention_maps.append(attn)
            x = hook(HookSite(BLOCK_OUTPUT, i), x)
        pooled = hook(HookSite(POOLED), ag.getitem(x, (slice(None), 0)))
        logits = self.head(pooled)
        return logits, (tr if trace or mixers else None)

    __call__ = forward

    # checkpointing ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ConfigError(f"checkpoint parameter mismatch: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype)


def save_checkpoint(model: TransformerClassifier, path, meta: dict | None = None) -> None:
    """Write one raw little-endian float64 file per parameter plus ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, p in model.named_parameters():
        p.data.astype("<f8").tofile(path / f"{name}.bin")
        shapes[name] = list(p.shape)
    record = {"model_config": asdict(model.config), "parameters": shapes}
    record.update(meta or {})
    (path / "meta.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[TransformerClassifier, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    cfg = ModelConfig(**meta["model_config"])
    model = TransformerClassifier(cfg, np.random.default_rng(0))
    state = {
        name: np.fromfile(path / f"{name}.bin", dtype="<f8").reshape(shape)
        for name, shape in meta["parameters"].items()
    }
    model.load_state_dict(state)
    return model, meta


def dump_attention(trace: ForwardTrace, row_tokens: list[list[str]], path) -> None:
    """One JSON line per (example, layer, head) with the [seq x seq] weight matrix."""
    with open(path, "w") as fh:
        for layer, maps in enumerate(trace.attention_maps):
            for ex, labels in enumerate(row_tokens):
                n = len(labels)
                for head in range(maps.shape[1]):
                    rec = {
                        "example": ex,
                        "layer": layer,
                        "head": head,
                        "tokens": labels,
                        "weights": maps[ex, head, :n, :n].tolist(),
                    }
                    fh.write(json.dumps(rec) + "\n")
