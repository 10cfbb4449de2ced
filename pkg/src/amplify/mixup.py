"""Mixup strategies: weight sampling, batch permutation, feature interpolation and losses.

AMPLIFY mixes the output of every multi-head-attention sublayer with a copy of
itself reordered by one batch permutation, using a single weight (the max of
``n`` symmetric Beta draws) shared by every layer in the step. The baselines
mix once per step at the embedding output (EmbedMix), the pooled sentence
vector (SentenceMix) or one randomly chosen block output (TMix), each with a
folded single Beta draw.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .errors import ConfigError
from .model import BLOCK_OUTPUT, EMBEDDING, MHA_OUTPUT, POOLED, HookSite

NO_MIXUP = "NoMixup"
AMPLIFY = "Amplify"
EMBED_MIX = "EmbedMix"
SENTENCE_MIX = "SentenceMix"
TMIX = "TMix"
KINDS = (NO_MIXUP, AMPLIFY, EMBED_MIX, SENTENCE_MIX, TMIX)

_ONE_BELOW = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(np.float64).tiny)


def default_tmix_layers(depth: int) -> list[int]:
    """Map BERT-base's 7th/9th/12th blocks proportionally onto a ``depth``-block model (0-based)."""
    return sorted({math.ceil(7 * depth / 12) - 1, math.ceil(9 * depth / 12) - 1, depth - 1})


@dataclass
class StrategyConfig:
    kind: str = NO_MIXUP
    alpha: float | None = None
    n_samples: int | None = None
    tmix_layers: list[int] | None = None
    # MHA layers eligible for Amplify; None means every layer
    mix_layers: list[int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.alpha is None:
            self.alpha = 0.1 if self.kind == AMPLIFY else 0.2
        if self.n_samples is None:
            self.n_samples = 5 if self.kind == AMPLIFY else 1
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.tmix_layers is not None and self.kind != TMIX:
            raise ConfigError("tmix_layers only applies to TMix")
        if self.kind == TMIX and self.tmix_layers is not None and not self.tmix_layers:
            raise ConfigError("TMix needs a nonempty tmix_layers")
        if self.mix_layers is not None and self.kind != AMPLIFY:
            raise ConfigError("mix_layers only applies to Amplify")

    def resolved(self, n_layers: int) -> "StrategyConfig":
        """Fill depth-dependent defaults and check layer indices against ``n_layers``."""
        out = replace(self)
        if out.kind == TMIX and out.tmix_layers is None:
            out.tmix_layers = default_tmix_layers(n_layers)
        for layers in (out.tmix_layers, out.mix_layers):
            for i in layers or ():
                if not 0 <= i < n_layers:
                    raise ConfigError(f"layer index {i} out of range for {n_layers} layers")
        return out

    def label(self) -> str:
        if self.kind == AMPLIFY and self.mix_layers is not None:
            return f"{self.kind}@{'-'.join(map(str, self.mix_layers)) or 'none'}"
        return self.kind


@dataclass
class WeightSample:
    lambdas: list[float]
    lambda_max: float


@dataclass
class MixPlan:
    index_r: np.ndarray
    lambda_max: float
    strategy: StrategyConfig
    tmix_layer: int | None = None
    weights: WeightSample | None = field(default=None, repr=False)

    def __post_init__(self):
        self.index_r = np.asarray(self.index_r, dtype=np.intp)
        if not 0.0 < self.lambda_max <= 1.0:
            raise ConfigError(f"lambda_max must lie in (0, 1], got {self.lambda_max}")

    def sites(self, n_layers: int) -> list[HookSite]:
        kind = self.strategy.kind
        if kind == NO_MIXUP:
            return []
        if kind == AMPLIFY:
            layers = range(n_layers) if self.strategy.mix_layers is None else self.strategy.mix_layers
            return [HookSite(MHA_OUTPUT, i) for i in layers]
        if kind == EMBED_MIX:
            return [HookSite(EMBEDDING)]
        if kind == SENTENCE_MIX:
            return [HookSite(POOLED)]
        if self.tmix_layer is None:
            raise ConfigError("TMix plan without a selected layer")
        return [HookSite(BLOCK_OUTPUT, self.tmix_layer)]

    def mixers(self, n_layers: int) -> dict:
        return build_mixer(self, n_layers)

    def second_labels(self, labels) -> np.ndarray:
        return reorder(np.asarray(labels), self.index_r)


# --------------------------------------------------------------------------
# sampling


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """One draw from Beta(alpha, alpha).

    alpha <= 1 uses Johnk's rejection method (in log space so tiny powers do
    not underflow); alpha > 1 uses the ratio of two Gamma draws. Results are
    clamped into the open interval (0, 1).
    """
    if not alpha > 0:
        raise ValueError(f"Beta shape must be > 0, got {alpha}")
    if alpha > 1.0:
        x = rng.standard_gamma(alpha)
        y = rng.standard_gamma(alpha)
        lam = x / (x + y)
    else:
        inv = 1.0 / alpha
        while True:
            u, v = rng.random(), rng.random()
            if u == 0.0 or v == 0.0:
                continue
            lx, ly = math.log(u) * inv, math.log(v) * inv
            if np.logaddexp(lx, ly) <= 0.0:
                break
        d = ly - lx
        lam = 1.0 / (1.0 + math.exp(d)) if d <= 0 else math.exp(-d) / (1.0 + math.exp(-d))
    return min(max(lam, _TINY), _ONE_BELOW)


def sample_lambda_max(alpha: float, n: int, rng: np.random.Generator) -> WeightSample:
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    lambdas = [sample_beta(alpha, rng) for _ in range(n)]
    return WeightSample(lambdas, max(lambdas))


def fold_lambda(lam: float) -> float:
    return min(max(lam, 1.0 - lam), _ONE_BELOW)


def baseline_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Folded single draw used by the baselines; always in [0.5, 1)."""
    return fold_lambda(sample_beta(alpha, rng))


def make_permutation(l: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of ``range(l)`` by Fisher-Yates."""
    if l < 1:
        raise ValueError(f"batch size must be >= 1, got {l}")
    perm = np.arange(l)
    for i in range(l - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_plan(strategy: StrategyConfig, batch_size: int, n_layers: int,
                rng: np.random.Generator) -> MixPlan | None:
    """Draw the one plan shared by every hook site in a training step (None for NoMixup)."""
    strategy = strategy.resolved(n_layers)
    if strategy.kind == NO_MIXUP:
        return None
    index_r = make_permutation(batch_size, rng)
    weights = None
    if strategy.kind == AMPLIFY:
        weights = sample_lambda_max(strategy.alpha, strategy.n_samples, rng)
        lam = weights.lambda_max
    else:
        lam = baseline_lambda(strategy.alpha, rng)
    tmix_layer = None
    if strategy.kind == TMIX:
        tmix_layer = int(strategy.tmix_layers[int(rng.integers(0, len(strategy.tmix_layers)))])
    return MixPlan(index_r, lam, strategy, tmix_layer, weights)


# --------------------------------------------------------------------------
# feature operations


def reorder(x, index_r):
    """Row ``i`` of the result is row ``index_r[i]`` of ``x``.

    Works on Tensors, numpy arrays, lists and Batch-like objects (every array
    field with a leading batch dimension is reordered together).
    """
    index_r = np.asarray(index_r, dtype=np.intp)
    if isinstance(x, Tensor):
        return ag.take_rows(x, index_r)
    if isinstance(x, np.ndarray):
        if x.shape[:1] != index_r.shape:
            raise ShapeError(f"reorder: index length {len(index_r)} vs leading dim {x.shape}")
        return x[index_r]
    if isinstance(x, (list, tuple)):
        if len(x) != len(index_r):
            raise ShapeError(f"reorder: index length {len(index_r)} vs {len(x)} items")
        return type(x)(x[i] for i in index_r)
    if hasattr(x, "reordered"):
        return x.reordered(index_r)
    raise TypeError(f"cannot reorder {type(x).__name__}")


def lerp(a, b, lam: float):
    """``lam * a + (1 - lam) * b``, computed as ``b + lam * (a - b)``.

    The endpoints return the operand itself, and ``a == b`` gives ``b``
    exactly, so the no-op cases of mixing are bit-exact.
    """
    if lam == 1.0:
        return a
    if lam == 0.0:
        return b
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ag.add(b, ag.scale(ag.sub(a, b), lam))
    return b + lam * (a - b)


def mix_features(h_o: Tensor, h_s: Tensor, lam: float) -> Tensor:
    h_o, h_s = ag.as_tensor(h_o), ag.as_tensor(h_s)
    if h_o.shape != h_s.shape:
        raise ShapeError(f"mix_features: shape mismatch {h_o.shape} vs {h_s.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lerp(h_o, h_s, lam)


def _site_mixer(index_r: np.ndarray, lam: float):
    def mix(h: Tensor) -> Tensor:
        return mix_features(h, reorder(h, index_r), lam)

    mix.record = (lam, tuple(int(i) for i in index_r))
    return mix


def build_mixer(plan: MixPlan | None, n_layers: int) -> dict:
    """Map each hook site the strategy intercepts to its mixing transform."""
    if plan is None:
        return {}
    strategy = plan.strategy.resolved(n_layers)
    if strategy.kind == TMIX and plan.tmix_layer not in strategy.tmix_layers:
        raise ConfigError(f"TMix layer {plan.tmix_layer} not in {strategy.tmix_layers}")
    sites = plan.sites(n_layers)
    for site in sites:
        site.validate(n_layers)
    return {site: _site_mixer(plan.index_r, plan.lambda_max) for site in sites}


# --------------------------------------------------------------------------
# losses


def mixed_loss(logits: Tensor, gt_o, gt_s, lam: float) -> Tensor:
    """``lam * CE(logits, gt_o) + (1 - lam) * CE(logits, gt_s)``."""
    gt_o, gt_s = np.asarray(gt_o), np.asarray(gt_s)
    if gt_o.shape != gt_s.shape:
        raise ShapeError(f"mixed_loss: label lengths differ {gt_o.shape} vs {gt_s.shape}")
    if lam == 1.0 or np.array_equal(gt_o, gt_s):
        return ag.cross_entropy_logits(logits, gt_o)
    return lerp(ag.cross_entropy_logits(logits, gt_o), ag.cross_entropy_logits(logits, gt_s), lam)


def mixed_loss_soft(logits: Tensor, y_mix) -> Tensor:
    y_mix = np.asarray(y_mix, dtype=np.float64)
    if y_mix.ndim != 2 or np.any(np.abs(y_mix.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("mixed_loss_soft: each target row must sum to 1")
    if np.any(y_mix < 0):
        raise ValueError("mixed_loss_soft: negative target probability")
    return ag.soft_cross_entropy(logits, y_mix)


def mixed_targets(gt_o, gt_s, lam: float, n_classes: int) -> np.ndarray:
    eye = np.eye(n_classes)
    return lam * eye[np.asarray(gt_o)] + (1.0 - lam) * eye[np.asarray(gt_s)]
