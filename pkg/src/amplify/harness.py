"""Training loop, multi-seed experiments and summary tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import TrainConfig, format_config
from .data import (DELETE, SWAP, Example, NoiseSpec, Vocab, build_vocab, check_labels, dataset_hash,
                   pad_batch, perturb)
from .errors import DataError, DivergenceError
from .mixup import AMPLIFY, NO_MIXUP, StrategyConfig, mixed_loss, sample_plan
from .model import TransformerClassifier, save_checkpoint
from .optim import AdamW

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "split", "loss", "accuracy", "lr", "lambda_max"]
SUMMARY_HEADER = ["strategy", "kind", "proportion", "n", "seed_count", "mean_acc", "variance", "wall_time_s"]
DEFAULT_N_VALUES = [1, 3, 5, 7, 9, 20]
DEFAULT_PROPORTIONS = [0.05, 0.10, 0.15, 0.20]

# named RNG streams derived from the run seed
INIT, DATA_ORDER, MIX_PLAN, DROPOUT, VAL_SPLIT = range(5)


def stream(seed: int, name: int) -> np.random.Generator:
    return np.random.default_rng([seed, name])


def lr_at(step: float, total_steps: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 (or constant)."""
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant" or total_steps <= warm:
        return cfg.lr
    progress = min((step - warm) / (total_steps - warm), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def split_validation(examples, fraction: float, seed: int):
    """Deterministically carve ``fraction`` of ``examples`` off as a validation set."""
    n = len(examples)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise DataError(f"cannot carve a validation split from {n} examples")
    order = stream(seed, VAL_SPLIT).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in val_idx]
    val = [examples[i] for i in sorted(val_idx)]
    return train, val


def evaluate(model: TransformerClassifier, examples, vocab: Vocab, cfg: TrainConfig):
    """Mean cross-entropy and accuracy with mixing and dropout off."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(examples), cfg.eval_batch_size):
        chunk = examples[start:start + cfg.eval_batch_size]
        batch = pad_batch(chunk, vocab, cfg.model.max_len, pad_to_longest=True)
        logits, _ = model.forward(batch)
        total_loss += ag.cross_entropy_logits(logits, batch.labels).item() * len(chunk)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
    return total_loss / len(examples), correct / len(examples)


@dataclass
class SeedResult:
    seed: int
    best_val_accuracy: float
    test_accuracy: float
    epochs_run: int
    wall_time: float
    steps: int = 0


@dataclass
class RunResult:
    strategy: str
    per_seed: list[SeedResult]
    kind: str = "none"
    proportion: float = 0.0
    n: int = 1
    data_hash: str = ""
    noise_seed: int | None = None
    seeds: list[int] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.per_seed])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def variance(self) -> float:
        return float(self.accuracies.var())

    @property
    def wall_time(self) -> float:
        return float(sum(r.wall_time for r in self.per_seed))

    def row(self) -> list[str]:
        return [self.strategy, self.kind, repr(float(self.proportion)), str(self.n), str(len(self.per_seed)),
                repr(self.mean_accuracy), repr(self.variance), f"{self.wall_time:.3f}"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class _MetricsWriter:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.buf = io.StringIO()
        self.w = csv.writer(self.buf, lineterminator="\n")
        self.w.writerow(METRICS_HEADER)

    def row(self, step, epoch, split, loss, acc, lr=None, lam=None):
        self.w.writerow([step, epoch, split, _fmt(loss), _fmt(acc), _fmt(lr), _fmt(lam)])

    def close(self):
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(self.buf.getvalue())


def train(cfg: TrainConfig, train_set, val_set, test_set, seed: int, vocab: Vocab | None = None,
          metrics_path=None, checkpoint_dir=None) -> SeedResult:
    """Train one seed; returns best-validation and test accuracy of the best epoch.

    Each step draws one MixPlan (shared by every hook site), computes the
    two-ordering mixed loss, backpropagates and takes an AdamW step. Every
    epoch is validated with mixing off; training stops once validation
    accuracy fails to improve for ``early_stop_patience`` epochs.
    """
    if not train_set or not test_set:
        raise DataError("train and test sets must be nonempty")
    if val_set is None:
        train_set, val_set = split_validation(train_set, cfg.eval_split_fraction, seed)
    if vocab is None:
        vocab = build_vocab(train_set, cfg.min_count)
    if cfg.model.vocab_size != len(vocab):
        cfg = replace(cfg, model=replace(cfg.model, vocab_size=len(vocab)))
    for split in (train_set, val_set, test_set):
        check_labels(split, cfg.model.n_classes)
    strategy = cfg.strategy.resolved(cfg.model.n_layers)

    t0 = time.perf_counter()
    model = TransformerClassifier(cfg.model, stream(seed, INIT))
    opt = AdamW(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    order_rng, mix_rng, drop_rng = stream(seed, DATA_ORDER), stream(seed, MIX_PLAN), stream(seed, DROPOUT)
    metrics = _MetricsWriter(metrics_path)

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    step = 0

    _, best_val = evaluate(model, val_set, vocab, cfg)
    best_state, best_epoch, waited, epochs_run = model.state_dict(), 0, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            batch = pad_batch(chunk, vocab, cfg.model.max_len, pad_to_longest=True)
            plan = sample_plan(strategy, batch.size, cfg.model.n_layers, mix_rng)
            # overflow surfaces as a non-finite loss below, not as a numpy error
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                logits, trace = model.forward(batch, plan, training=True, rng=drop_rng)
                lam = plan.lambda_max if trace is not None and trace.hook_log else None
                if lam is None:
                    loss = ag.cross_entropy_logits(logits, batch.labels)
                else:
                    loss = mixed_loss(logits, batch.labels, plan.second_labels(batch.labels), lam)
            if not np.isfinite(loss.data):
                raise DivergenceError(step, lam, float(loss.data))
            opt.zero_grad()
            lr = lr_at(step, total_steps, cfg)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss.backward()
                opt.step(lr)
            acc = float((logits.data.argmax(axis=1) == batch.labels).mean())
            metrics.row(step, epoch, "train", loss.item(), acc, lr, lam)
            step += 1
        val_loss, val_acc = evaluate(model, val_set, vocab, cfg)
        metrics.row(step, epoch, "val", val_loss, val_acc)
        if val_acc > best_val:
            best_val, best_state, best_epoch, waited = val_acc, model.state_dict(), epoch, 0
        else:
            waited += 1
            if waited >= cfg.early_stop_patience:
                break

    model.load_state_dict(best_state)
    test_loss, test_acc = evaluate(model, test_set, vocab, cfg)
    metrics.row(step, best_epoch, "test", test_loss, test_acc)
    metrics.close()
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, {"seed": seed, "step": step, "best_epoch": best_epoch,
                                                "train_config": format_config(cfg)})
        vocab.save(Path(checkpoint_dir) / "vocab.json")
    return SeedResult(seed, best_val, test_acc, epochs_run, time.perf_counter() - t0, step)


# --------------------------------------------------------------------------
# experiments


@dataclass
class Data:
    """A clean train/test pair plus the vocabulary built from the clean train split."""

    train: list[Example]
    test: list[Example]
    val: list[Example] | None = None
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = build_vocab(self.train)

    @property
    def hash(self) -> str:
        return dataset_hash(self.train + self.test + (self.val or []))


def _seed_job(args):
    cfg, data, seed, noise, metrics_path, ckpt = args
    if data.val is None:
        tr, va = split_validation(data.train, cfg.eval_split_fraction, seed)
    else:
        tr, va = data.train, data.val
    if noise is not None and noise.proportion > 0:
        tr = perturb(tr, noise)
    return train(cfg, tr, va, data.test, seed, data.vocab, metrics_path, ckpt)


def _slug(*parts) -> str:
    return "_".join(str(p) for p in parts if p is not None and p != "").replace("/", "-")


def run_strategy(cfg: TrainConfig, strategy: StrategyConfig, data: Data, out_dir=None,
                 noise: NoiseSpec | None = None, save_checkpoints: bool = False) -> RunResult:
    """All seeds of one strategy (optionally on noise-perturbed training data)."""
    cfg = replace(cfg, strategy=strategy)
    label = strategy.label()
    tag = None if noise is None else f"{noise.kind}{noise.proportion:g}"
    jobs = []
    for seed in cfg.seeds:
        mpath = ckpt = None
        if out_dir is not None:
            out = Path(out_dir)
            mpath = out / "metrics" / f"{_slug(label, tag, 'n' + str(strategy.n_samples))}_seed{seed}.csv"
            if save_checkpoints:
                ckpt = out / "checkpoints" / _slug(label, tag, f"seed{seed}")
        jobs.append((cfg, data, seed, noise, mpath, ckpt))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(_seed_job, jobs))
    else:
        per_seed = [_seed_job(j) for j in jobs]
    res = RunResult(label, per_seed, n=strategy.n_samples, data_hash=data.hash, seeds=list(cfg.seeds))
    if noise is not None:
        res.kind, res.proportion, res.noise_seed = noise.kind, noise.proportion, noise.seed
    log.info("%s %s p=%s: mean=%.4f var=%.6f", label, res.kind, res.proportion, res.mean_accuracy, res.variance)
    return res


def compare(cfg: TrainConfig, strategies, data: Data, out_dir=None, save_checkpoints=False) -> list[RunResult]:
    if not strategies:
        raise ValueError("compare needs at least one strategy")
    results = [run_strategy(cfg, s, data, out_dir, save_checkpoints=save_checkpoints) for s in strategies]
    if out_dir is not None:
        write_summary(results, Path(out_dir) / "summary.csv")
    return results


def sweep_n(cfg: TrainConfig, data: Data, n_values=None, out_dir=None) -> list[RunResult]:
    n_values = list(DEFAULT_N_VALUES if n_values is None else n_values)
    if not n_values:
        raise ValueError("sweep_n needs at least one n")
    base = cfg.strategy if cfg.strategy.kind == AMPLIFY else StrategyConfig(AMPLIFY)
    strategies = [replace(base, n_samples=n) for n in n_values]
    return compare(cfg, strategies, data, out_dir)


def default_site_sets(n_layers: int) -> list[list[int] | None]:
    """All layers, then first, middle and last MHA layer (deduplicated)."""
    sets: list[list[int] | None] = [None]
    for i in (0, (n_layers - 1) // 2, n_layers - 1):
        if [i] not in sets:
            sets.append([i])
    return sets


def ablate_depth(cfg: TrainConfig, data: Data, site_sets=None, out_dir=None) -> list[RunResult]:
    """Amplify restricted to each MHA-layer subset (``None`` = all layers, ``[]`` = no mixing)."""
    if site_sets is None:
        site_sets = default_site_sets(cfg.model.n_layers)
    base = cfg.strategy if cfg.strategy.kind == AMPLIFY else StrategyConfig(AMPLIFY)
    strategies = []
    for layers in site_sets:
        strategies.append(replace(base, mix_layers=None if layers is None else sorted(layers)))
    return compare(cfg, strategies, data, out_dir)


def robustness(cfg: TrainConfig, data: Data, strategies, kinds=(DELETE, SWAP), proportions=None,
               out_dir=None) -> list[RunResult]:
    """One row per (kind, proportion, strategy); only the training split is perturbed."""
    proportions = list(DEFAULT_PROPORTIONS if proportions is None else proportions)
    results = []
    for kind in kinds:
        for p in proportions:
            noise = NoiseSpec(kind, p, cfg.noise_seed)
            for s in strategies:
                results.append(run_strategy(cfg, s, data, out_dir, noise=noise))
    if out_dir is not None:
        write_summary(results, Path(out_dir) / "summary.csv")
    return results


def format_summary(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def write_summary(results, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_summary(results))
    prov = [{"strategy": r.strategy, "kind": r.kind, "proportion": r.proportion, "n": r.n,
             "seeds": r.seeds, "data_hash": r.data_hash, "noise_seed": r.noise_seed,
             "per_seed": [asdict(s) | {"wall_time": None} for s in r.per_seed]} for r in results]
    path.with_name(path.stem + "_provenance.json").write_text(json.dumps(prov, indent=2) + "\n")


# --------------------------------------------------------------------------
# Welch t-test


@dataclass
class TTestResult:
    t: float
    p: float
    df: float


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _integrate(f, a: float, b: float) -> float:
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return half * float(np.dot(_GL_W, f(mid + half * _GL_X)))


def t_tail(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom, t >= 0.

    Substituting x = sqrt(df) * cot(phi) turns the tail into
    c * int_0^phi_max sin(phi)^(df-1) dphi, which is integrated with
    Gauss-Legendre on panels graded geometrically towards phi = 0.
    """
    if t < 0:
        return 1.0 - t_tail(-t, df)
    if math.isinf(t):
        return 0.0
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(math.pi)
    phi_max = math.atan2(math.sqrt(df), t)

    def f(phi):
        return np.sin(phi) ** (df - 1)

    total, hi = 0.0, phi_max
    for _ in range(60):
        lo = hi * 0.5
        total += _integrate(f, lo, hi)
        hi = lo
    total += _integrate(f, 0.0, hi)
    return c * total


def t_test(sample_a, sample_b) -> TTestResult:
    """Welch's two-sample t-test with a two-sided p-value."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, float(a.size + b.size - 2))
        return TTestResult(math.copysign(math.inf, diff), 0.0, float(a.size + b.size - 2))
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    # t == 0 gives p == 1 exactly rather than 1 - quadrature rounding
    p = 1.0 if diff == 0.0 else min(1.0, 2.0 * t_tail(abs(t), df))
    return TTestResult(float(t), p, float(df))
