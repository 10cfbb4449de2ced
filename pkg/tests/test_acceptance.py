"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed in the terminal summary.
"""
import csv
import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from amplify.cli import main
from amplify.config import TrainConfig
from amplify.data import DELETE, SWAP, Example, SyntheticSpec, build_vocab, gen_synthetic, pad_batch
from amplify.harness import SUMMARY_HEADER, Data, compare, robustness, t_test
from amplify.mixup import (AMPLIFY, EMBED_MIX, KINDS, NO_MIXUP, SENTENCE_MIX, TMIX, MixPlan, StrategyConfig,
                           baseline_lambda, make_permutation, mix_features, mixed_loss, mixed_loss_soft,
                           mixed_targets, sample_beta, sample_lambda_max, sample_plan)
from amplify.autograd import Tensor
from amplify.model import (BLOCK_OUTPUT, EMBEDDING, MHA_OUTPUT, POOLED, HookSite, ModelConfig,
                           TransformerClassifier)

from conftest import finite_difference, max_rel_error, random_examples

SEEDS = [0, 1, 2]


def _model_and_batch(rng, cfg: ModelConfig, batch_size: int, seq_hi: int):
    examples = random_examples(rng, batch_size, vocab_size=cfg.vocab_size - 3, lo=1, hi=seq_hi,
                               n_classes=cfg.n_classes)
    vocab = build_vocab(examples)
    model = TransformerClassifier(cfg, rng)
    return model, pad_batch(examples, vocab, cfg.max_len)


# 1 ---------------------------------------------------------------------------


def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = ModelConfig(vocab_size=20, max_len=8, d_model=16, n_heads=2, d_ff=32, n_layers=1, n_classes=3,
                      dropout=0.0, init_std=0.3)
    examples = [Example([f"t{int(i)}" for i in rng.integers(0, 17, size=7)], int(rng.integers(0, 3)))
                for _ in range(4)]
    model = TransformerClassifier(cfg, rng)
    batch = pad_batch(examples, build_vocab(examples), cfg.max_len)
    assert batch.token_ids.shape == (4, 8)
    plan = sample_plan(StrategyConfig(AMPLIFY), 4, 1, rng)
    while plan.lambda_max > 0.95 or np.array_equal(plan.index_r, np.arange(4)):
        plan = sample_plan(StrategyConfig(AMPLIFY), 4, 1, rng)
    gt_s = plan.second_labels(batch.labels)

    def loss():
        logits, trace = model.forward(batch, plan)
        assert len(trace.hook_log) == 1
        return mixed_loss(logits, batch.labels, gt_s, plan.lambda_max)

    model.zero_grad()
    loss().backward()
    params = model.parameters()
    nums = finite_difference(lambda: loss().item(), [p.data for p in params], step=1e-5)
    worst = max(max_rel_error(p.grad, n) for p, n in zip(params, nums))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    criterion(1, ok, f"max rel err {worst:.2e} over {sum(p.data.size for p in params)} params "
                     f"(lambda={plan.lambda_max:.3f}), {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_mixing_degeneracy(criterion):
    rng = np.random.default_rng(7)
    failures = []
    kinds = [AMPLIFY, EMBED_MIX, SENTENCE_MIX, TMIX]
    for case in range(1000):
        heads = int(rng.integers(1, 3))
        cfg = ModelConfig(vocab_size=15, max_len=int(rng.integers(3, 9)), d_model=4 * heads,
                          n_heads=heads, d_ff=8, n_layers=int(rng.integers(1, 4)), dropout=0.0,
                          init_std=float(rng.uniform(0.05, 1.0)))
        l = int(rng.integers(1, 7))
        model, batch = _model_and_batch(rng, cfg, l, 8)
        strat = StrategyConfig(kinds[case % 4]).resolved(cfg.n_layers)
        tmix = int(rng.choice(strat.tmix_layers)) if strat.kind == TMIX else None
        plain, _ = model.forward(batch)
        perm = make_permutation(l, rng)
        one, _ = model.forward(batch, MixPlan(perm, 1.0, strat, tmix))
        lam = float(rng.uniform(1e-6, 1.0))
        ident, _ = model.forward(batch, MixPlan(np.arange(l), lam, strat, tmix))
        h = rng.normal(scale=10.0 ** rng.uniform(-3, 3), size=(l, cfg.max_len, cfg.d_model))
        self_mix = mix_features(h, h, lam).data
        if not np.array_equal(plain.data, one.data):
            failures.append((case, "lambda=1"))
        if not np.array_equal(plain.data, ident.data):
            failures.append((case, "identity"))
        if not np.array_equal(self_mix, h):
            failures.append((case, "self-mix"))
    criterion(2, not failures, f"1000 cases x 3 properties, {len(failures)} non-bit-exact {failures[:3]}")
    assert not failures


# 3 ---------------------------------------------------------------------------


def test_loss_formulation_identity(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        l, n = int(rng.integers(1, 17)), int(rng.integers(2, 8))
        logits = rng.normal(scale=float(rng.uniform(0.1, 8.0)), size=(l, n))
        gt_o = rng.integers(0, n, size=l)
        perm = make_permutation(l, rng)
        gt_s = gt_o[perm]
        lam = float(rng.random())
        hard = mixed_loss(Tensor(logits), gt_o, gt_s, lam).item()
        soft = mixed_loss_soft(Tensor(logits), mixed_targets(gt_o, gt_s, lam, n)).item()
        worst = max(worst, abs(hard - soft))
    ok = worst <= 1e-9
    criterion(3, ok, f"max |hard - soft| = {worst:.2e} over 100 cases")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_weight_sampler_statistics(criterion):
    n_trials = 100_000
    rng = np.random.default_rng(4)
    ours = np.array([sample_lambda_max(0.1, 5, rng).lambda_max for _ in range(n_trials)])
    # independent oracle: numpy's Beta sampler, max over 5 columns
    oracle = np.random.default_rng(40).beta(0.1, 0.1, size=(n_trials, 5)).max(axis=1).mean()
    gap = abs(ours.mean() - oracle)
    base = np.array([baseline_lambda(0.2, rng) for _ in range(n_trials)])
    uni = np.array([sample_beta(1.0, rng) for _ in range(n_trials)])
    ok = gap <= 0.01 and base.min() >= 0.5 and abs(uni.mean() - 0.5) <= 0.01
    criterion(4, ok, f"lambda_max mean {ours.mean():.4f} vs oracle {oracle:.4f}; baseline min {base.min():.4f}; "
                     f"Beta(1,1) mean {uni.mean():.4f}")
    assert ok


# 5 and 6 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic():
    train_set, test_set = gen_synthetic(SyntheticSpec(n_classes=2, vocab_size=200, seq_len_range=(8, 24),
                                                      n_train=2000, n_test=500, noise_rate=0.05), 0)
    return Data(train_set, test_set)


@pytest.mark.slow
def test_end_to_end_desk_scale(criterion, synthetic):
    cfg = TrainConfig(max_epochs=20, seeds=SEEDS)
    t0 = time.perf_counter()
    none = compare(cfg, [StrategyConfig(NO_MIXUP)], synthetic)[0]
    no_mix_time = time.perf_counter() - t0
    amp = compare(cfg, [StrategyConfig(AMPLIFY)], synthetic)[0]
    per_seed_time = max(r.wall_time for r in none.per_seed)
    reached = min(none.accuracies) >= 0.93
    ok = reached and per_seed_time < 300 and amp.mean_accuracy >= none.mean_accuracy - 0.02
    criterion(5, ok, f"NoMixup test acc {none.accuracies.tolist()} (max {per_seed_time:.0f}s per run, "
                     f"{no_mix_time:.0f}s for 3 seeds); Amplify mean {amp.mean_accuracy:.4f} vs NoMixup "
                     f"{none.mean_accuracy:.4f} (delta {amp.mean_accuracy - none.mean_accuracy:+.4f})")
    assert ok


@pytest.mark.slow
def test_robustness_table(criterion, synthetic, tmp_path):
    cfg = TrainConfig(max_epochs=20, seeds=SEEDS)
    strategies = [StrategyConfig(k) for k in KINDS]
    t0 = time.perf_counter()
    rows = robustness(cfg, synthetic, strategies, (DELETE, SWAP), [0.05, 0.10, 0.15, 0.20], tmp_path)
    elapsed = time.perf_counter() - t0
    with open(tmp_path / "summary.csv") as fh:
        table = list(csv.reader(fh))
    shape_ok = table[0] == SUMMARY_HEADER and len(table) == 1 + 2 * 4 * len(KINDS)
    at = {(r.strategy, r.kind, r.proportion): r for r in rows}
    amp, none = at[(AMPLIFY, DELETE, 0.20)], at[(NO_MIXUP, DELETE, 0.20)]
    ok = shape_ok and amp.mean_accuracy >= none.mean_accuracy - 0.01 and elapsed < 1800
    criterion(6, ok, f"Delete 20%: Amplify {amp.mean_accuracy:.4f} vs NoMixup {none.mean_accuracy:.4f}; "
                     f"{len(table) - 1} rows; {elapsed / 60:.1f} min")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_hook_site_audit(criterion):
    rng = np.random.default_rng(17)
    cfg = ModelConfig(vocab_size=15, max_len=6, d_model=4, n_heads=1, d_ff=8, n_layers=4, dropout=0.1)
    model, batch = _model_and_batch(rng, cfg, 5, 5)
    tmix_set = StrategyConfig(TMIX).resolved(cfg.n_layers).tmix_layers
    problems = []
    for kind in KINDS:
        strat = StrategyConfig(kind)
        for step in range(1000):
            plan = sample_plan(strat, batch.size, cfg.n_layers, rng)
            _, trace = model.forward(batch, plan, trace=True, training=True, rng=rng)
            log = trace.hook_log
            if kind == NO_MIXUP:
                good = plan is None and log == []
            elif kind == AMPLIFY:
                good = ([r.site for r in log] == [HookSite(MHA_OUTPUT, i) for i in range(cfg.n_layers)]
                        and {r.lam for r in log} == {plan.lambda_max}
                        and {r.index_r for r in log} == {tuple(plan.index_r.tolist())})
            elif kind == TMIX:
                good = (len(log) == 1 and log[0].site.kind == BLOCK_OUTPUT
                        and log[0].site.layer_index in tmix_set and log[0].lam == plan.lambda_max >= 0.5)
            else:
                want = EMBEDDING if kind == EMBED_MIX else POOLED
                good = len(log) == 1 and log[0].site.kind == want and log[0].lam == plan.lambda_max >= 0.5
            if not good:
                problems.append((kind, step))
    criterion(7, not problems, f"{len(KINDS)} strategies x 1000 steps, {len(problems)} contract violations "
                               f"{problems[:3]}")
    assert not problems


# 8 ---------------------------------------------------------------------------


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _drop_wall_time(raw: bytes) -> list[list[str]]:
    rows = list(csv.reader(raw.decode().splitlines()))
    col = rows[0].index("wall_time_s")
    return [r[:col] + r[col + 1:] for r in rows]


def test_determinism(criterion, tmp_path, capsys):
    fast = ["--model.d_model", "8", "--model.d_ff", "16", "--seeds", "0,1", "--max_epochs", "2"]

    def commands(run: Path, data: Path):
        d = ["--train", str(data / "train.jsonl"), "--test", str(data / "test.jsonl")]
        return [
            ["gen-data", "--out", str(data), "--n-train", "150", "--n-test", "50", "--seed", "3"],
            ["train", *d, "--out", str(run / "train"), *fast, "--strategy.kind", "Amplify"],
            ["compare", *d, "--out", str(run / "compare"), *fast],
            ["sweep-n", *d, "--out", str(run / "sweep"), *fast, "--n-values", "1,5"],
            ["ablate-depth", *d, "--out", str(run / "ablate"), *fast],
            ["robustness", *d, "--out", str(run / "robust"), *fast, "--strategies", "NoMixup,Amplify",
             "--proportions", "0.1"],
            ["eval", "--checkpoint", str(run / "train" / "checkpoints" / "Amplify_seed0"),
             "--data", str(data / "test.jsonl"), "--dump-attention", str(run / "attention")],
            ["ttest", "--a", "0.81,0.83,0.82", "--b", "0.80,0.79,0.815"],
        ]

    outputs = []
    for rep in range(2):
        run, data = tmp_path / f"run{rep}", tmp_path / f"run{rep}" / "data"
        stdout = []
        for argv in commands(run, data):
            assert main(argv) == 0, argv
            stdout.append(capsys.readouterr().out)
        outputs.append((_tree(run), stdout))
    (files_a, out_a), (files_b, out_b) = outputs
    diffs = []
    if set(files_a) != set(files_b):
        diffs.append("file sets differ")
    for name in sorted(set(files_a) & set(files_b)):
        a, b = files_a[name], files_b[name]
        if name.endswith("summary.csv"):
            same = _drop_wall_time(a) == _drop_wall_time(b)
        else:
            same = a.replace(b"run0", b"runX") == b.replace(b"run1", b"runX")
        if not same:
            diffs.append(name)
    for i, (a, b) in enumerate(zip(out_a, out_b)):
        a, b = a.replace("run0", "runX"), b.replace("run1", "runX")
        if a.startswith("strategy,"):  # summary table on stdout
            same = _drop_wall_time(a.encode()) == _drop_wall_time(b.encode())
        else:
            same = a == b
        if not same:
            diffs.append(f"stdout of command {i}")
    n_metrics = sum(1 for n in files_a if "/metrics/" in n or n.startswith("metrics"))
    criterion(8, not diffs, f"8 commands run twice; {len(files_a)} files ({n_metrics} metrics CSVs) compared, "
                            f"mismatches: {diffs or 'none'}")
    assert not diffs


# 9 ---------------------------------------------------------------------------


def _quadrature_p(a, b):
    """Two-sided Welch p by direct mpmath quadrature of the Student-t density."""
    mpmath.mp.dps = 30
    va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
    t = abs((np.mean(a) - np.mean(b)) / math.sqrt(va + vb))
    nu = mpmath.mpf((va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1)))
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), [t, t + 1, mpmath.inf])
    return float(2 * tail)


def test_t_test_utility(criterion):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 3), size=rng.integers(2, 20))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 3), size=rng.integers(2, 20))
        worst = max(worst, abs(t_test(a, b).p - _quadrature_p(a, b)))
    same = rng.normal(size=8)
    p_same = t_test(same, same.copy()).p
    ok = worst <= 1e-4 and p_same == 1.0
    criterion(9, ok, f"max |p - oracle| = {worst:.2e} over 50 pairs; identical samples p = {p_same}")
    assert ok
