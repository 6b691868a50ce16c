"""Acceptance criteria 1-12, one test each.

Each check prints ``CRITERION <n> PASS|FAIL: ...``; the lines are repeated in
the pytest terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import functools
import json
import math
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from xdomainmix import _pykernels, kernels
from xdomainmix import augmentation as aug
from xdomainmix import autodiff as ad
from xdomainmix import data, decomposition, experiments, metrics, models, training
from xdomainmix.config import ExperimentConfig

REPORT: dict = {}
SEEDS = range(5)
METHODS = ("erm", "xdomainmix", "mixstyle", "dsu")
DEFAULT_CONFIG = {"dataset": {"kind": "spurious_blobs"}, "train": {"method": "xdomainmix"}}


def report(n: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail} [{seconds:.1f}s]"
    REPORT[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared trained models for the directional criteria
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def trained_grid():
    """(method, seed) -> (TrainResult, bundle) on SpuriousBlobs defaults, plus wall time."""
    cfg = ExperimentConfig.from_dict(DEFAULT_CONFIG)
    start = time.perf_counter()
    grid = {}
    for seed in SEEDS:
        for method in METHODS:
            grid[(method, seed)] = experiments.train_from_config(cfg, seed, method=method)
    return grid, time.perf_counter() - start


# ---------------------------------------------------------------------------
# criterion 1: gradients vs central differences
# ---------------------------------------------------------------------------

def np_mlp(layers, x):
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def np_ce(logits, labels):
    s = logits - logits.max(1, keepdims=True)
    return float(np.mean(np.log(np.exp(s).sum(1)) - s[np.arange(len(labels)), labels]))


def random_network(rng):
    d_in, k = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    arch = models.ArchConfig(d_in, int(rng.integers(2, 4)), int(rng.integers(2, 4)), feature_dim=k,
                             extractor_hidden=tuple(int(v) for v in rng.integers(2, 6, rng.integers(0, 3))),
                             head_hidden=tuple(int(v) for v in rng.integers(2, 5, rng.integers(0, 2))))
    params = models.init(arch, rng)
    for group in models.GROUPS:
        layers = params.group(group)
        for i, (w, b) in enumerate(layers):
            layers[i] = (w, rng.standard_normal(b.shape) * 0.5)
    b = int(rng.integers(2, 6))
    x = rng.standard_normal((b, d_in))
    return params, x, rng.integers(0, arch.num_classes, b), rng.integers(0, arch.num_domains, b)


def check_network(params, x, y, d):
    g = ad.Graph()
    p = params.bind(g)
    z = models.extract(p, g.constant(x))
    loss = ad.add(ad.softmax_cross_entropy(models.classify(p, z), y),
                  ad.softmax_cross_entropy(models.domain_classify(p, z), d))
    grads = ad.backward(loss)
    named = params.named()

    def total(values):
        local = models.ModelParams.from_named(values, params.arch)
        zz = np_mlp(local.extractor, x)
        return np_ce(np_mlp(local.class_head, zz), y) + np_ce(np_mlp(local.domain_head, zz), d)

    worst = 0.0
    for name, tensor in p.named().items():
        values = {k: v.copy() for k, v in named.items()}
        numeric = ad.finite_difference(lambda v: total({**values, name: v}), values[name], 1e-5)
        worst = max(worst, ad.numeric_rel_error(grads[tensor], numeric))

    def from_features(zz):
        return np_ce(np_mlp(params.class_head, zz), y) + np_ce(np_mlp(params.domain_head, zz), d)

    numeric_z = ad.finite_difference(from_features, z.value.copy(), 1e-5)
    worst = max(worst, ad.numeric_rel_error(grads[z], numeric_z))

    # per-sample logit gradients
    g2 = ad.Graph()
    zt = g2.param(z.value)
    heads = params.bind(g2, trainable=())
    analytic = ad.logit_grads_wrt(zt, models.classify(heads, zt), y)
    for b in range(len(y)):
        row = z.value[b:b + 1].copy()
        numeric = ad.finite_difference(lambda r: float(np_mlp(params.class_head, r)[0, y[b]]), row, 1e-5)
        worst = max(worst, ad.numeric_rel_error(analytic[b:b + 1], numeric))
    return worst


def test_criterion_01_autodiff_matches_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = max(check_network(*random_network(rng)) for _ in range(100))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-6 and elapsed < 30, f"max relative error {worst:.2e} over 100 networks (< 1e-6)", elapsed)


# ---------------------------------------------------------------------------
# criteria 2-4: decomposition and augmentation identities
# ---------------------------------------------------------------------------

def test_criterion_02_decomposition_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(1000):
        shape = (int(rng.integers(1, 9)), int(rng.integers(2, 33)))
        z = rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 4)
        m_c = (rng.random(shape) < rng.random()).astype(float)
        m_d = (rng.random(shape) < rng.random()).astype(float)
        parts = decomposition.decompose(z, m_c, m_d)
        ok &= np.array_equal(parts.total(), z)
        support = sum((c != 0).astype(int) for c in (parts.z_cd, parts.z_cnd, parts.z_ncd, parts.z_ncnd))
        ok &= bool(np.all(support <= 1))
    elapsed = time.perf_counter() - start
    report(2, bool(ok) and elapsed < 5, "1000 draws: components sum to Z bitwise, supports disjoint", elapsed)


def test_criterion_03_mask_cardinality():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    scores = np.stack([rng.permutation(32) + rng.random() for _ in range(1000)]).astype(float)
    assert all(len(set(row)) == 32 for row in scores)
    counts = {}
    for name, mod in [("active", kernels), ("python", _pykernels)] + (
            [("compiled", kernels.compiled_module())] if kernels.compiled_module() else []):
        for q in (0.5, 0.9):
            masks, _ = mod.nearest_rank_masks(scores, decomposition.nearest_rank(q, 32))
            counts[(name, q)] = set(masks.sum(1).astype(int).tolist())
    via_api = {q: set(decomposition.build_masks(scores, q)[0].sum(1).astype(int).tolist()) for q in (0.5, 0.9)}
    ok = all(v == {16} for (n, q), v in counts.items() if q == 0.5) and \
        all(v == {3} for (n, q), v in counts.items() if q == 0.9) and via_api == {0.5: {16}, 0.9: {3}}
    elapsed = time.perf_counter() - start
    report(3, ok and elapsed < 5, f"K=32: q=0.5 -> {via_api[0.5]}, q=0.9 -> {via_api[0.9]} ones per row, all backends", elapsed)


def test_criterion_04_augmentation_endpoints():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    identity_ok = True
    for _ in range(200):
        n = 30
        z = rng.standard_normal((n, 32))
        classes, domains = rng.integers(0, 2, n), rng.integers(0, 3, n)
        masks = decomposition.compute_masks(rng.standard_normal(z.shape), rng.standard_normal(z.shape),
                                            float(rng.choice([0.5, 0.6, 0.7, 0.8, 0.9])))
        plan = aug.draw_plan(classes, domains, rng, p_discard=0.0)
        plan = aug.AugmentationPlan(plan.i_index, plan.j_index, np.ones(n), np.ones(n), plan.discard)
        g = ad.Graph()
        identity_ok &= np.array_equal(aug.xdomainmix_array(z, masks, plan), z)
        identity_ok &= np.array_equal(aug.xdomainmix_tensor(g.param(z), masks, plan).value, z)
    discards = []
    draw_rng = np.random.default_rng(40)
    while sum(len(d) for d in discards) < 10_000:
        plan = aug.draw_plan(np.tile([0, 1], 15), np.repeat([0, 1, 2], 10), draw_rng, p_discard=0.2)
        discards.append(plan.discard)
    rate = float(np.concatenate(discards)[:10_000].mean())
    elapsed = time.perf_counter() - start
    report(4, bool(identity_ok) and 0.18 <= rate <= 0.22 and elapsed < 5,
           f"identity path bitwise; discard rate {rate:.4f} over 10k samples (in [0.18, 0.22])", elapsed)


def test_criterion_05_schedule():
    start = time.perf_counter()
    got = [training.tau_d_level(t, 100) for t in range(1000)]
    want = [0.9 - 0.1 * math.floor((t % 500) / 100) for t in range(1000)]
    elapsed = time.perf_counter() - start
    report(5, got == want, f"1000 levels equal the closed form exactly; distinct levels {sorted(set(got), reverse=True)}", elapsed)


# ---------------------------------------------------------------------------
# criterion 6: metric oracles
# ---------------------------------------------------------------------------

def exact_population_variance(values):
    xs = [Fraction(v) for v in values]
    mean = sum(xs) / len(xs)
    return float(sum((x - mean) ** 2 for x in xs) / len(xs))


def test_criterion_06_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    a = rng.standard_normal((300, 8))
    mmd_self = metrics.mmd(a, a)
    two_point = metrics.mmd([[0.0]], [[1.0]], 1.0)
    z = rng.standard_normal((500, 6))
    same = metrics.covariance_distance(np.vstack([z, z]), np.zeros(1000, int), np.repeat([0, 1], 500))
    k = 8
    big = np.vstack([rng.standard_normal((10_000, k)), math.sqrt(2.0) * rng.standard_normal((10_000, k))])
    i_vs_2i = metrics.covariance_distance(big, np.zeros(20_000, int), np.repeat([0, 1], 10_000))
    rv = metrics.risk_variance([0.0, 0.2])
    # correctly rounded variance of the stored doubles, for the report
    rv_exact = exact_population_variance([0.0, 0.2])
    ok = (mmd_self < 1e-12 and abs(two_point - (2 - 2 * math.exp(-0.5))) <= 1e-9 and same == 0.0
          and abs(i_vs_2i - k) <= 0.05 * k and rv == 0.01)
    elapsed = time.perf_counter() - start
    report(6, ok and elapsed < 60,
           f"mmd(A,A)={mmd_self:.1e}, two-point={two_point:.9f}, cov(same)={same}, "
           f"cov(I vs 2I)={i_vs_2i:.3f} (K={k}), risk_variance([0,0.2])={rv!r} "
           f"(want 0.01 exactly; correctly rounded value for these doubles is {rv_exact!r})", elapsed)


# ---------------------------------------------------------------------------
# criteria 7-10: directional reproductions
# ---------------------------------------------------------------------------

def per_method(field):
    grid, _ = trained_grid()
    return {m: np.array([getattr(grid[(m, s)][0].selected, field) for s in SEEDS]) for m in METHODS}


def test_criterion_07_test_accuracy_ordering():
    grid, elapsed = trained_grid()
    acc = per_method("test_acc")
    mean = {m: float(v.mean()) for m, v in acc.items()}
    ok = mean["xdomainmix"] > mean["erm"] and mean["xdomainmix"] >= mean["mixstyle"] and \
        mean["xdomainmix"] >= mean["dsu"]
    report(7, ok and elapsed < 900, "mean test acc over 5 seeds " + ", ".join(f"{m} {v:.4f}" for m, v in mean.items()),
           elapsed)


def test_criterion_08_mmd_ordering():
    grid, _ = trained_grid()
    start = time.perf_counter()
    wins_dsu = wins_ms = 0
    shared_ok = True
    details = []
    for seed in SEEDS:
        result, bundle = grid[("xdomainmix", seed)]
        tc = ExperimentConfig.from_dict(DEFAULT_CONFIG).train_config(seed)
        rows = {r["method"]: r for r in experiments.mmd_for_model(result.params, bundle, tc, seed)}
        shared_ok &= len({r["feature_sha1"] for r in rows.values()}) == 1
        shared_ok &= len({r["bandwidth"] for r in rows.values()}) == 1
        shared_ok &= rows["identity"]["mmd"] < 1e-12
        wins_dsu += rows["xdomainmix"]["mmd"] > rows["dsu"]["mmd"]
        wins_ms += rows["xdomainmix"]["mmd"] > rows["mixstyle"]["mmd"]
        details.append("/".join(f"{rows[m]['mmd']:.2e}" for m in ("xdomainmix", "dsu", "mixstyle")))
    elapsed = time.perf_counter() - start
    report(8, bool(shared_ok) and wins_dsu >= 4 and wins_ms >= 4 and elapsed < 600,
           f"xdomainmix > dsu in {wins_dsu}/5, > mixstyle in {wins_ms}/5 seeds (xdm/dsu/ms: {', '.join(details)})",
           elapsed)


def test_criterion_09_risk_variance():
    _, elapsed = trained_grid()
    rv = per_method("risk_variance")
    xdm, erm = float(rv["xdomainmix"].mean()), float(rv["erm"].mean())
    report(9, xdm <= erm, f"mean risk variance xdomainmix {xdm:.3e} vs erm {erm:.3e}", elapsed)


def test_criterion_10_feature_removal():
    grid, _ = trained_grid()
    start = time.perf_counter()
    wins = {"class": 0, "domain": 0}
    details = []
    for seed in SEEDS:
        result, bundle = grid[("xdomainmix", seed)]
        for target in wins:
            imp = experiments.removal_table(result.params, bundle, "importance", [0.5], target, seed)[0][1]
            rnd = experiments.removal_table(result.params, bundle, "random", [0.5], target, seed)[0][1]
            wins[target] += imp < rnd
            details.append(f"{target[0]}{seed}:{imp:.3f}<{rnd:.3f}")
    elapsed = time.perf_counter() - start
    report(10, wins["class"] >= 4 and wins["domain"] >= 4 and elapsed < 300,
           f"importance < random at 0.5: class {wins['class']}/5, domain {wins['domain']}/5 ({' '.join(details)})",
           elapsed)


# ---------------------------------------------------------------------------
# criteria 11-12: gradient isolation and run determinism
# ---------------------------------------------------------------------------

def test_criterion_11_gradient_isolation():
    start = time.perf_counter()
    bundle = data.make_dataset("spurious_blobs", {}, 0)
    arch = models.ArchConfig(bundle.input_dim, bundle.num_classes, bundle.num_domains)
    params = models.init(arch, np.random.default_rng(0))
    batch = next(data.make_batches(bundle, 30, np.random.default_rng(0)))
    variants = {
        "xdomainmix": dict(method="xdomainmix"),
        "xdomainmix+soft": dict(method="xdomainmix", domain_head_on_augmented=True),
        "mixstyle": dict(method="mixstyle", mixstyle_prob=1.0),
        "dsu": dict(method="dsu", dsu_prob=1.0),
    }
    ok = True
    for flags in variants.values():
        cfg = training.TrainConfig(warmup_steps=10, **flags)
        sg = training.build_step(params, batch, cfg, 10, np.random.default_rng(1), bundle.num_domains)
        g_aug = ad.backward(sg.class_loss)
        g_dom = ad.backward(sg.domain_loss)
        ok &= all(np.all(g_aug[t] == 0) for wb in sg.params.domain_head for t in wb)
        ok &= all(np.all(g_dom[t] == 0) for wb in sg.params.extractor for t in wb)
        ok &= any(np.any(g_aug[t] != 0) for wb in sg.params.extractor for t in wb)
        ok &= any(np.any(g_dom[t] != 0) for wb in sg.params.domain_head for t in wb)
    elapsed = time.perf_counter() - start
    report(11, bool(ok), f"exact zeros for {', '.join(variants)} at the first phase-2 step", elapsed)


def test_criterion_12_run_determinism(tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(DEFAULT_CONFIG))
    outputs = []
    for name in ("first", "second"):
        proc = subprocess.run([sys.executable, "-m", "xdomainmix", "run", "--config", str(cfg), "--seed", "7",
                               "--out", str(tmp_path / name)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    elapsed = time.perf_counter() - start
    report(12, outputs[0] == outputs[1] and len(outputs[0]) > 0,
           f"two `run` invocations, seed 7: metrics.csv byte-identical ({len(outputs[0])} bytes)", elapsed)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
