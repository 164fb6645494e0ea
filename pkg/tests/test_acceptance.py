"""Acceptance gates. Each test carries a ``criterion`` marker; the terminal summary prints one PASS/FAIL line per gate."""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import rel_err
from idaa_lab import attack as A
from idaa_lab import bench as B
from idaa_lab import cli
from idaa_lab import numgrad as ng
from idaa_lab import xform as X
from idaa_lab.attack import AttackConfig, AttackOutcome
from idaa_lab.data import synth_dataset
from idaa_lab.mixup import MixupConfig, mix_once, sample_region
from idaa_lab.models import ModelSpec, forward, init_weights, save_weights, train

SEEDS = (0, 1, 2, 3, 4)
GRID_SAMPLES = 60  # tasks per seed in the transfer grid
ARCHS = (("mlp-2", 1), ("cnn-small", 2), ("cnn-wide", 3))


def _detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Three differently seeded models on the default synthetic data, saved to disk."""
    train_set = synth_dataset(0)
    pool = synth_dataset(1, per_class=30)
    d = tmp_path_factory.mktemp("acceptance_models")
    models, paths = {}, {}
    for arch, seed in ARCHS:
        w = train(ModelSpec(arch, train_set.shape, train_set.n_classes), train_set, epochs=20, seed=seed, test=pool)
        assert w.history["test_acc"] >= 0.95, (arch, w.history["test_acc"])
        p = d / f"{arch}.advw"
        save_weights(w, p)
        models[arch], paths[arch] = w, str(p)
    return {"models": models, "paths": paths, "pool": pool}


def _grid_config(world, seed, methods, attack=AttackConfig(), surrogates=None):
    p = world["paths"]
    return B.ExperimentConfig(
        targets=tuple(p[a] for a, _ in ARCHS),
        surrogates=tuple(p[a] for a in (surrogates or [a for a, _ in ARCHS])),
        methods=methods,
        attack=attack,
        samples=GRID_SAMPLES,
        seed=seed,
    )


def _run(world, cfg):
    loaded = {world["paths"][a]: world["models"][a] for a, _ in ARCHS}
    return B.run_experiment(cfg, models=loaded, dataset=world["pool"])


@pytest.fixture(scope="module")
def grid(world):
    """Per seed: IDAA, DIM and MI from every surrogate, scored on all three models."""
    return [_run(world, _grid_config(world, s, ("idaa", "dim", "mi"))) for s in SEEDS]


def _black_box_mean(reports, method, metric, surrogate=None):
    per_seed = []
    for rep in reports:
        rows = [r for r in rep.find(method, white_box=False) if surrogate is None or r.surrogates == (surrogate,)]
        per_seed.append(np.mean([getattr(r, metric) for r in rows]))
    return float(np.mean(per_seed))


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "constraint suite: box and budget hold with no clipping")
def test_criterion_1_constraint_suite(request, monkeypatch):
    clips = []
    real_clip = np.clip

    def counting_clip(*a, **k):
        clips.append(1)
        return real_clip(*a, **k)

    monkeypatch.setattr(np, "clip", counting_clip)
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_box, worst_budget = 0.0, -np.inf
    for _ in range(1000):
        eps = float(rng.choice([0.01, 0.03, 0.05, 0.07]))
        shape = (1, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        x = rng.random(shape)
        x[rng.random(shape) < 0.2] = 0.0
        x[rng.random(shape) < 0.2] = 1.0
        w = rng.normal(size=shape) * float(rng.choice([0.1, 1.0, 10.0, 1e3]))
        lo, hi = A.perturbation_bounds(x, eps)
        x_adv = A.adversarial_image(x, w, lo, hi)
        r = A.project(w, lo, hi)
        worst_box = max(worst_box, float(-x_adv.min()), float(x_adv.max() - 1.0))
        worst_budget = max(worst_budget, float(np.abs(r).max() - eps), float(np.abs(x_adv - x).max() - eps))
    elapsed = time.perf_counter() - start
    _detail(request, f"box excess {worst_box:.2e}, budget excess {worst_budget:.2e}, clip calls {len(clips)}, {elapsed:.2f}s")
    assert worst_box <= 0.0
    assert worst_budget <= 1e-6
    assert not clips
    assert elapsed < 5.0


def _full_graph_loss(tape, w, x, lo, hi, specs, regions, model, y_src, y_tgt):
    xa = ng.add(A.project(w, lo, hi), x)
    variants = [X.apply(xa, s) for s in specs]
    n = len(variants)
    mixed = [mix_once(variants[i], variants[(i + 1) % n], regions[i]) for i in range(n)]
    total = None
    for v in mixed:
        term = A.triplet_loss(forward(model, v), y_src, y_tgt, 0.1)
        total = term if total is None else ng.add(total, term)
    return total


@pytest.mark.criterion(2, "gradient oracle through the full attack graph")
def test_criterion_2_gradient_oracle(request):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = init_weights(ModelSpec("cnn-small", (1, 8, 8), 4), seed)
        x = rng.random((1, 8, 8))
        w0 = rng.normal(size=(1, 8, 8))
        lo, hi = A.perturbation_bounds(x, 0.07)
        specs = [X.sample_spec(rng, k) for k in X.KINDS]
        regions = [sample_region((1, 8, 8), MixupConfig(), rng) for _ in specs]
        y_src, y_tgt = 0, int(rng.integers(1, 4))

        tape = ng.Tape("f64")
        wt = tape.leaf(w0)
        (g,) = tape.backward(_full_graph_loss(tape, wt, x, lo, hi, specs, regions, model, y_src, y_tgt), [wt])

        def scalar(w):
            t = ng.Tape("f64")
            return float(_full_graph_loss(t, t.constant(w), x, lo, hi, specs, regions, model, y_src, y_tgt).data)

        worst = max(worst, rel_err(g, ng.central_difference(scalar, w0)))
    elapsed = time.perf_counter() - start
    _detail(request, f"max relative error {worst:.2e} over 100 seeds, {elapsed:.1f}s")
    assert worst <= 1e-5
    assert elapsed < 60.0


def _closed_form_trace(gs, b1, b2, alpha, delta, w0=0.0):
    """w_T from explicit sums m_t = (1-b1) sum b1^(t-s) g_s, v_t likewise."""
    w = w0
    for t in range(1, len(gs) + 1):
        m = (1 - b1) * sum(b1 ** (t - s) * gs[s - 1] for s in range(1, t + 1))
        v = (1 - b2) * sum(b2 ** (t - s) * gs[s - 1] ** 2 for s in range(1, t + 1))
        w -= alpha * m / (v + delta) ** 0.5
    return w


@pytest.mark.criterion(3, "optimizer algebra: sign-step reduction and scalar traces")
def test_criterion_3_optimizer_algebra(request):
    rng = np.random.default_rng(7)
    cfg = AttackConfig(beta1=0.0, beta2=0.0, delta=0.0, alpha=1.0)
    mismatches = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 6, size=3))
        g = rng.normal(size=shape) * 10.0 ** rng.uniform(-8, 3)
        g[g == 0] = 1.0
        w = rng.normal(size=shape)
        lo, hi = A.perturbation_bounds(np.full(shape, 0.5), 0.07)
        s = A.momentum_step(A.PerturbationState(w, np.zeros(shape), np.zeros(shape), lo, hi), g, cfg)
        mismatches += int(not np.array_equal(s.w, w - np.sign(g)))
    traces = [
        ((1.0, -1.0, 1.0), 0.5, 0.5, 1.0, 1e-8),
        ((1.0, -1.0, 1.0), 0.99, 0.999, 1.0, 1e-8),
        ((0.3, 0.2, -0.7), 0.0, 0.1, 0.5, 0.0),
        ((2.0, 2.0, 2.0), 0.9, 0.9, 1.0, 1e-8),
    ]
    worst = 0.0
    for gs, b1, b2, alpha, delta in traces:
        tcfg = AttackConfig(beta1=b1, beta2=b2, alpha=alpha, delta=delta)
        lo, hi = A.perturbation_bounds(np.array([0.5]), 0.07)
        s = A.PerturbationState(np.zeros(1), np.zeros(1), np.zeros(1), lo, hi)
        for gv in gs:
            s = A.momentum_step(s, np.array([gv]), tcfg)
        worst = max(worst, abs(float(s.w[0]) - _closed_form_trace(gs, b1, b2, alpha, delta)))
    _detail(request, f"sign-step mismatches {mismatches}/1000, worst trace error {worst:.1e}")
    assert mismatches == 0
    assert worst <= 1e-12


@pytest.mark.criterion(4, "white-box potency: tSuc >= 0.90 on cnn-small, 200 tasks")
def test_criterion_4_white_box(request, world):
    model = world["models"]["cnn-small"]
    tasks = B.select_attack_set(world["pool"], [model], 200, np.random.default_rng([0, 0]))
    tasks = [replace(t, surrogates=(model,)) for t in tasks]
    cfg = AttackConfig()
    assert (cfg.eps, cfg.steps, cfg.alpha, cfg.group_size, cfg.gamma, cfg.mixup.ratio, cfg.mixup.repeats) == (
        0.07, 10, 1.0, 10, 0.1, 0.7, 3,
    )  # fmt: skip
    start = time.perf_counter()
    outcomes = B.run_tasks(tasks, B.method_runner("idaa", cfg), seed=1, threads=1)
    elapsed = time.perf_counter() - start
    s = B.evaluate(outcomes, model)
    _detail(request, f"white-box tSuc {s.tsuc:.3f} (fSuc {s.fsuc:.3f}) on {s.n} tasks, {elapsed:.0f}s")
    assert s.tsuc >= 0.90
    assert elapsed < 600


@pytest.mark.criterion(5, "transfer ordering IDAA >= DIM >= MI, IDAA - MI >= 5pp")
def test_criterion_5_transfer_ordering(request, grid):
    f = {m: _black_box_mean(grid, m, "fsuc") for m in ("idaa", "dim", "mi")}
    _detail(
        request,
        "black-box fSuc over 5 seeds: " + ", ".join(f"{m}={v:.3f}" for m, v in f.items())
        + f", idaa-mi={100 * (f['idaa'] - f['mi']):+.1f}pp",
    )  # fmt: skip
    assert f["idaa"] >= f["dim"] >= f["mi"]
    assert f["idaa"] - f["mi"] >= 0.05


@pytest.mark.criterion(6, "ablation signs: adaptive >= identical, K=3 >= K=0, beta-appendix >= default")
def test_criterion_6_ablation_signs(request, world, grid):
    sur = "cnn-small"
    default = _black_box_mean(grid, "idaa", "tsuc", sur)
    base = AttackConfig()
    identical = [_run(world, _grid_config(world, s, ("idaa-mi",), base, [sur])) for s in SEEDS]
    no_mix = [_run(world, _grid_config(world, s, ("idaa",), replace(base, mixup=MixupConfig(repeats=0)), [sur])) for s in SEEDS]
    betas = [_run(world, _grid_config(world, s, ("idaa",), base.with_betas("beta-appendix"), [sur])) for s in SEEDS]
    t_identical = _black_box_mean(identical, "idaa-mi", "tsuc")
    t_k0 = _black_box_mean(no_mix, "idaa", "tsuc")
    t_betas = _black_box_mean(betas, "idaa", "tsuc")
    _detail(
        request,
        f"black-box tSuc from {sur}: adaptive {default:.3f} vs identical {t_identical:.3f}; "
        f"K=3 {default:.3f} vs K=0 {t_k0:.3f}; (0.0,0.1) {t_betas:.3f} vs (0.99,0.999) {default:.3f}",
    )
    checks = {
        "adaptive>=identical": default >= t_identical,
        "K3>=K0": default >= t_k0,
        "beta-appendix>=default": t_betas >= default,
    }
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


def _fabricated(pairs, labels):
    outs = [AttackOutcome(np.zeros((1, 1, 1)), [], [], 0, s, t) for s, t in pairs]
    return outs, (lambda batch: np.asarray(labels))


@pytest.mark.criterion(7, "metric identities")
def test_criterion_7_metric_identities(request, grid):
    rows = [r for rep in grid for r in rep.rows]
    assert rows and all(r.tsuc <= r.fsuc for r in rows)
    for rep in grid:
        for line in rep.to_csv().splitlines()[1:]:
            cells = line.split(",")
            assert float(cells[5]) <= float(cells[4])
    cases = [
        (([(0, 1), (3, 2), (1, 4)], [1, 2, 4]), (1.0, 1.0)),
        (([(0, 1), (3, 2), (1, 4)], [0, 3, 1]), (0.0, 0.0)),
        (([(0, 1)] * 4, [2, 1, 2, 1]), (1.0, 0.5)),
    ]
    for (pairs, labels), expected in cases:
        s = B.evaluate(*_fabricated(pairs, labels))
        assert (s.fsuc, s.tsuc) == expected
    _detail(request, f"{len(rows)} report rows, 3 fabricated cases exact")


@pytest.mark.criterion(8, "reproducibility: identical CSV bytes with --threads 1")
def test_criterion_8_reproducible_csv(request, world, tmp_path):
    import json

    p = world["paths"]
    cfg = {
        "targets": [p["mlp-2"], p["cnn-small"], p["cnn-wide"]],
        "surrogates": [p["cnn-small"], [p["mlp-2"], p["cnn-wide"]]],
        "methods": ["idaa", "dim", "mi"],
        "samples": 8,
        "dataset": {"kind": "synthetic", "seed": 1, "per_class": 30},
    }
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(cfg))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["attack", "--config", str(cfg_path), "--threads", "1", "--seed", "5", "--out", str(out)]) == 0
        outs.append((out / "report.csv").read_bytes())
    _detail(request, f"{len(outs[0])} bytes, identical={outs[0] == outs[1]}")
    assert outs[0] == outs[1]
