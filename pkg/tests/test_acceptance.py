"""Desk-scale acceptance suite.

Every criterion prints one PASS/FAIL line (run with ``pytest -s``) and the
collected report is written to ``artifacts/acceptance_report.txt``. The
benchmarks are paired by seed: baseline and corrected runs of a prompt
start from the same initial noise.

Criteria at a glance:
  1. single-class 200-prompt benchmark: corrected accuracy beats baseline
     by >= 10 points and corrected MAE is strictly lower
  2. multi-class 100-prompt benchmark: corrected accuracy strictly higher,
     with the latent-averaging path taken in >= 30% of corrected runs
  3. topk(P=50) beats random(P=50) on a fixed 100-prompt subset
  4. guidance-window sweep: the zero-guidance row equals baseline exactly;
     the best nonzero row gains >= 5 accuracy points over baseline
  5. one-step-prediction count agreement at the default mid step >= 0.8
  6. exact invariant suite (bit-exact / stated tolerances)
  7. guidance gradient matches finite differences within 1e-3 relative
  8. built-in counter >= 99% exact on clean renders; external protocol
     round-trips the reference counter bit-exactly
"""

import copy
import math
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch

from tallydiff.bench import (
    ablate_guidance_window,
    ablate_loss_strategy,
    build_multi_benchmark,
    build_single_benchmark,
    probe_tmid_sufficiency,
    run_benchmark,
)
from tallydiff.checkpoint import load_checkpoint
from tallydiff.counting import (
    ClassCorrection,
    CorrectionPlan,
    CounterConfig,
    count_objects,
)
from tallydiff.encoder import encode_prompt
from tallydiff.external import CounterEndpoint, external_count
from tallydiff.guidance import (
    GuidanceConfig,
    correct_single_class,
    gaussian_smooth,
    guidance_loss,
    guided_step,
)
from tallydiff.latents import AttentionMap
from tallydiff.multiclass import MultiClassJob, correct_multi_class
from tallydiff.pipeline import RunConfig, generate
from tallydiff.sampler import denoise_with_attention, finish_denoising, sample_trajectory
from tallydiff.scenes import PromptSpec, generate_scene
from tallydiff.schedule import forward_noise, predict_x0
from tallydiff.util import derive_seed, save_png
from tests.conftest import ARTIFACTS

pytestmark = pytest.mark.acceptance

# Benchmark sizes/seeds are fixed: regenerating them yields identical specs.
SINGLE_SEED = 100
MULTI_SEED = 200
STRATEGY_SUBSET = 100
WINDOW_SUBSET = 60
WINDOW_PAIRS = [(0, 40), (10, 40), (20, 40)]
TMID_PROBE_PROMPTS = 100
TMID_AGREEMENT_MIN = 0.80

_REPORT: list[str] = []


def _report(line: str) -> None:
    print(line, file=sys.stderr)
    _REPORT.append(line)


@pytest.fixture(scope="session", autouse=True)
def _write_report():
    yield
    if _REPORT:
        ARTIFACTS.mkdir(exist_ok=True)
        (ARTIFACTS / "acceptance_report.txt").write_text("\n".join(_REPORT) + "\n")


@pytest.fixture(scope="module")
def desk(desk_checkpoint):
    return load_checkpoint(desk_checkpoint)


@pytest.fixture(scope="module")
def base_cfg(desk_checkpoint):
    return RunConfig(
        prompt=PromptSpec(targets={0: 1}),  # placeholder; bench swaps prompts in
        seed=0,
        checkpoint=str(desk_checkpoint),
    )


@pytest.fixture(scope="module")
def single_comparison(desk, base_cfg):
    spec = build_single_benchmark(desk.vocab, counts=[2, 3, 5, 7], per_count=50, seed=SINGLE_SEED)
    out = ARTIFACTS / "bench_single"
    return run_benchmark(spec, base_cfg, base_cfg, out_dir=out)


@pytest.fixture(scope="module")
def multi_comparison(desk, base_cfg):
    spec = build_multi_benchmark(desk.vocab, size=100, seed=MULTI_SEED)
    out = ARTIFACTS / "bench_multi"
    return run_benchmark(spec, base_cfg, base_cfg, out_dir=out)


def test_criterion_1_single_class_margin(single_comparison):
    base, corr = single_comparison.baseline, single_comparison.corrected
    gain = corr.acc - base.acc
    ok = gain >= 10.0 and corr.mae < base.mae
    _report(
        f"CRITERION 1 {'PASS' if ok else 'FAIL'}: single-class 200-prompt paired bench: "
        f"acc {base.acc:.1f} -> {corr.acc:.1f} (gain {gain:+.1f}, need >= +10), "
        f"mae {base.mae:.3f} -> {corr.mae:.3f} (need strictly lower)"
    )
    assert not base.ok or all(o.error is None for o in base.outcomes)
    assert gain >= 10.0
    assert corr.mae < base.mae


def test_criterion_2_multi_class_margin(multi_comparison):
    base, corr = multi_comparison.baseline, multi_comparison.corrected
    multi_fraction = corr.route_fraction("multi")
    ok = corr.acc > base.acc and multi_fraction >= 0.30
    _report(
        f"CRITERION 2 {'PASS' if ok else 'FAIL'}: multi-class 100-prompt bench: "
        f"acc {base.acc:.1f} -> {corr.acc:.1f} (need strict gain), "
        f"averaging path in {multi_fraction:.0%} of corrected runs (need >= 30%)"
    )
    assert corr.acc > base.acc
    assert multi_fraction >= 0.30


def test_criterion_3_loss_strategy_ordering(desk, base_cfg):
    spec = build_single_benchmark(
        desk.vocab, counts=[2, 3, 5, 7], per_count=50, seed=SINGLE_SEED
    ).subset(STRATEGY_SUBSET)
    results = ablate_loss_strategy(spec, ["topk", "random"], base_cfg, out_dir=ARTIFACTS / "ablate_loss")
    topk, rand = results["topk"], results["random"]
    ok = topk.acc > rand.acc
    _report(
        f"CRITERION 3 {'PASS' if ok else 'FAIL'}: loss strategies on {STRATEGY_SUBSET} shared-seed "
        f"prompts: topk(P=50) acc {topk.acc:.1f} vs random(P=50) acc {rand.acc:.1f} (need strict)"
    )
    assert topk.acc > rand.acc


def test_criterion_4_guidance_window_shape(desk, base_cfg):
    spec = build_single_benchmark(
        desk.vocab, counts=[2, 3, 5, 7], per_count=50, seed=SINGLE_SEED
    ).subset(WINDOW_SUBSET)
    results = ablate_guidance_window(spec, WINDOW_PAIRS, base_cfg, out_dir=ARTIFACTS / "ablate_window")
    zero = results[(0, 40)]
    baseline = run_benchmark(spec, base_cfg, base_cfg, out_dir=None).baseline
    zero_matches = [a.verdict == b.verdict and a.counts == b.counts
                    for a, b in zip(zero.outcomes, baseline.outcomes)]
    best_nonzero = max(
        (res for pair, res in results.items() if pair[0] > 0), key=lambda r: r.acc
    )
    gain = best_nonzero.acc - baseline.acc
    ok = all(zero_matches) and gain >= 5.0
    window_accs = ", ".join(f"{g}/{t}={r.acc:.1f}" for (g, t), r in results.items())
    _report(
        f"CRITERION 4 {'PASS' if ok else 'FAIL'}: guidance window on {WINDOW_SUBSET} prompts: "
        f"zero-guidance row equals baseline exactly ({all(zero_matches)}); "
        f"accs [{window_accs}] vs baseline {baseline.acc:.1f} (best nonzero gain {gain:+.1f}, need >= +5)"
    )
    assert all(zero_matches)
    assert gain >= 5.0


def test_criterion_5_tmid_sufficiency(desk, base_cfg):
    spec = build_single_benchmark(
        desk.vocab, counts=[2, 3, 5, 7], per_count=50, seed=SINGLE_SEED
    ).subset(TMID_PROBE_PROMPTS)
    t_mid = base_cfg.guidance.t_mid
    curve = probe_tmid_sufficiency(
        spec, [1, 5, 10, 20, 25, t_mid, 35], base_cfg, out_path=ARTIFACTS / "tmid_agreement.csv"
    )
    by_t = dict(curve)
    ok = by_t[t_mid] >= TMID_AGREEMENT_MIN
    curve_str = ", ".join(f"t={t}:{v:.2f}" for t, v in curve)
    _report(
        f"CRITERION 5 {'PASS' if ok else 'FAIL'}: one-step-prediction count agreement "
        f"[{curve_str}]; at default t_mid={t_mid}: {by_t[t_mid]:.2f} (need >= {TMID_AGREEMENT_MIN})"
    )
    assert by_t[t_mid] >= TMID_AGREEMENT_MIN


def test_criterion_6_exact_invariant_suite(desk):
    model = desk.model
    schedule = desk.schedule()
    vocab = desk.vocab
    checks: list[tuple[str, bool]] = []
    cfg = GuidanceConfig(sigma_scale=GuidanceConfig().sigma_scale)
    t_mid = cfg.t_mid
    T = schedule.num_steps
    prompt = PromptSpec(targets={0: 3})
    cond = encode_prompt(prompt, model.prompt_encoder)
    z_mid, trajectory = sample_trajectory(501, cond, schedule, t_mid, model)

    # background preservation: outside the mask every guided step equals the
    # recorded trajectory bit-exactly, all the way down to t_mid
    mask = np.zeros((64, 64), dtype=bool)
    mask[24:40, 24:40] = True
    plan = CorrectionPlan(
        per_class={0: ClassCorrection(mask=mask, sign=+1, surplus=1)}, image_shape=(64, 64)
    )
    z = trajectory[T].clone()
    outside = torch.from_numpy(~mask)
    preserved = True
    for t in range(T, t_mid, -1):
        z, _ = guided_step(z, cond, t, plan, trajectory, schedule, cfg, model)
        if not torch.equal(z.grid[:, outside], trajectory[t - 1].grid[:, outside]):
            preserved = False
            break
    checks.append(("background preservation at t_mid (bit-exact outside mask)", preserved))

    # zero-guidance and empty-plan degeneracy
    z_sigma0, _ = correct_single_class(
        501, cond, plan, trajectory, schedule, replace(cfg, sigma_scale=0.0), model
    )
    empty_plan = CorrectionPlan(
        per_class={0: ClassCorrection(mask=np.zeros((64, 64), bool), sign=0, surplus=0)},
        image_shape=(64, 64),
    )
    z_empty, _ = correct_single_class(501, cond, empty_plan, trajectory, schedule, cfg, model)
    checks.append(
        (
            "zero-guidance / empty-plan degeneracy (bit-exact)",
            torch.equal(z_sigma0.grid, trajectory[t_mid].grid)
            and torch.equal(z_empty.grid, trajectory[t_mid].grid),
        )
    )

    # n = 1 multi-class degeneracy
    job = MultiClassJob.from_plan(plan, seed=501)
    z_multi, _ = correct_multi_class(job, cond, trajectory, schedule, cfg, model)
    z_single, _ = correct_single_class(501, cond, plan, trajectory, schedule, cfg, model)
    checks.append(("n=1 multi-class degeneracy (bit-exact)", torch.equal(z_multi.grid, z_single.grid)))

    # trajectory resumability
    resumed = finish_denoising(trajectory[t_mid], cond, schedule, model)
    full = finish_denoising(trajectory[T], cond, schedule, model)
    checks.append(("trajectory resumability (bit-exact)", torch.equal(resumed.grid, full.grid)))

    # smoothing mass conservation (1e-6)
    gen = torch.Generator().manual_seed(7)
    mass_ok = True
    for sigma in (0.5, 1.0, 1.7, 2.5):
        grid = torch.rand(16, 16, generator=gen, dtype=torch.float64)
        if abs(float(gaussian_smooth(grid, sigma).sum()) - float(grid.sum())) > 1e-6:
            mass_ok = False
    checks.append(("gaussian smoothing mass conservation (1e-6)", mass_ok))

    # loss oracle equivalence, 1000 random fixtures (exact selection + mean)
    rng = np.random.default_rng(61)
    loss_ok = True
    for trial in range(1000):
        strategy = ("topk", "bottomk", "random", "all")[trial % 4]
        side = int(rng.integers(2, 9))
        grid = rng.random((side, side))
        grid /= grid.sum()
        m = rng.random((side, side)) < 0.6
        if not m.any():
            m[0, 0] = True
        pct = float(rng.uniform(1.0, 100.0))
        lcfg = GuidanceConfig(top_percent=pct, smooth_sigma=0.0, strategy=strategy, random_seed=trial)
        attn = AttentionMap(per_token={1: torch.from_numpy(grid)}, step=trial % 40, class_tokens={0: 1})
        lplan = CorrectionPlan(
            per_class={0: ClassCorrection(mask=m, sign=+1, surplus=1)}, image_shape=m.shape
        )
        loss, entry = guidance_loss(attn, lplan, lcfg)
        values = grid[m]
        k = max(1, math.ceil(pct / 100.0 * values.size))
        if strategy == "topk":
            chosen = np.sort(values)[::-1][:k].copy()
        elif strategy == "bottomk":
            chosen = np.sort(values)[:k]
        elif strategy == "all":
            chosen = values
        else:
            g = torch.Generator().manual_seed(derive_seed(trial, trial % 40, 0))
            chosen = values[torch.randperm(values.size, generator=g)[:k].numpy()]
        if entry.selected != chosen.size:
            loss_ok = False
            break
        if float(loss) != float(torch.from_numpy(np.ascontiguousarray(chosen)).mean()):
            loss_ok = False
            break
    checks.append(("loss oracle equivalence on 1000 random fixtures (exact)", loss_ok))

    # metric oracle equivalence (exact)
    from tallydiff.bench import accuracy, mae
    from tallydiff.counting import ClassCount, CountReport

    rng = np.random.default_rng(62)
    results = []
    for _ in range(1000):
        classes = rng.choice(6, size=int(rng.integers(1, 4)), replace=False)
        targets = {int(c): int(rng.integers(1, 8)) for c in classes}
        counts = {c: max(0, t + int(rng.integers(-2, 3))) for c, t in targets.items()}
        report = CountReport(
            per_class={c: ClassCount(count=n, instances=[]) for c, n in counts.items()},
            image_shape=(8, 8),
        )
        results.append((report, targets))
    n_correct = sum(
        all(rep.count(c) == t for c, t in targets.items()) for rep, targets in results
    )
    total_err = sum(
        sum(abs(rep.count(c) - t) for c, t in targets.items()) for rep, targets in results
    )
    metric_ok = accuracy(results) == 100.0 * n_correct / 1000 and mae(results) == total_err / 1000
    checks.append(("metric oracle equivalence (exact)", metric_ok))

    # forward/backward schedule consistency (1e-5 relative)
    fb_ok = True
    gen = torch.Generator().manual_seed(8)
    for t in (1, 10, 25, 40):
        x0 = torch.randn(3, 64, 64, generator=gen)
        eps = torch.randn(3, 64, 64, generator=gen)
        rec = predict_x0(forward_noise(x0, eps, t, schedule), eps, t, schedule)
        if float((rec.grid - x0).norm() / x0.norm()) > 1e-5:
            fb_ok = False
    checks.append(("forward/backward schedule consistency (1e-5 relative)", fb_ok))

    all_ok = all(ok for _, ok in checks)
    _report(f"CRITERION 6 {'PASS' if all_ok else 'FAIL'}: exact invariant suite:")
    for name, ok in checks:
        _report(f"  - {name}: {'PASS' if ok else 'FAIL'}")
    assert all_ok, [name for name, ok in checks if not ok]


def test_criterion_7_gradient_correctness(desk):
    """Finite-difference agreement of the guidance gradient: 5 random
    directions x 8 probe cases on the trained model, float64."""
    model = copy.deepcopy(desk.model).double()
    schedule = desk.schedule()
    rng = np.random.default_rng(55)
    worst = 0.0
    failures = 0
    for case in range(8):
        cls = int(rng.choice(model.vocab.class_ids))
        prompt = PromptSpec(targets={cls: int(rng.integers(1, 6))})
        cond = encode_prompt(prompt, model.prompt_encoder)
        t = int(rng.integers(31, 41))
        sign = +1 if case % 2 == 0 else -1
        mask = np.zeros((64, 64), dtype=bool)
        r0, c0 = rng.integers(4, 36, size=2)
        mask[r0 : r0 + 20, c0 : c0 + 20] = True
        plan = CorrectionPlan(
            per_class={cls: ClassCorrection(mask=mask, sign=sign, surplus=sign)},
            image_shape=(64, 64),
        )
        cfg = GuidanceConfig(smooth_sigma=1.0, top_percent=50.0)
        gen = torch.Generator().manual_seed(derive_seed(700, case))
        z = torch.randn(3, 64, 64, generator=gen, dtype=torch.float64)

        def loss_at(grid):
            from tallydiff.latents import Latent

            _, attn = denoise_with_attention(Latent(grid=grid, step=t), cond, t, model)
            return guidance_loss(attn, plan, cfg)[0]

        z_req = z.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(loss_at(z_req), z_req)
        h = 1e-5
        for _ in range(5):
            d = torch.randn(3, 64, 64, generator=gen, dtype=torch.float64)
            d /= d.norm()
            analytic = float((grad * d).sum())
            numeric = (float(loss_at(z + h * d)) - float(loss_at(z - h * d))) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(numeric), 1e-12)
            worst = max(worst, rel)
            if rel > 1e-3:
                failures += 1
    ok = failures == 0
    _report(
        f"CRITERION 7 {'PASS' if ok else 'FAIL'}: gradient vs central differences, "
        f"8 cases x 5 directions: worst relative error {worst:.2e} (need <= 1e-3)"
    )
    assert ok


def test_criterion_8_counter_soundness(tmp_path, desk):
    vocab = desk.vocab
    cfg = CounterConfig()
    rng = np.random.default_rng(42)
    exact = 0
    total = 500
    for i in range(total):
        if rng.random() < 0.4:
            classes = rng.choice(vocab.class_ids, size=int(rng.integers(2, 4)), replace=False)
            targets = {int(c): int(rng.integers(1, 4)) for c in classes}
        else:
            targets = {int(rng.choice(vocab.class_ids)): int(rng.integers(1, 11))}
        prompt = PromptSpec(targets=targets, background_id=int(rng.integers(0, 2)))
        image, _, _ = generate_scene(prompt, seed=80_000 + i, vocab=vocab)
        report = count_objects(image, sorted(targets), cfg, vocab)
        exact += int(report.counts() == targets)
    rate = exact / total

    image, _, _ = generate_scene(PromptSpec(targets={0: 3, 4: 2}), seed=90_001, vocab=vocab)
    png = tmp_path / "probe.png"
    save_png(png, image)
    endpoint = CounterEndpoint(command=(sys.executable, "-m", "tallydiff.fake_counter"), timeout_s=60)
    wire = external_count(str(png), [0, 4], endpoint, cfg, vocab)
    direct = count_objects(image, [0, 4], cfg, vocab)
    round_trip_exact = wire.counts() == direct.counts() and all(
        a.confidence == b.confidence and np.array_equal(a.mask, b.mask)
        for c in (0, 4)
        for a, b in zip(wire.per_class[c].instances, direct.per_class[c].instances)
    )
    ok = rate >= 0.99 and round_trip_exact
    _report(
        f"CRITERION 8 {'PASS' if ok else 'FAIL'}: counter exact-match rate {rate:.1%} on 500 "
        f"clean renders (need >= 99%); protocol round-trip bit-exact: {round_trip_exact}"
    )
    assert rate >= 0.99
    assert round_trip_exact
